fn main() {
    std::process::exit(sveil::cli::main())
}
