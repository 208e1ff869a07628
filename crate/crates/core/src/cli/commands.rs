//! One function per subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::config::PipelineConfig;
use super::data::{ensure_distinct, file_name, load_windows, prepare, provenance, resolve, windows_to_series, write_json, write_series, write_text};
use super::{
    BaselineArgs, BaselineMethod, Cli, Command, EvalTarget, EvaluateArgs, GradcheckArgs, IdentityTarget, IngestArgs, ReportArgs, SynthArgs, TrainAaeArgs,
    TrainArgs, TrainRaeArgs, TransformArgs, OUT_DIR_ENV,
};
use crate::anonymization::{train_aae, AaeArchitecture, AaeModel, AdversarialSchedule};
use crate::baselines::{default_embedding, knn_ranks, resample_roundtrip, ssa_window};
use crate::datasets::{
    build_replacement_pairs, generate, load_csv, relabel_users, split, CsvSchema, LabelRule, LabeledWindow, Manifest, ManifestRef, NamedPartition, Seeds,
    SplitKind, SplitStrategy, Standardizer, SyntheticConfig, SyntheticData,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, train_classifier, EvalReport, Target};
use crate::neuralcore::gradcheck::random_suite;
use crate::neuralcore::serialize::read_bundle;
use crate::neuralcore::{CompositeWeights, TrainConfig};
use crate::replacement::{train_rae, RaeArchitecture, RaeModel};

struct Ctx {
    config: PipelineConfig,
    out_dir: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let config = match &cli.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        let out_dir = cli
            .out_dir
            .clone()
            .or_else(|| config.output_dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self { config, out_dir })
    }

    fn out(&self, path: &Path) -> PathBuf {
        resolve(&self.out_dir, path)
    }

    /// Loads the manifest named by the flag or the config file and applies
    /// the config's partition and window overrides.
    fn manifest(&self, flag: Option<&PathBuf>) -> Result<(Manifest, PathBuf)> {
        let path = flag
            .or(self.config.manifest.as_ref())
            .ok_or_else(|| Error::Config("no manifest given (use --manifest or the config file)".into()))?;
        let mut m = Manifest::load(path)?;
        if let Some(p) = &self.config.partition {
            m.partition = p.clone();
        }
        if let Some(w) = self.config.window {
            m.window = w;
        }
        if let Some(s) = self.config.stride {
            m.stride = s;
        }
        m.validate()?;
        Ok((m, path.clone()))
    }

    fn train_config(&self, args: &TrainArgs, default_seed: u64) -> Result<TrainConfig> {
        let c = &self.config.train;
        let d = TrainConfig::default();
        let mut cfg = TrainConfig {
            epochs: args.epochs.or(c.epochs).unwrap_or(d.epochs),
            batch_size: args.batch_size.or(c.batch_size).unwrap_or(d.batch_size),
            dropout_rate: args.dropout.or(c.dropout_rate).unwrap_or(d.dropout_rate),
            l2_lambda: args.l2.or(c.l2_lambda).unwrap_or(d.l2_lambda),
            rng_seed: args.seed.or(c.seed).unwrap_or(default_seed),
            adam: d.adam,
        };
        cfg.adam.learning_rate = args.lr.or(c.learning_rate).unwrap_or(d.adam.learning_rate);
        cfg.validate()?;
        if !(cfg.adam.learning_rate > 0.0 && cfg.adam.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", cfg.adam.learning_rate)));
        }
        Ok(cfg)
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Ingest(a) => ingest(&ctx, a),
        Command::TrainRae(a) => train_rae_cmd(&ctx, a),
        Command::TrainAae(a) => train_aae_cmd(&ctx, a),
        Command::Transform(a) => transform(&ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::Baseline(a) => baseline(&ctx, a),
        Command::Report(a) => report(&ctx, a),
        Command::Gradcheck(a) => gradcheck(&ctx, a),
    }
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    if a.trials < 2 {
        return Err(Error::Config("synthetic data needs at least two trials for the trial split".into()));
    }
    let cfg = SyntheticConfig {
        n_users: a.users,
        n_activities: a.activities,
        windows_per_pair: a.windows_per_pair,
        width: a.width,
        channels: a.channels,
        seed: a.seed,
        noise_std: a.noise,
        n_trials: a.trials,
        rate_hz: a.rate,
    };
    let data = generate(&cfg)?;
    let acts = &data.vocab.activities;
    let pick = |flag: &Option<String>, from_end: usize| -> Result<String> {
        match flag {
            Some(l) if acts.contains(l) => Ok(l.clone()),
            Some(l) => Err(Error::Label(l.clone())),
            None if acts.len() >= 3 => Ok(acts[acts.len() - from_end].clone()),
            None => Err(Error::Config("default partition needs at least three activities".into())),
        }
    };
    let (sensitive, neutral) = (pick(&a.sensitive, 2)?, pick(&a.neutral, 1)?);
    if sensitive == neutral {
        return Err(Error::Config(format!("`{sensitive}` cannot be both sensitive and neutral")));
    }
    let partition = NamedPartition {
        required: acts.iter().filter(|l| **l != sensitive && **l != neutral).cloned().collect(),
        sensitive: vec![sensitive],
        neutral: vec![neutral],
    };
    let channels: Vec<String> = (1..=a.channels).map(|c| format!("c{c}")).collect();
    let prov = provenance("synth", serde_json::to_value(&cfg)?, &[]);
    let mut manifest = Manifest {
        schema: CsvSchema {
            channels: channels.clone(),
            labels: acts.clone(),
            rate_hz: a.rate,
        },
        users: data.vocab.users.clone(),
        channel_groups: Vec::new(),
        partition,
        window: a.width,
        stride: a.width,
        eval_stride: a.width,
        label_rule: LabelRule::Pure,
        split: SplitStrategy::trial(&data.vocab.users, &format!("t{}", a.trials), 0.2),
        seeds: Seeds::default(),
        standardization: None,
        user_attributes: data
            .vocab
            .users
            .iter()
            .zip(&data.attributes)
            .map(|(u, &g)| (u.clone(), SyntheticData::ATTRIBUTE_LABELS[g].to_string()))
            .collect(),
        attribute_labels: SyntheticData::ATTRIBUTE_LABELS.iter().map(|s| s.to_string()).collect(),
        provenance: prov.clone(),
    };
    let splits = split(&data.windows, &manifest.split, manifest.seeds.split)?;
    manifest.standardization = Some(Standardizer::fit(&splits.train)?);
    manifest.validate()?;

    // one series per (user, trial): its windows back to back
    let mut ordered: Vec<LabeledWindow> = data.windows.clone();
    ordered.sort_by(|x, y| (x.user, &x.trial_id).cmp(&(y.user, &y.trial_id)));
    let series = windows_to_series(&ordered, &channels, a.rate);
    let dir = ctx.out(&a.out);
    write_series(&dir.join("data.csv"), &series, acts, &prov)?;
    write_json(&dir.join("manifest.json"), &serde_json::to_value(&manifest)?)?;
    println!("synth: {} windows for {} users -> {}", data.windows.len(), a.users, dir.display());
    Ok(())
}

fn count_by<F: Fn(&LabeledWindow) -> String>(windows: &[LabeledWindow], key: F) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for w in windows {
        *m.entry(key(w)).or_insert(0) += 1;
    }
    m
}

fn ingest(ctx: &Ctx, a: &IngestArgs) -> Result<()> {
    let (mut manifest, mpath) = ctx.manifest(a.manifest.as_ref())?;
    let series = load_csv(&a.input, &manifest.schema)?;
    let vocab = manifest.vocab();
    for s in &series {
        vocab.user_index(&s.user_id)?;
    }
    let windows = manifest.windows(&series, manifest.stride)?;
    if windows.is_empty() {
        return Err(Error::Precondition(format!(
            "{} yields no windows of width {}",
            file_name(&a.input),
            manifest.window
        )));
    }
    let splits = split(&windows, &manifest.split, manifest.seeds.split)?;
    manifest.standardization = Some(Standardizer::fit(&splits.train)?);
    let prov = provenance("ingest", json!({ "manifest": file_name(&mpath) }), &[&a.input]);
    manifest.provenance = prov.clone();
    manifest.validate()?;
    let labels = &manifest.schema.labels;
    let summary = json!({
        "provenance": prov,
        "series": series.len(),
        "samples": series.iter().map(|s| s.len()).sum::<usize>(),
        "windows": windows.len(),
        "split": { "train": splits.train.len(), "validation": splits.validation.len(), "test": splits.test.len() },
        "windows_per_user": count_by(&windows, |w| w.user_id.clone()),
        "windows_per_activity": count_by(&windows, |w| labels[w.activity].clone()),
    });
    let dir = ctx.out(&a.out);
    ensure_distinct(&dir.join("data.csv"), &[&a.input])?;
    write_series(&dir.join("data.csv"), &series, labels, &prov)?;
    write_json(&dir.join("manifest.json"), &serde_json::to_value(&manifest)?)?;
    write_json(&dir.join("ingest.json"), &summary)?;
    println!("ingest: {} series, {} windows -> {}", series.len(), windows.len(), dir.display());
    Ok(())
}

/// Manifest with the standardization actually used, for model provenance.
fn with_standardization(manifest: &Manifest, st: &Standardizer) -> Manifest {
    let mut m = manifest.clone();
    m.standardization = Some(st.clone());
    m.provenance = Value::Null;
    m
}

fn train_rae_cmd(ctx: &Ctx, a: &TrainRaeArgs) -> Result<()> {
    let (manifest, mpath) = ctx.manifest(a.manifest.as_ref())?;
    let windows = load_windows(&manifest, &a.input, manifest.stride)?;
    let prep = prepare(&manifest, &windows)?;
    let full = with_standardization(&manifest, &prep.standardizer);
    let reference = full.reference()?;
    let partition = manifest.inference_partition()?;
    let pairs = build_replacement_pairs(&prep.splits.train, &partition, manifest.seeds.pairs)?;
    // a small validation split may miss the neutral class; selection then falls back to training loss
    let vpairs = match build_replacement_pairs(&prep.splits.validation, &partition, manifest.seeds.pairs.wrapping_add(1)) {
        Ok(p) => p,
        Err(Error::Config(msg)) if !prep.splits.validation.is_empty() => {
            eprintln!("warning: no validation pairs ({msg}); selecting on training loss");
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    let arch = match a.layers.clone().or_else(|| ctx.config.rae.layers.clone()) {
        Some(layers) => RaeArchitecture { layers },
        None => RaeArchitecture::standard(reference.input_dim()),
    };
    let cfg = ctx.train_config(&a.train, manifest.seeds.train)?;
    let (mut model, fit) = train_rae(&pairs, &vpairs, &arch, &cfg, reference)?;
    model.provenance = json!({
        "run": provenance("train-rae", json!({ "architecture": arch, "train": cfg }), &[&mpath, &a.input]),
        "manifest": full,
        "best_epoch": fit.best_epoch,
        "history": fit.history,
    });
    let out = ctx.out(&a.out);
    super::data::ensure_parent(&out)?;
    ensure_distinct(&out, &[&a.input, &mpath])?;
    model.save(&out)?;
    let best = &fit.history[fit.best_epoch];
    println!(
        "train-rae: {} pairs, best epoch {} (score {:.5}) -> {}",
        pairs.len(),
        fit.best_epoch,
        best.validation_score.unwrap_or(best.train_loss),
        out.display()
    );
    Ok(())
}

fn weights(ctx: &Ctx, flag: Option<&Vec<f64>>) -> Result<CompositeWeights> {
    match flag.map(|v| v.as_slice()).or(ctx.config.aae.weights.as_ref().map(|w| &w[..])) {
        Some(&[bi, ba, bd]) => CompositeWeights::new(bi, ba, bd),
        Some(other) => Err(Error::Config(format!("expected three weights, got {}", other.len()))),
        None => Ok(CompositeWeights::default()),
    }
}

fn train_aae_cmd(ctx: &Ctx, a: &TrainAaeArgs) -> Result<()> {
    let (manifest, mpath) = ctx.manifest(a.manifest.as_ref())?;
    let windows = load_windows(&manifest, &a.input, manifest.stride)?;
    let prep = prepare(&manifest, &windows)?;
    let full = with_standardization(&manifest, &prep.standardizer);
    let reference = full.reference()?;
    let (train, validation, classes) = match a.identity {
        IdentityTarget::Users => (prep.splits.train, prep.splits.validation, manifest.users.clone()),
        IdentityTarget::Attribute => {
            let per_user = manifest.attribute_per_user()?;
            let n = manifest.attribute_labels.len();
            (
                relabel_users(&prep.splits.train, &per_user, n)?,
                relabel_users(&prep.splits.validation, &per_user, n)?,
                manifest.attribute_labels.clone(),
            )
        }
    };
    let c = &ctx.config.aae;
    let d = AdversarialSchedule::default();
    let schedule = AdversarialSchedule {
        rounds: a.rounds.or(c.rounds).unwrap_or(d.rounds),
        warmup_epochs: a.warmup.or(c.warmup_epochs).unwrap_or(d.warmup_epochs),
        aae_steps_per_round: a.aae_steps.or(c.aae_steps_per_round).unwrap_or(d.aae_steps_per_round),
        adversary_steps_per_round: a.adversary_steps.or(c.adversary_steps_per_round).unwrap_or(d.adversary_steps_per_round),
        pretrain_epochs: a.pretrain.or(c.pretrain_epochs).unwrap_or(d.pretrain_epochs),
        eval_every: c.eval_every.unwrap_or(d.eval_every),
        probe_epochs: c.probe_epochs.unwrap_or(d.probe_epochs),
    };
    let da = AaeArchitecture::default();
    let arch = AaeArchitecture {
        encoder_hidden: c.encoder_hidden.clone().unwrap_or(da.encoder_hidden),
        latent_dim: c.latent_dim.unwrap_or(da.latent_dim),
        regularizer_params: c.regularizer_params.unwrap_or(da.regularizer_params),
    };
    let w = weights(ctx, a.weights.as_ref())?;
    let cfg = ctx.train_config(&a.train, manifest.seeds.train)?;
    let (mut model, fit) = train_aae(&train, &validation, w, &schedule, &arch, &cfg, reference, classes)?;
    model.provenance = json!({
        "run": provenance(
            "train-aae",
            json!({ "weights": w, "schedule": schedule, "architecture": arch, "train": cfg, "identity": format!("{:?}", a.identity).to_lowercase() }),
            &[&mpath, &a.input],
        ),
        "manifest": full,
        "best_round": fit.best_round,
        "history": fit.history,
    });
    let out = ctx.out(&a.out);
    super::data::ensure_parent(&out)?;
    ensure_distinct(&out, &[&a.input, &mpath])?;
    model.save(&out)?;
    println!(
        "train-aae: {} windows, {} rounds, best round {} -> {}",
        train.len(),
        schedule.rounds,
        fit.best_round,
        out.display()
    );
    Ok(())
}

#[allow(clippy::large_enum_variant)]
enum Model {
    Rae(RaeModel),
    Aae(AaeModel),
}

impl Model {
    fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (meta, _) = read_bundle(&mut &bytes[..])?;
        match meta.get("kind").and_then(Value::as_str) {
            Some("rae") => Ok(Model::Rae(RaeModel::from_bytes(&bytes)?)),
            Some("aae") => Ok(Model::Aae(AaeModel::from_bytes(&bytes)?)),
            other => Err(Error::Format(format!("{} is not a transform model (kind {other:?})", file_name(path)))),
        }
    }

    fn reference(&self) -> &ManifestRef {
        match self {
            Model::Rae(m) => &m.reference,
            Model::Aae(m) => &m.reference,
        }
    }

    fn provenance(&self) -> &Value {
        match self {
            Model::Rae(m) => &m.provenance,
            Model::Aae(m) => &m.provenance,
        }
    }

    fn transform_windows(&self, windows: &[LabeledWindow]) -> Result<Vec<LabeledWindow>> {
        match self {
            Model::Rae(m) => m.transform_windows(windows),
            Model::Aae(m) => m.transform_windows(windows),
        }
    }
}

fn transform(ctx: &Ctx, a: &TransformArgs) -> Result<()> {
    let models = a.model.iter().map(|p| Model::load(p)).collect::<Result<Vec<_>>>()?;
    let first = &models[0];
    for m in &models[1..] {
        first.reference().ensure_compatible(m.reference())?;
    }
    let manifest = match &a.manifest {
        Some(_) => ctx.manifest(a.manifest.as_ref())?.0,
        None => match first.provenance().get("manifest") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => ctx.manifest(None)?.0,
        },
    };
    let reference = first.reference();
    if manifest.window != reference.window || manifest.model_channels() != reference.channels || manifest.schema.labels != reference.activities {
        return Err(Error::Config("manifest does not match the model's window, channels or activities".into()));
    }
    let windows = load_windows(&manifest, &a.input, manifest.window)?;
    let st = &reference.standardization;
    let mut current = st.apply_all(&windows)?;
    for m in &models {
        current = m.transform_windows(&current)?;
    }
    let restored = current
        .into_iter()
        .map(|w| {
            Ok(LabeledWindow {
                x: st.invert(w.x.view())?,
                ..w
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let series = windows_to_series(&restored, &reference.channels, manifest.schema.rate_hz);
    let inputs: Vec<&Path> = std::iter::once(a.input.as_path()).chain(a.model.iter().map(PathBuf::as_path)).collect();
    let prov = provenance(
        "transform",
        json!({ "models": a.model.iter().map(|p| file_name(p)).collect::<Vec<_>>() }),
        &inputs,
    );
    let out = ctx.out(&a.out);
    ensure_distinct(&out, &inputs)?;
    write_series(&out, &series, &manifest.schema.labels, &prov)?;
    println!("transform: {} windows through {} model(s) -> {}", restored.len(), models.len(), out.display());
    Ok(())
}

/// Fails with a configuration error naming the first partition label that
/// never occurs in `windows`.
fn check_partition_present(manifest: &Manifest, windows: &[LabeledWindow], source: &Path) -> Result<()> {
    let vocab = manifest.vocab();
    let p = &manifest.partition;
    for (group, labels) in [("sensitive", &p.sensitive), ("neutral", &p.neutral), ("required", &p.required)] {
        for l in labels {
            let idx = vocab.activity_index(l)?;
            if !windows.iter().any(|w| w.activity == idx) {
                return Err(Error::Config(format!("{group} label `{l}` does not occur in {}", file_name(source))));
            }
        }
    }
    Ok(())
}

struct EvalData {
    raw: crate::datasets::Splits,
    transformed: Option<crate::datasets::Splits>,
}

struct TargetSpec {
    name: &'static str,
    target: Target,
    labels: Vec<String>,
    relabel: Option<Vec<usize>>,
}

impl TargetSpec {
    fn view(&self, windows: &[LabeledWindow]) -> Result<Vec<LabeledWindow>> {
        match &self.relabel {
            Some(map) => relabel_users(windows, map, self.labels.len()),
            None => Ok(windows.to_vec()),
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

type RunOutput = (BTreeMap<String, f64>, Vec<(String, EvalReport)>);

fn evaluate_run(data: &EvalData, specs: &[TargetSpec], manifest: &Manifest, cfg: &TrainConfig) -> Result<RunOutput> {
    let partition = manifest.inference_partition()?;
    let mut metrics = BTreeMap::new();
    let mut reports = Vec::new();
    for spec in specs {
        let part = (spec.target == Target::Activity).then_some(&partition);
        let (train, val, test) = (spec.view(&data.raw.train)?, spec.view(&data.raw.validation)?, spec.view(&data.raw.test)?);
        let clf = train_classifier(&train, &val, spec.target, cfg)?;
        let mut stages = vec![("raw", evaluate(&clf, &test, spec.target, &spec.labels, part)?)];
        if let Some(t) = &data.transformed {
            let (ttrain, tval, ttest) = (spec.view(&t.train)?, spec.view(&t.validation)?, spec.view(&t.test)?);
            stages.push(("transferred", evaluate(&clf, &ttest, spec.target, &spec.labels, part)?));
            let re = train_classifier(&ttrain, &tval, spec.target, cfg)?;
            stages.push(("retrained", evaluate(&re, &ttest, spec.target, &spec.labels, part)?));
        }
        for (stage, r) in stages {
            for (k, v) in r.metrics() {
                metrics.insert(format!("{}/{stage}/{k}", spec.name), v);
            }
            reports.push((format!("{}_{stage}", spec.name), r));
        }
    }
    Ok((metrics, reports))
}

fn evaluate_cmd(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    if a.repeats == 0 {
        return Err(Error::Config("--repeats must be positive".into()));
    }
    let (manifest, mpath) = ctx.manifest(a.manifest.as_ref())?;
    let raw_windows = load_windows(&manifest, &a.raw, manifest.eval_stride)?;
    check_partition_present(&manifest, &raw_windows, &a.raw)?;
    let trans_windows = match &a.input {
        Some(p) => {
            let w = load_windows(&manifest, p, manifest.eval_stride)?;
            check_partition_present(&manifest, &w, p)?;
            Some(w)
        }
        None => None,
    };
    let prep = prepare(&manifest, &raw_windows)?;
    let transformed = match &trans_windows {
        Some(w) => {
            let s = split(w, &manifest.split, manifest.seeds.split)?;
            let st = &prep.standardizer;
            Some(crate::datasets::Splits {
                train: st.apply_all(&s.train)?,
                validation: st.apply_all(&s.validation)?,
                test: st.apply_all(&s.test)?,
            })
        }
        None => None,
    };
    let trial_split = matches!(manifest.split.kind, SplitKind::Trial { .. });
    let has_attribute = manifest.attribute_labels.len() >= 2;
    let targets = match &a.targets {
        Some(t) => {
            let mut t = t.clone();
            t.sort();
            t.dedup();
            t
        }
        None => {
            let mut t = vec![EvalTarget::Activity];
            if trial_split {
                t.push(EvalTarget::Identity);
            }
            if has_attribute {
                t.push(EvalTarget::Attribute);
            }
            t
        }
    };
    let mut specs = Vec::new();
    for t in targets {
        specs.push(match t {
            EvalTarget::Activity => TargetSpec {
                name: "activity",
                target: Target::Activity,
                labels: manifest.schema.labels.clone(),
                relabel: None,
            },
            EvalTarget::Identity if !trial_split => {
                return Err(Error::Config("identity evaluation needs a trial split so test users are known".into()));
            }
            EvalTarget::Identity => TargetSpec {
                name: "identity",
                target: Target::Identity,
                labels: manifest.users.clone(),
                relabel: None,
            },
            EvalTarget::Attribute => TargetSpec {
                name: "attribute",
                target: Target::Identity,
                labels: manifest.attribute_labels.clone(),
                relabel: Some(manifest.attribute_per_user()?),
            },
        });
    }
    let base = ctx.train_config(&a.train, manifest.seeds.train)?;
    let data = EvalData { raw: prep.splits, transformed };
    let runs: Vec<RunOutput> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..a.repeats)
            .map(|r| {
                let cfg = base.with_seed(base.rng_seed.wrapping_add(r as u64));
                let (data, specs, manifest) = (&data, &specs, &manifest);
                s.spawn(move || evaluate_run(data, specs, manifest, &cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;

    let keys: Vec<String> = runs[0].0.keys().cloned().collect();
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for k in &keys {
        let values: Vec<f64> = runs.iter().map(|(m, _)| m[k]).collect();
        let (m, s) = mean_std(&values);
        mean.insert(k.clone(), m);
        std.insert(k.clone(), s);
    }
    let mut inputs: Vec<&Path> = vec![&mpath, &a.raw];
    if let Some(p) = &a.input {
        inputs.push(p);
    }
    let prov = provenance(
        "evaluate",
        json!({ "train": base, "repeats": a.repeats, "seeds": (0..a.repeats).map(|r| base.rng_seed.wrapping_add(r as u64)).collect::<Vec<_>>() }),
        &inputs,
    );
    let dir = ctx.out(&a.out);
    write_json(
        &dir.join("report.json"),
        &json!({
            "provenance": prov,
            "metrics": mean,
            "std": std,
            "runs": runs.iter().map(|(m, _)| m).collect::<Vec<_>>(),
        }),
    )?;
    for (name, r) in &runs[0].1 {
        write_text(
            &dir.join(format!("confusion_{name}.csv")),
            &r.confusion.to_csv(&r.classes.iter().map(|c| c.label.clone()).collect::<Vec<_>>()),
        )?;
    }
    for k in keys
        .iter()
        .filter(|k| k.ends_with("/accuracy") || k.ends_with("/macro_f1") || k.ends_with("sensitive_to_neutral"))
    {
        println!("{k}: {:.4} ± {:.4}", mean[k], std[k]);
    }
    println!("evaluate -> {}", dir.join("report.json").display());
    Ok(())
}

fn baseline(ctx: &Ctx, a: &BaselineArgs) -> Result<()> {
    let (manifest, mpath) = ctx.manifest(a.manifest.as_ref())?;
    let out = ctx.out(&a.out);
    match a.method {
        BaselineMethod::Resample | BaselineMethod::Ssa => {
            let windows = load_windows(&manifest, &a.input, manifest.window)?;
            let rate = manifest.schema.rate_hz;
            let l = a.embedding.unwrap_or_else(|| default_embedding(manifest.window));
            let transformed = windows
                .into_iter()
                .map(|w| {
                    let x = match a.method {
                        BaselineMethod::Resample => resample_roundtrip(&w.x, rate, a.to_hz)?,
                        _ => ssa_window(&w.x, l, a.components)?,
                    };
                    Ok(LabeledWindow { x, ..w })
                })
                .collect::<Result<Vec<_>>>()?;
            let config = match a.method {
                BaselineMethod::Resample => json!({ "method": "resample", "rate_hz": rate, "to_hz": a.to_hz }),
                _ => json!({ "method": "ssa", "embedding": l, "components": a.components }),
            };
            let prov = provenance("baseline", config, &[&mpath, &a.input]);
            let series = windows_to_series(&transformed, &manifest.model_channels(), rate);
            ensure_distinct(&out, &[&a.input, &mpath])?;
            write_series(&out, &series, &manifest.schema.labels, &prov)?;
            println!("baseline: {} windows -> {}", transformed.len(), out.display());
        }
        BaselineMethod::DtwRank => {
            let raw_path = a.raw.as_ref().ok_or_else(|| Error::Config("dtw-rank needs --raw".into()))?;
            let raw = load_windows(&manifest, raw_path, manifest.window)?;
            let trans = load_windows(&manifest, &a.input, manifest.window)?;
            let prep = prepare(&manifest, &raw)?;
            let st = &prep.standardizer;
            let trans_test = st.apply_all(&split(&trans, &manifest.split, manifest.seeds.split)?.test)?;
            let n = manifest.users.len();
            // the raw test split is the reference set when it covers every user
            let reference = if (0..n).all(|u| prep.splits.test.iter().any(|w| w.user == u)) {
                prep.splits.test.clone()
            } else {
                st.apply_all(&raw)?
            };
            let ranks = knn_ranks(&trans_test, &reference, n, a.votes)?;
            let values: Vec<f64> = ranks.iter().map(|&(_, r)| r as f64).collect();
            let (mean, std) = mean_std(&values);
            let mut metrics = BTreeMap::from([("dtw_rank/mean".to_string(), mean), ("dtw_rank/std".to_string(), std)]);
            for &(u, r) in &ranks {
                metrics.insert(format!("dtw_rank/{}", manifest.users[u]), r as f64);
            }
            let prov = provenance("baseline", json!({ "method": "dtw-rank", "votes": a.votes }), &[&mpath, raw_path, &a.input]);
            write_json(&out, &json!({ "provenance": prov, "metrics": metrics, "users": n }))?;
            println!(
                "dtw-rank: mean {mean:.2} ± {std:.2} over {} users (chance {:.1}) -> {}",
                ranks.len(),
                (n as f64 - 1.0) / 2.0,
                out.display()
            );
        }
    }
    Ok(())
}

fn report(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    let mut columns: Vec<String> = Vec::new();
    let mut tables: Vec<(BTreeMap<String, f64>, BTreeMap<String, f64>)> = Vec::new();
    for p in &a.inputs {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let v: Value = serde_json::from_str(&text)?;
        let metrics: BTreeMap<String, f64> = v
            .get("metrics")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .ok_or_else(|| Error::Schema(format!("{} has no metrics table", file_name(p))))?;
        let std: BTreeMap<String, f64> = v.get("std").cloned().map(serde_json::from_value).transpose()?.unwrap_or_default();
        let stem = p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let parent = p.parent().and_then(Path::file_name).map(|s| s.to_string_lossy().into_owned());
        // evaluate reports all share a file name; their directory tells them apart
        let mut name = match parent {
            Some(dir) if stem == "report" => dir,
            _ => stem,
        };
        if columns.contains(&name) {
            name = format!("{name}#{}", columns.len() + 1);
        }
        columns.push(name);
        tables.push((metrics, std));
    }
    let keys: std::collections::BTreeSet<&String> = tables.iter().flat_map(|(m, _)| m.keys()).collect();
    let out = ctx.out(&a.out);
    let ext = out.extension().and_then(|e| e.to_str()).unwrap_or("");
    let text = match ext {
        "csv" => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(std::iter::once("metric").chain(columns.iter().map(String::as_str)))?;
            for k in &keys {
                let row: Vec<String> = tables.iter().map(|(m, _)| m.get(*k).map_or_else(String::new, |v| format!("{v}"))).collect();
                w.write_record(std::iter::once(k.as_str()).chain(row.iter().map(String::as_str)))?;
            }
            String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?).expect("csv is utf-8")
        }
        "md" => {
            let mut s = format!("| metric | {} |\n|---|{}\n", columns.join(" | "), "---|".repeat(columns.len()));
            for k in &keys {
                let cells: Vec<String> = tables
                    .iter()
                    .map(|(m, sd)| match (m.get(*k), sd.get(*k)) {
                        (Some(v), Some(e)) if *e > 0.0 => format!("{v:.4} ± {e:.4}"),
                        (Some(v), _) => format!("{v:.4}"),
                        _ => String::new(),
                    })
                    .collect();
                s.push_str(&format!("| {k} | {} |\n", cells.join(" | ")));
            }
            s
        }
        "json" => {
            let table: BTreeMap<&String, BTreeMap<&String, f64>> = keys
                .iter()
                .map(|k| (*k, columns.iter().zip(&tables).filter_map(|(c, (m, _))| m.get(*k).map(|v| (c, *v))).collect()))
                .collect();
            let mut s = serde_json::to_string_pretty(&table)?;
            s.push('\n');
            s
        }
        other => return Err(Error::Config(format!("report output must end in .md, .csv or .json, not `{other}`"))),
    };
    write_text(&out, &text)?;
    println!("report: {} metrics x {} reports -> {}", keys.len(), columns.len(), out.display());
    Ok(())
}

fn gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> Result<()> {
    if a.configs == 0 {
        return Err(Error::Config("--configs must be positive".into()));
    }
    let r = random_suite(a.configs, a.seed, a.tolerance)?;
    println!(
        "gradcheck: {} configurations, {} failed, max relative error {:.3e} (tolerance {:.0e}; worst {})",
        r.configs, r.failures, r.max_rel_error, a.tolerance, r.worst
    );
    if let Some(p) = &a.out {
        let prov = provenance("gradcheck", json!({ "configs": a.configs, "seed": a.seed, "tolerance": a.tolerance }), &[]);
        write_json(
            &ctx.out(p),
            &json!({ "provenance": prov, "report": r, "metrics": { "gradcheck/max_rel_error": r.max_rel_error, "gradcheck/failures": r.failures } }),
        )?;
    }
    if r.passed() {
        Ok(())
    } else {
        Err(Error::Check(format!(
            "{} of {} configurations exceed tolerance {}",
            r.failures, r.configs, a.tolerance
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
