//! Comparison transforms and the DTW re-identification attack: FFT
//! resampling, singular spectrum analysis, dynamic time warping and the
//! k-NN similarity rank.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledWindow;
use crate::error::{Error, Result};

/// Off-diagonal tolerance of the Jacobi sweeps.
pub const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Resamples a real series from `from_hz` to `to_hz` in the frequency domain.
///
/// The spectrum is truncated or zero-padded symmetrically; an even-length
/// Nyquist bin is folded on truncation and split on padding, so a real input
/// stays real. Output amplitude is rescaled by `T'/T`, which keeps the mean.
pub fn fft_resample(series: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>> {
    let n = series.len();
    if n < 2 {
        return Err(Error::Parameter(format!("resampling needs at least 2 samples, got {n}")));
    }
    if !(from_hz > 0.0 && from_hz.is_finite() && to_hz > 0.0 && to_hz.is_finite()) {
        return Err(Error::Parameter(format!("rates must be positive, got {from_hz} -> {to_hz}")));
    }
    let m = (n as f64 * to_hz / from_hz).round() as usize;
    if m < 2 {
        return Err(Error::Degenerate(format!("resampling {n} samples to {to_hz} Hz leaves {m}")));
    }
    fft_resample_to_len(series, m)
}

/// Resamples a real series to exactly `m` samples; see [`fft_resample`].
pub fn fft_resample_to_len(series: &[f64], m: usize) -> Result<Vec<f64>> {
    let n = series.len();
    if n < 2 {
        return Err(Error::Parameter(format!("resampling needs at least 2 samples, got {n}")));
    }
    if m < 2 {
        return Err(Error::Degenerate(format!("cannot resample to {m} samples")));
    }
    if m == n {
        return Ok(series.to_vec());
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut spec: Vec<Complex<f64>> = series.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut spec);

    let mut out = vec![Complex::new(0.0, 0.0); m];
    let k = n.min(m);
    // Bins strictly below the shared Nyquist, both signs.
    let half = if k.is_multiple_of(2) { k / 2 } else { k / 2 + 1 };
    out[0] = spec[0];
    for f in 1..half {
        out[f] = spec[f];
        out[m - f] = spec[n - f];
    }
    if k.is_multiple_of(2) {
        let f = k / 2;
        if m < n {
            out[f] = spec[f] + spec[n - f];
        } else {
            out[f] = spec[f] * 0.5;
            out[m - f] = spec[f] * 0.5;
        }
    }
    planner.plan_fft_inverse(m).process(&mut out);
    // Unnormalized inverse divided by M, then scaled by M/N.
    Ok(out.iter().map(|c| c.re / n as f64).collect())
}

/// Resamples every channel of an `[M x W]` window.
pub fn resample_window(x: &Array2<f64>, from_hz: f64, to_hz: f64) -> Result<Array2<f64>> {
    let rows = x
        .rows()
        .into_iter()
        .map(|r| fft_resample(&r.to_vec(), from_hz, to_hz))
        .collect::<Result<Vec<_>>>()?;
    let width = rows.first().map_or(0, Vec::len);
    Ok(Array2::from_shape_vec((rows.len(), width), rows.concat()).expect("equal row lengths"))
}

/// Resamples a window down to `to_hz` and back to its original width, which
/// removes content above the lower Nyquist frequency.
pub fn resample_roundtrip(x: &Array2<f64>, rate_hz: f64, to_hz: f64) -> Result<Array2<f64>> {
    let down = resample_window(x, rate_hz, to_hz)?;
    let mut out = Array2::zeros(x.dim());
    for (row, mut dst) in down.rows().into_iter().zip(out.rows_mut()) {
        dst.assign(&Array1::from(fft_resample_to_len(&row.to_vec(), x.ncols())?));
    }
    Ok(out)
}

/// Elementary SSA series in descending order of singular value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsaDecomposition {
    pub components: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub embedding_dim: usize,
}

impl SsaDecomposition {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

/// Default embedding dimension for a series of length `t`.
pub fn default_embedding(t: usize) -> usize {
    (t / 4).max(2)
}

/// Decomposes `series` into `L` elementary series.
///
/// The `L x K` trajectory matrix `H` is factorized by one-sided Jacobi
/// rotations on the columns of `Hᵀ`; each rank-one term is Hankel-averaged
/// back to a series. The components sum to the input up to rounding.
pub fn ssa_decompose(series: &[f64], l: usize) -> Result<SsaDecomposition> {
    let t = series.len();
    if l < 2 || 2 * l > t {
        return Err(Error::Parameter(format!("embedding dimension {l} outside [2, {}]", t / 2)));
    }
    let k = t - l + 1;
    // a = Hᵀ, shape K x L: a[j][i] = series[i + j].
    let mut a = Array2::from_shape_fn((k, l), |(j, i)| series[i + j]);
    let mut v = Array2::<f64>::eye(l);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..l {
            for q in p + 1..l {
                let (cp, cq) = (a.column(p), a.column(q));
                let alpha = cp.dot(&cp);
                let beta = cq.dot(&cq);
                let gamma = cp.dot(&cq);
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let tan = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let tan = if zeta == 0.0 { 1.0 } else { tan };
                let cos = 1.0 / (1.0 + tan * tan).sqrt();
                let sin = cos * tan;
                rotate_columns(&mut a, p, q, cos, sin);
                rotate_columns(&mut v, p, q, cos, sin);
            }
        }
        if !rotated {
            break;
        }
    }
    // Column i of a is sigma_i * u_i; the elementary matrix is v_i (a_i)ᵀ.
    let norms: Vec<f64> = a.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let components = order
        .iter()
        .map(|&i| hankel_average(v.column(i).to_owned(), a.column(i).to_owned(), t))
        .collect();
    Ok(SsaDecomposition {
        components,
        singular_values: order.iter().map(|&i| norms[i]).collect(),
        embedding_dim: l,
    })
}

fn rotate_columns(m: &mut Array2<f64>, p: usize, q: usize, cos: f64, sin: f64) {
    for mut row in m.rows_mut() {
        let (x, y) = (row[p], row[q]);
        row[p] = cos * x - sin * y;
        row[q] = sin * x + cos * y;
    }
}

/// Averages the anti-diagonals of the rank-one matrix `left rightᵀ`.
fn hankel_average(left: Array1<f64>, right: Array1<f64>, t: usize) -> Vec<f64> {
    let mut sum = vec![0.0; t];
    let mut count = vec![0usize; t];
    for (i, &li) in left.iter().enumerate() {
        for (j, &rj) in right.iter().enumerate() {
            sum[i + j] += li * rj;
            count[i + j] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect()
}

/// Sum of the first `k` components.
pub fn ssa_reconstruct(dec: &SsaDecomposition, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > dec.len() {
        return Err(Error::Parameter(format!("component count {k} outside [1, {}]", dec.len())));
    }
    let mut out = vec![0.0; dec.components[0].len()];
    for c in &dec.components[..k] {
        for (o, v) in out.iter_mut().zip(c) {
            *o += v;
        }
    }
    Ok(out)
}

/// Keeps the first `k` SSA components of every channel of a window.
pub fn ssa_window(x: &Array2<f64>, l: usize, k: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(x.dim());
    for (row, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
        let rec = ssa_reconstruct(&ssa_decompose(&row.to_vec(), l)?, k)?;
        dst.assign(&Array1::from(rec));
    }
    Ok(out)
}

/// Classic full-window DTW with squared-difference local cost.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Parameter("DTW of an empty series".into()));
    }
    let mut prev = vec![f64::INFINITY; b.len() + 1];
    let mut cur = vec![f64::INFINITY; b.len() + 1];
    prev[0] = 0.0;
    for &x in a {
        cur[0] = f64::INFINITY;
        for (j, &y) in b.iter().enumerate() {
            let d = x - y;
            cur[j + 1] = d * d + prev[j].min(prev[j + 1]).min(cur[j]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[b.len()])
}

/// Sum of per-channel DTW distances between two `[M x W]` windows.
pub fn window_dtw(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!("channel counts differ: {} vs {}", a.nrows(), b.nrows())));
    }
    let mut total = 0.0;
    for (ra, rb) in a.axis_iter(Axis(0)).zip(b.axis_iter(Axis(0))) {
        let (ra, rb) = (ra.to_vec(), rb.to_vec());
        total += dtw_distance(&ra, &rb)?;
    }
    Ok(total)
}

/// Position of `target` among `n_users` when users are ordered by DTW
/// similarity to the target's transformed windows (0 = most similar).
///
/// For every transformed window the distances to one user's raw windows are
/// reduced to the mean of the `votes` smallest; these scores are averaged over
/// the transformed windows. Users tied with the target do not push it down.
pub fn knn_rank(target: usize, transformed: &[Array2<f64>], raw: &[LabeledWindow], n_users: usize, votes: usize) -> Result<usize> {
    if target >= n_users {
        return Err(Error::Parameter(format!("target user {target} outside {n_users} users")));
    }
    if transformed.is_empty() {
        return Err(Error::Parameter("no transformed windows for the target".into()));
    }
    if votes == 0 {
        return Err(Error::Parameter("votes must be positive".into()));
    }
    let mut by_user: Vec<Vec<ArrayView2<f64>>> = vec![Vec::new(); n_users];
    for w in raw {
        if w.user >= n_users {
            return Err(Error::Parameter(format!("raw window of user {} outside {n_users} users", w.user)));
        }
        by_user[w.user].push(w.x.view());
    }
    if let Some(u) = by_user.iter().position(Vec::is_empty) {
        return Err(Error::Parameter(format!("user {u} has no raw windows")));
    }
    let mut scores = vec![0.0; n_users];
    for q in transformed {
        for (u, refs) in by_user.iter().enumerate() {
            let mut d = refs.iter().map(|r| window_dtw(q.view(), *r)).collect::<Result<Vec<_>>>()?;
            d.sort_by(f64::total_cmp);
            let take = votes.min(d.len());
            scores[u] += d[..take].iter().sum::<f64>() / take as f64;
        }
    }
    let own = scores[target];
    Ok(scores.iter().filter(|&&s| s < own).count())
}

/// Ranks every user that has transformed windows, in parallel across users.
///
/// Returns `(user, rank)` pairs in user order.
pub fn knn_ranks(transformed: &[LabeledWindow], raw: &[LabeledWindow], n_users: usize, votes: usize) -> Result<Vec<(usize, usize)>> {
    let mut per_user: Vec<Vec<Array2<f64>>> = vec![Vec::new(); n_users];
    for w in transformed {
        if w.user >= n_users {
            return Err(Error::Parameter(format!("transformed window of user {} outside {n_users} users", w.user)));
        }
        per_user[w.user].push(w.x.clone());
    }
    let targets: Vec<usize> = (0..n_users).filter(|&u| !per_user[u].is_empty()).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = targets
            .iter()
            .map(|&u| {
                (
                    u,
                    s.spawn({
                        let mine = &per_user[u];
                        move || knn_rank(u, mine, raw, n_users, votes)
                    }),
                )
            })
            .collect();
        handles.into_iter().map(|(u, h)| Ok((u, h.join().expect("rank worker panicked")?))).collect()
    })
}
