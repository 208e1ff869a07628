use std::f64::consts::TAU;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::window::{LabeledWindow, Vocab};
use crate::error::{Error, Result};

/// Knobs for the synthetic multi-user activity generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_activities: usize,
    pub windows_per_pair: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    /// Standard deviation of the additive noise; also scales per-window phase jitter.
    pub noise_std: f64,
    pub n_trials: usize,
    pub rate_hz: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 6,
            n_activities: 4,
            windows_per_pair: 25,
            width: 64,
            channels: 3,
            seed: 0,
            noise_std: 0.25,
            n_trials: 3,
            rate_hz: 50.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_activities == 0 || self.windows_per_pair == 0 || self.width == 0 || self.channels == 0 || self.n_trials == 0 {
            return Err(Error::Parameter("synthetic counts must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) || self.rate_hz <= 0.0 || !self.rate_hz.is_finite() {
            return Err(Error::Parameter("noise must be non-negative and rate positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub vocab: Vocab,
    pub windows: Vec<LabeledWindow>,
    /// Binary attribute per user index; it drives the user's amplitude scale.
    pub attributes: Vec<usize>,
}

impl SyntheticData {
    pub const ATTRIBUTE_LABELS: [&'static str; 2] = ["group0", "group1"];
}

struct ActivityShape {
    freq: f64,
    harmonic: f64,
    amp: Vec<f64>,
    level: Vec<f64>,
    phase: Vec<f64>,
}

struct UserSignature {
    scale: f64,
    phase: f64,
    bias: Vec<f64>,
    slope: Vec<f64>,
}

/// Convenience wrapper with default noise, trial count and rate.
pub fn generate_synthetic(n_users: usize, n_activities: usize, windows_per_pair: usize, width: usize, channels: usize, seed: u64) -> Result<SyntheticData> {
    generate(&SyntheticConfig {
        n_users,
        n_activities,
        windows_per_pair,
        width,
        channels,
        seed,
        ..SyntheticConfig::default()
    })
}

/// Generates `n_users * n_activities * windows_per_pair` windows.
///
/// Activities differ in base frequency, harmonic content, per-channel
/// amplitude and level. Users carry a persistent amplitude scale (set by a
/// binary attribute), phase offset and a per-channel bias with a slow ramp.
/// Windows of one (user, activity) pair are dealt round-robin to trials.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.channels;
    let activities: Vec<ActivityShape> = (0..cfg.n_activities)
        .map(|a| ActivityShape {
            freq: (1.5 + 1.25 * a as f64) / 64.0,
            harmonic: 0.25 + 0.2 * (a % 3) as f64,
            amp: (0..m).map(|c| 0.7 + 0.3 * ((a + c) % 3) as f64 + rng.random_range(-0.05..0.05)).collect(),
            level: (0..m).map(|c| 0.4 * ((a * 7 + c * 3) % 5) as f64 / 4.0 - 0.2).collect(),
            phase: (0..m).map(|_| rng.random_range(0.0..TAU)).collect(),
        })
        .collect();
    let bias_dist = Normal::new(0.0, 0.35).expect("valid normal");
    let users: Vec<UserSignature> = (0..cfg.n_users)
        .map(|u| UserSignature {
            scale: if u % 2 == 0 { 0.85 } else { 1.2 } * (1.0 + rng.random_range(-0.07..0.07)),
            phase: rng.random_range(-0.4..0.4),
            bias: (0..m).map(|_| bias_dist.sample(&mut rng)).collect(),
            slope: (0..m).map(|_| rng.random_range(-0.3..0.3)).collect(),
        })
        .collect();
    let vocab = Vocab {
        activities: (1..=cfg.n_activities).map(|a| format!("act{a}")).collect(),
        users: (1..=cfg.n_users).map(|u| format!("u{u}")).collect(),
    };
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let w = cfg.width;
    let mut windows = Vec::with_capacity(cfg.n_users * cfg.n_activities * cfg.windows_per_pair);
    for (u, user) in users.iter().enumerate() {
        for (a, act) in activities.iter().enumerate() {
            for k in 0..cfg.windows_per_pair {
                let jitter = cfg.noise_std * noise.sample(&mut rng);
                let mut x = Array2::zeros((m, w));
                for c in 0..m {
                    let phi = user.phase + act.phase[c] + jitter;
                    for t in 0..w {
                        let arg = TAU * act.freq * t as f64 + phi;
                        let wave = arg.sin() + act.harmonic * (2.0 * arg).sin();
                        let ramp = user.slope[c] * (t as f64 / w as f64 - 0.5);
                        x[[c, t]] = user.scale * act.amp[c] * wave + act.level[c] + user.bias[c] + ramp + cfg.noise_std * noise.sample(&mut rng);
                    }
                }
                windows.push(LabeledWindow {
                    x,
                    activity: a,
                    n_activities: cfg.n_activities,
                    user: u,
                    n_users: cfg.n_users,
                    user_id: vocab.users[u].clone(),
                    trial_id: format!("t{}", k % cfg.n_trials + 1),
                });
            }
        }
    }
    Ok(SyntheticData {
        vocab,
        windows,
        attributes: (0..cfg.n_users).map(|u| u % 2).collect(),
    })
}
