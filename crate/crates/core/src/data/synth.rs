//! Regime-switching multimodal benchmark with noisy text-like embeddings.
//!
//! A semi-Markov chain over `R` regimes drives a per-regime VAR(1) process.
//! Each regime has its own long-run level, so a switch moves every channel
//! towards a new mean. The key-driver stream reveals the current regime and
//! the outlook stream (in oracle mode) the dominant regime of the coming
//! horizon, both through a fixed orthonormal map plus Gaussian noise.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::calendar::business_days;
use super::embeddings::{ChannelDescriptions, EmbeddingSeries};
use super::frame::TimeSeriesFrame;
use crate::error::{Error, Result};
use crate::routing::EmbeddingSource;

pub const TARGET_SPECTRAL_RADIUS: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakMode {
    Oracle,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub channels: usize,
    /// The first `targets` channels are the forecasting targets.
    pub targets: usize,
    pub length: usize,
    pub regimes: usize,
    pub mean_dwell: f64,
    pub var_noise: f64,
    pub embedding_dim: usize,
    pub embedding_noise: f64,
    pub outlook_leak: LeakMode,
    /// When false the key-driver stream is noise as well.
    pub key_driver_signal: bool,
    /// Horizon over which the outlook's majority regime is taken.
    pub horizon: usize,
    /// Standard deviation of the per-regime long-run levels.
    pub level_scale: f64,
    pub start_date: NaiveDate,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            channels: 8,
            targets: 2,
            length: 1200,
            regimes: 4,
            mean_dwell: 40.0,
            var_noise: 0.1,
            embedding_dim: 64,
            embedding_noise: 0.05,
            outlook_leak: LeakMode::Oracle,
            key_driver_signal: true,
            horizon: 20,
            level_scale: 1.0,
            start_date: NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date"),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.regimes < 2 {
            return fail(format!("regimes must be at least 2, got {}", self.regimes));
        }
        if self.regimes > self.embedding_dim {
            return fail(format!(
                "regimes ({}) must not exceed embedding_dim ({}): the regime map needs orthonormal columns",
                self.regimes, self.embedding_dim
            ));
        }
        if self.channels == 0 || self.targets == 0 || self.targets > self.channels {
            return fail(format!(
                "need 1 <= targets ({}) <= channels ({})",
                self.targets, self.channels
            ));
        }
        if self.length < 2 || self.horizon == 0 {
            return fail("length must be at least 2 and horizon positive".into());
        }
        if !(self.mean_dwell >= 1.0 && self.mean_dwell.is_finite()) {
            return fail(format!("mean_dwell must be >= 1, got {}", self.mean_dwell));
        }
        for (name, v) in [
            ("var_noise", self.var_noise),
            ("embedding_noise", self.embedding_noise),
            ("level_scale", self.level_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn channel_names(&self) -> Vec<String> {
        (0..self.channels)
            .map(|c| {
                if c < self.targets {
                    format!("target_{c}")
                } else {
                    format!("aux_{}", c - self.targets)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub frame: TimeSeriesFrame,
    pub key_driver: EmbeddingSeries,
    pub outlook: EmbeddingSeries,
    pub descriptions: ChannelDescriptions,
    /// Regime index per time step.
    pub regimes: Vec<usize>,
    /// Per-regime VAR(1) transition matrices.
    pub transitions: Vec<DMatrix<f64>>,
    /// Per-regime long-run levels.
    pub levels: Vec<DVector<f64>>,
}

impl SyntheticData {
    pub fn target_indices(&self, spec: &SyntheticSpec) -> Vec<usize> {
        (0..spec.targets).collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Regime whose occupancy over `(t, t+h]` is largest (ties to the lowest
/// index). At the final step the current regime is returned.
pub fn future_majority(regimes: &[usize], num_regimes: usize, t: usize, h: usize) -> usize {
    let end = (t + h).min(regimes.len() - 1);
    if end <= t {
        return regimes[t];
    }
    let mut counts = vec![0usize; num_regimes];
    for &r in &regimes[t + 1..=end] {
        counts[r] += 1;
    }
    let best = *counts.iter().max().expect("regimes >= 2");
    counts.iter().position(|&c| c == best).expect("max exists")
}

fn orthonormal_map<R: Rng>(d: usize, r: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, r, |_, _| gaussian(rng));
    g.qr().q()
}

fn noisy_embedding<R: Rng>(base: Option<Vec<f64>>, d: usize, noise: f64, rng: &mut R) -> Vec<f64> {
    match base {
        Some(b) => b.into_iter().map(|x| x + noise * gaussian(rng)).collect(),
        // Pure noise with the same per-coordinate second moment as a unit
        // column plus noise.
        None => {
            let std = (1.0 / d as f64 + noise * noise).sqrt();
            (0..d).map(|_| std * gaussian(rng)).collect()
        }
    }
}

/// Generates the benchmark. Each ingredient draws from its own RNG stream, so
/// for instance the series does not depend on the leak mode.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (c, n, r, d) = (spec.channels, spec.length, spec.regimes, spec.embedding_dim);

    let mut rng = stream(spec.seed, 0);
    let switch_p = 1.0 / spec.mean_dwell;
    let mut regimes = Vec::with_capacity(n);
    let mut state = rng.random_range(0..r);
    for t in 0..n {
        if t > 0 && rng.random::<f64>() < switch_p {
            let step = rng.random_range(1..r);
            state = (state + step) % r;
        }
        regimes.push(state);
    }

    let mut rng = stream(spec.seed, 1);
    let mut transitions = Vec::with_capacity(r);
    let mut levels = Vec::with_capacity(r);
    for _ in 0..r {
        let a = DMatrix::from_fn(c, c, |_, _| gaussian(&mut rng));
        let rho = spectral_radius(&a);
        transitions.push(a * (TARGET_SPECTRAL_RADIUS / rho));
        levels.push(DVector::from_fn(c, |_, _| spec.level_scale * gaussian(&mut rng)));
    }
    let drifts: Vec<DVector<f64>> = transitions
        .iter()
        .zip(&levels)
        .map(|(a, m)| m - a * m)
        .collect();

    let mut rng = stream(spec.seed, 2);
    let mut values = vec![Vec::with_capacity(n); c];
    let mut x = levels[regimes[0]].clone();
    for (t, &s) in regimes.iter().enumerate() {
        if t > 0 {
            let noise = DVector::from_fn(c, |_, _| spec.var_noise * gaussian(&mut rng));
            x = &drifts[s] + &transitions[s] * &x + noise;
        }
        for (ch, v) in values.iter_mut().enumerate() {
            v.push(x[ch]);
        }
    }
    let dates = business_days(spec.start_date, n);
    let frame = TimeSeriesFrame::from_complete(dates.clone(), spec.channel_names(), values)?;

    let mut rng = stream(spec.seed, 3);
    let kd_map = orthonormal_map(d, r, &mut rng);
    let mut key_driver = EmbeddingSeries::new(EmbeddingSource::KeyDriver, d);
    for (t, date) in dates.iter().enumerate() {
        let base = spec
            .key_driver_signal
            .then(|| kd_map.column(regimes[t]).iter().copied().collect());
        key_driver.insert(*date, noisy_embedding(base, d, spec.embedding_noise, &mut rng))?;
    }

    let mut rng = stream(spec.seed, 4);
    let ol_map = orthonormal_map(d, r, &mut rng);
    let mut outlook = EmbeddingSeries::new(EmbeddingSource::Outlook, d);
    for (t, date) in dates.iter().enumerate() {
        let base = (spec.outlook_leak == LeakMode::Oracle).then(|| {
            let m = future_majority(&regimes, r, t, spec.horizon);
            ol_map.column(m).iter().copied().collect()
        });
        outlook.insert(*date, noisy_embedding(base, d, spec.embedding_noise, &mut rng))?;
    }

    let mut rng = stream(spec.seed, 5);
    let mut descriptions = ChannelDescriptions::new(d);
    for name in spec.channel_names() {
        let v: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        descriptions.insert(name, v.into_iter().map(|x| x / norm).collect())?;
    }

    Ok(SyntheticData {
        frame,
        key_driver,
        outlook,
        descriptions,
        regimes,
        transitions,
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SyntheticSpec {
            length: 200,
            ..Default::default()
        };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a.frame, b.frame);
        assert_eq!(a.key_driver, b.key_driver);
        assert_eq!(a.outlook, b.outlook);
        assert_eq!(a.descriptions, b.descriptions);
        let c = synth_generate(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.frame, c.frame);
    }

    #[test]
    fn spectral_radius_is_rescaled() {
        let data = synth_generate(&SyntheticSpec::default()).unwrap();
        for a in &data.transitions {
            let rho = spectral_radius(a);
            assert!((0.899..=0.901).contains(&rho), "rho = {rho}");
        }
    }

    #[test]
    fn series_is_independent_of_leak_mode() {
        let spec = SyntheticSpec {
            length: 300,
            ..Default::default()
        };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&SyntheticSpec {
            outlook_leak: LeakMode::None,
            ..spec
        })
        .unwrap();
        assert_eq!(a.frame, b.frame);
        assert_eq!(a.key_driver, b.key_driver);
        assert_ne!(a.outlook, b.outlook);
    }

    #[test]
    fn too_many_regimes_is_a_config_error() {
        let spec = SyntheticSpec {
            regimes: 5,
            embedding_dim: 4,
            ..Default::default()
        };
        let err = synth_generate(&spec).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("embedding_dim")));
        assert!(synth_generate(&SyntheticSpec { regimes: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn dwell_time_matches_configuration() {
        let spec = SyntheticSpec {
            length: 20_000,
            ..Default::default()
        };
        let data = synth_generate(&spec).unwrap();
        let switches = data.regimes.windows(2).filter(|w| w[0] != w[1]).count();
        let mean_dwell = spec.length as f64 / (switches + 1) as f64;
        assert!((mean_dwell - 40.0).abs() < 6.0, "mean dwell {mean_dwell}");
    }

    #[test]
    fn future_majority_counts_the_open_closed_window() {
        let path = [0, 1, 1, 2, 2, 2];
        assert_eq!(future_majority(&path, 3, 0, 2), 1);
        assert_eq!(future_majority(&path, 3, 0, 5), 2);
        assert_eq!(future_majority(&path, 3, 1, 2), 1);
        assert_eq!(future_majority(&path, 3, 5, 3), 2);
    }
}
