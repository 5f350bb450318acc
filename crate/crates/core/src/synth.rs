//! Closed-form synthetic series used for desk-scale experiments.
//!
//! Variate `d` at hourly step `t` is
//!
//! ```text
//! x_d(t) = c_d + a_d·sin(2πt/24 + φ_d) + b_d·sin(2πt/168 + ψ_d) + w_d(t) + σ·ε_{t,d}
//! ```
//!
//! with per-variate constants drawn in the order `c_d ~ U[-1,1]`,
//! `a_d ~ U[0.5,1.5]`, `φ_d ~ U[0,2π)`, `b_d ~ U[0.2,1]`, `ψ_d ~ U[0,2π)`
//! (variate-major), followed by row-major noise. `w_d` is a random walk
//! with `N(0, drift²)` increments (absent when `drift = 0`); at each entry
//! the walk increment is drawn before the noise term. All draws use
//! [`Rng::seed_from`]`(seed)`.

use std::f64::consts::TAU;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::dataset::{parse_timestamp, SeriesDataset};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub rows: usize,
    pub width: usize,
    pub seed: u64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Standard deviation of the per-step level random walk.
    pub drift: f64,
    pub start: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rows: 2000,
            width: 7,
            seed: 1,
            noise: 0.1,
            drift: 0.0,
            start: "2016-07-01 00:00:00".into(),
        }
    }
}

/// Per-variate constants of the mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub offset: f64,
    pub daily_amp: f64,
    pub daily_phase: f64,
    pub weekly_amp: f64,
    pub weekly_phase: f64,
}

impl Component {
    /// Noise- and drift-free value at step `t`.
    pub fn clean(&self, t: usize) -> f64 {
        let t = t as f64;
        self.offset
            + self.daily_amp * (TAU * t / 24.0 + self.daily_phase).sin()
            + self.weekly_amp * (TAU * t / 168.0 + self.weekly_phase).sin()
    }
}

pub fn components(cfg: &SynthConfig) -> (Vec<Component>, Rng) {
    let mut rng = Rng::seed_from(cfg.seed);
    let comps = (0..cfg.width)
        .map(|_| Component {
            offset: rng.range(-1.0, 1.0),
            daily_amp: rng.range(0.5, 1.5),
            daily_phase: rng.range(0.0, TAU),
            weekly_amp: rng.range(0.2, 1.0),
            weekly_phase: rng.range(0.0, TAU),
        })
        .collect();
    (comps, rng)
}

pub fn generate(cfg: &SynthConfig) -> Result<SeriesDataset> {
    if cfg.rows == 0 || cfg.width == 0 {
        return Err(Error::Usage(
            "synthetic series needs rows >= 1 and width >= 1".into(),
        ));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) || !(cfg.drift >= 0.0 && cfg.drift.is_finite())
    {
        return Err(Error::Usage(
            "noise and drift must be finite and >= 0".into(),
        ));
    }
    let start: NaiveDateTime = parse_timestamp(&cfg.start)
        .ok_or_else(|| Error::Usage(format!("bad start timestamp '{}'", cfg.start)))?;
    let (comps, mut rng) = components(cfg);
    let mut level = vec![0.0; cfg.width];
    let mut values = Vec::with_capacity(cfg.rows * cfg.width);
    for t in 0..cfg.rows {
        for (d, c) in comps.iter().enumerate() {
            if cfg.drift > 0.0 {
                level[d] += cfg.drift * rng.normal();
            }
            let eps = if cfg.noise > 0.0 {
                cfg.noise * rng.normal()
            } else {
                0.0
            };
            values.push(c.clean(t) + level[d] + eps);
        }
    }
    let timestamps = (0..cfg.rows)
        .map(|t| start + chrono::Duration::hours(t as i64))
        .collect();
    let names = (0..cfg.width).map(|d| format!("x{d}")).collect();
    let observed = vec![true; values.len()];
    SeriesDataset::new("date", names, timestamps, values, observed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_is_closed_form() {
        let cfg = SynthConfig {
            rows: 300,
            width: 3,
            noise: 0.0,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let (comps, _) = components(&cfg);
        for t in 0..cfg.rows {
            for (d, c) in comps.iter().enumerate() {
                assert_eq!(ds.value(t, d), c.clean(t));
            }
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn default_shape() {
        let ds = generate(&SynthConfig::default()).unwrap();
        assert_eq!(ds.len(), 2000);
        assert_eq!(ds.width(), 7);
    }

    #[test]
    fn rejects_bad_flags() {
        let cfg = SynthConfig {
            noise: -1.0,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Usage(_))));
    }
}
