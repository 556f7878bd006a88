//! Friedman #1 style synthetic regression data.
//!
//! `y = sin(pi * x1 * x2) + 2 * (x3 - 0.5)^2 + x4 + 0.5 * x5 + eps`, with every
//! coordinate drawn i.i.d. from `U(0, 1)` and `eps ~ N(0, noise_sigma^2)`.
//! Coordinates past the fifth carry no signal.

use serde::{Deserialize, Serialize};

use crate::rng::derive_stream;
use crate::{Dataset, Error, Result};

const SYNTH_STREAM: u64 = 0x4652_4945_444D_414E;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Friedman1Spec {
    pub n_samples: usize,
    pub n_features: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for Friedman1Spec {
    fn default() -> Self {
        Self {
            n_samples: 500,
            n_features: 50,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl Friedman1Spec {
    pub fn validate(&self) -> Result<()> {
        if self.n_features < 5 {
            return Err(Error::config(format!(
                "friedman1 needs at least 5 features, got {}",
                self.n_features
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::config("friedman1 needs at least one sample"));
        }
        Ok(())
    }
}

/// Signal part of the target; ignores every coordinate past the fifth.
pub fn noise_free_target(x: &[f64]) -> Result<f64> {
    if x.len() < 5 {
        return Err(Error::usage(format!(
            "friedman1 signal needs 5 coordinates, got {}",
            x.len()
        )));
    }
    Ok(signal(x))
}

#[inline]
fn signal(x: &[f64]) -> f64 {
    (std::f64::consts::PI * x[0] * x[1]).sin()
        + 2.0 * (x[2] - 0.5) * (x[2] - 0.5)
        + x[3]
        + 0.5 * x[4]
}

/// Generate the dataset. Row `i` consumes `n_features` uniforms followed by
/// two uniforms for the Box-Muller noise draw, so its position in the stream
/// is fixed regardless of `noise_sigma`.
pub fn generate_friedman1(spec: &Friedman1Spec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = derive_stream(spec.seed, SYNTH_STREAM);
    let p = spec.n_features;
    let mut features = Vec::with_capacity(spec.n_samples * p);
    let mut targets = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let start = features.len();
        for _ in 0..p {
            features.push(rng.next_f64());
        }
        let eps = rng.next_normal();
        targets.push(signal(&features[start..]) + spec.noise_sigma * eps);
    }
    Dataset::new(features, p, targets)
}

/// Noise-free targets for every row of a Friedman dataset.
pub fn noise_free_targets(ds: &Dataset) -> Result<Vec<f64>> {
    ds.rows().map(noise_free_target).collect()
}
