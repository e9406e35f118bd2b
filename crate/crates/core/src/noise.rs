//! Seeded zero-mean Laplace noise.
//!
//! Samples are produced by inverse-CDF transform of uniform draws taken from
//! a ChaCha8 stream, so `(seed, stream_id, draw index)` pins every value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceParams {
    scale: f64,
}

impl LaplaceParams {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Domain(format!(
                "Laplace scale must be positive, got {scale}"
            )));
        }
        Ok(Self { scale })
    }

    /// Scale `sensitivity / epsilon`.
    pub fn from_sensitivity(sensitivity: f64, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::Domain(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Self::new(sensitivity / epsilon)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// Quantile of the zero-mean Laplace distribution with the given scale.
pub fn laplace_inverse_cdf(u: f64, scale: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!(
            "quantile level must lie in (0, 1), got {u}"
        )));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Domain(format!(
            "Laplace scale must be positive, got {scale}"
        )));
    }
    let centered = u - 0.5;
    if centered == 0.0 {
        return Ok(0.0);
    }
    Ok(-scale * centered.signum() * (1.0 - 2.0 * centered.abs()).ln())
}

/// Analytic CDF, used by goodness-of-fit checks.
pub fn laplace_cdf(x: f64, scale: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / scale).exp()
    } else {
        1.0 - 0.5 * (-x / scale).exp()
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSource {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw on the open interval (0, 1): midpoints of a 2^-53 grid,
    /// so neither endpoint can occur.
    pub fn uniform_open(&mut self) -> f64 {
        let k = self.rng.random::<u64>() >> 11;
        (k as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn sample(&mut self, params: &LaplaceParams) -> f64 {
        let u = self.uniform_open();
        laplace_inverse_cdf(u, params.scale).expect("uniform_open stays inside (0, 1)")
    }
}
