//! Norm clipping and the Gaussian mechanism for embedding release.
//!
//! Noise is addressed by `(seed, stream, counter)`: the seed keys a ChaCha20
//! generator, the stream selects one of its 2⁶⁴ independent streams (one per
//! embedding ordinal) and the counter positions the block cursor, so any
//! single draw can be regenerated without replaying the others.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Result};
use crate::linalg::l2;

/// 32-bit words reserved per draw counter within one stream.
const WORDS_PER_COUNTER: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    pub clip_radius_b: f64,
    /// `f64::INFINITY` marks a non-private release with zero noise.
    pub epsilon: f64,
    pub delta: f64,
    pub sensitivity_sf: f64,
    /// Standard deviation of every noise coordinate.
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl DpParams {
    /// `S_f = 2B` and `σ` from [`calibrate_sigma`]; `ε = ∞` gives `σ = 0`.
    pub fn calibrated(clip_radius_b: f64, epsilon: f64, delta: f64, rng_seed: u64) -> Result<Self> {
        let sensitivity_sf = sensitivity_bound(clip_radius_b)?;
        let noise_sigma = if epsilon == f64::INFINITY {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(invalid_param(format!("delta must lie in (0,1), got {delta}")));
            }
            0.0
        } else {
            calibrate_sigma(sensitivity_sf, epsilon, delta)?
        };
        let p = Self { clip_radius_b, epsilon, delta, sensitivity_sf, noise_sigma, rng_seed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_radius_b > 0.0 && self.clip_radius_b.is_finite()) {
            return Err(invalid_param(format!("clip radius must be positive, got {}", self.clip_radius_b)));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid_param(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid_param(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if !(self.sensitivity_sf > 0.0 && self.sensitivity_sf <= 2.0 * self.clip_radius_b) {
            return Err(invalid_param(format!(
                "sensitivity {} must lie in (0, 2B = {}]",
                self.sensitivity_sf,
                2.0 * self.clip_radius_b
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid_param(format!("noise sigma must be finite and nonnegative, got {}", self.noise_sigma)));
        }
        if self.epsilon.is_finite() {
            let required = calibrate_sigma(self.sensitivity_sf, self.epsilon, self.delta)?;
            if self.noise_sigma < required * (1.0 - 1e-12) {
                return Err(invalid_param(format!(
                    "noise sigma {} is below the {} required for (ε={}, δ={})",
                    self.noise_sigma, required, self.epsilon, self.delta
                )));
            }
        }
        Ok(())
    }
}

/// Projects `f` onto the ball of radius `b`.
pub fn clip(f: ArrayView1<f64>, b: f64) -> Array1<f64> {
    let mut out = f.to_owned();
    clip_in_place(out.view_mut(), b);
    out
}

/// Rescales onto the ball; the factor is nudged down until the rounded norm is
/// at most `b`, so clipping a clipped vector is a no-op.
fn clip_in_place(mut row: ArrayViewMut1<f64>, b: f64) {
    let n = l2(row.view());
    if n <= b {
        return;
    }
    let orig = row.to_owned();
    let mut scale = b / n;
    loop {
        row.assign(&orig.mapv(|x| x * scale));
        if l2(row.view()) <= b {
            return;
        }
        scale *= 1.0 - f64::EPSILON;
    }
}

/// Row-wise [`clip`].
pub fn clip_rows(features: ArrayView2<f64>, b: f64) -> Array2<f64> {
    let mut out = features.to_owned();
    for row in out.rows_mut() {
        clip_in_place(row, b);
    }
    out
}

/// L2 sensitivity of an encoder clipped to radius `b`: `2b`.
pub fn sensitivity_bound(b: f64) -> Result<f64> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(invalid_param(format!("clip radius must be positive, got {b}")));
    }
    Ok(2.0 * b)
}

/// Smallest Gaussian-mechanism σ: `√(2 ln(1.25/δ)) · S_f / ε`.
pub fn calibrate_sigma(sf: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(sf > 0.0 && sf.is_finite()) {
        return Err(invalid_param(format!("sensitivity must be positive, got {sf}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid_param(format!("epsilon must be positive and finite, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid_param(format!("delta must lie in (0,1), got {delta}")));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() * sf / epsilon)
}

/// Generator positioned at `(seed, stream, counter)`.
pub fn noise_rng(seed: u64, stream: u64, counter: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(counter) << WORDS_PER_COUNTER);
    rng
}

/// `clip(f, B) + z` with `z ~ N(0, σ² I)` drawn from `(seed, stream, counter)`.
pub fn privatize(f: ArrayView1<f64>, params: &DpParams, stream: u64, counter: u64) -> Array1<f64> {
    let mut out = clip(f, params.clip_radius_b);
    if params.noise_sigma > 0.0 {
        let mut rng = noise_rng(params.rng_seed, stream, counter);
        for x in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x += params.noise_sigma * z;
        }
    }
    out
}

/// Privatizes every row; row `i` uses stream `i` and the shared `counter`.
pub fn privatize_rows(features: ArrayView2<f64>, params: &DpParams, counter: u64) -> Array2<f64> {
    let mut out = Array2::zeros(features.raw_dim());
    for (i, (src, mut dst)) in features.rows().into_iter().zip(out.rows_mut()).enumerate() {
        dst.assign(&privatize(src, params, i as u64, counter));
    }
    out
}
