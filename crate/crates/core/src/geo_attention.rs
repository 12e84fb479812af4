//! Geometry-conditioned graph self-attention over per-camera node features.
//!
//! Logits are `(X W_q)(C W_k)ᵀ/√d + B_geom`, where the context `C = S X Θᵀ`
//! mixes neighbours through the row-normalized affinity `S` and the bias
//! `B_geom = τ_b · log max(A, floor)` favours nearby cameras. Row softmax makes
//! the result row-stochastic; the refined features are `𝒜 (X W_v) + X`.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera_graph::{row_normalize, CameraGraph};
use crate::error::{invalid_input, invalid_param, Error, Result};
pub use crate::linalg::power_iteration_spectral_norm;
use crate::linalg::{gaussian_matrix, row_softmax, spectral_norm};

pub const DEFAULT_AFFINITY_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub theta: Array2<f64>,
    pub tau_b: f64,
    pub affinity_floor: f64,
}

impl AttentionParams {
    pub fn dim(&self) -> usize {
        self.w_q.nrows()
    }

    /// Identity projections, unit temperature.
    pub fn identity(d: usize) -> Self {
        let eye = Array2::eye(d);
        Self {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            theta: eye,
            tau_b: 1.0,
            affinity_floor: DEFAULT_AFFINITY_FLOOR,
        }
    }

    /// Gaussian-initialised projections with entries `N(0, scale²/d)`;
    /// `W_v` is spectrally normalized to 1.
    pub fn random(d: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = scale / (d as f64).sqrt();
        let mut draw = || gaussian_matrix(&mut rng, d, d, std);
        let (w_q, w_k, w_v, theta) = (draw(), draw(), draw(), draw());
        Self {
            w_q,
            w_k,
            w_v: spectral_normalize(&w_v, 1.0),
            theta,
            tau_b: 1.0,
            affinity_floor: DEFAULT_AFFINITY_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, m) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("theta", &self.theta)] {
            if m.dim() != (d, d) {
                return Err(invalid_input(format!("{name} has shape {:?}, expected ({d}, {d})", m.dim())));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(invalid_input(format!("{name} has non-finite entries")));
            }
        }
        if !(self.tau_b > 0.0) {
            return Err(invalid_param(format!("tau_b must be positive, got {}", self.tau_b)));
        }
        if !(self.affinity_floor > 0.0) {
            return Err(invalid_param(format!("affinity floor must be positive, got {}", self.affinity_floor)));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: AttentionParamsFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        file.try_into()
    }

    pub fn to_file(&self) -> AttentionParamsFile {
        let flat = |m: &Array2<f64>| m.iter().copied().collect();
        AttentionParamsFile {
            dim: self.dim(),
            w_q: flat(&self.w_q),
            w_k: flat(&self.w_k),
            w_v: flat(&self.w_v),
            theta: flat(&self.theta),
            tau_b: self.tau_b,
            affinity_floor: self.affinity_floor,
        }
    }
}

/// JSON form of [`AttentionParams`]: flattened row-major matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionParamsFile {
    pub dim: usize,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub theta: Vec<f64>,
    #[serde(default = "one")]
    pub tau_b: f64,
    #[serde(default = "default_floor")]
    pub affinity_floor: f64,
}

fn one() -> f64 {
    1.0
}

fn default_floor() -> f64 {
    DEFAULT_AFFINITY_FLOOR
}

impl TryFrom<AttentionParamsFile> for AttentionParams {
    type Error = Error;

    fn try_from(f: AttentionParamsFile) -> Result<Self> {
        let d = f.dim;
        let mat = |name: &str, v: Vec<f64>| {
            Array2::from_shape_vec((d, d), v).map_err(|_| invalid_input(format!("{name} must hold {} numbers", d * d)))
        };
        let p = AttentionParams {
            w_q: mat("w_q", f.w_q)?,
            w_k: mat("w_k", f.w_k)?,
            w_v: mat("w_v", f.w_v)?,
            theta: mat("theta", f.theta)?,
            tau_b: f.tau_b,
            affinity_floor: f.affinity_floor,
        };
        p.validate()?;
        Ok(p)
    }
}

/// `C = S X Θᵀ` with `S` the L1 row-normalized affinity.
pub fn compute_context(x: ArrayView2<f64>, graph: &CameraGraph, theta: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    if graph.len() != n {
        return Err(invalid_input(format!("{n} feature rows for a graph of {} cameras", graph.len())));
    }
    if theta.dim() != (d, d) {
        return Err(invalid_input(format!("theta has shape {:?}, expected ({d}, {d})", theta.dim())));
    }
    let s = row_normalize(&graph.affinity);
    Ok(s.dot(&x).dot(&theta.t()))
}

pub fn geometry_bias(graph: &CameraGraph, tau_b: f64, floor: f64) -> Array2<f64> {
    graph.affinity.mapv(|a| tau_b * a.max(floor).ln())
}

/// Row-softmax attention. Errors with `NumericOverflow` on non-finite logits.
pub fn attention_matrix(
    x: ArrayView2<f64>,
    c: ArrayView2<f64>,
    params: &AttentionParams,
    b_geom: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    if d == 0 {
        return Err(invalid_input("feature dimension must be positive"));
    }
    if c.dim() != (n, d) || b_geom.dim() != (n, n) || params.dim() != d {
        return Err(invalid_input(format!(
            "shape mismatch: X {:?}, C {:?}, B {:?}, params d={}",
            x.dim(),
            c.dim(),
            b_geom.dim(),
            params.dim()
        )));
    }
    let q = x.dot(&params.w_q);
    let k = c.dot(&params.w_k);
    let logits = q.dot(&k.t()) / (d as f64).sqrt() + b_geom;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow("attention logits are not finite; rescale inputs".into()));
    }
    Ok(row_softmax(&logits))
}

/// Residual refinement `X̂ = 𝒜 (X W_v) + X`.
pub fn refine(x: ArrayView2<f64>, attn: ArrayView2<f64>, w_v: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    if attn.dim() != (n, n) || w_v.dim() != (d, d) {
        return Err(invalid_input(format!(
            "shape mismatch: X {:?}, attention {:?}, W_v {:?}",
            x.dim(),
            attn.dim(),
            w_v.dim()
        )));
    }
    Ok(attn.dot(&x.dot(&w_v)) + x)
}

/// Scales `w` down so that its spectral norm is at most `target`.
pub fn spectral_normalize(w: &Array2<f64>, target: f64) -> Array2<f64> {
    let norm = spectral_norm(w.view());
    if norm > target && norm > 0.0 {
        // Shave a relative ulp-scale margin so rounding never lands above target.
        w * (target / norm * (1.0 - 1e-12))
    } else {
        w.clone()
    }
}

/// Output of a full attention pass.
#[derive(Debug, Clone)]
pub struct AttentionPass {
    pub context: Array2<f64>,
    pub bias: Array2<f64>,
    pub attention: Array2<f64>,
    pub refined: Array2<f64>,
}

/// Context, bias, attention and residual refinement in one call.
pub fn forward(x: ArrayView2<f64>, graph: &CameraGraph, params: &AttentionParams) -> Result<AttentionPass> {
    params.validate()?;
    let context = compute_context(x, graph, params.theta.view())?;
    let bias = geometry_bias(graph, params.tau_b, params.affinity_floor);
    let attention = attention_matrix(x, context.view(), params, bias.view())?;
    let refined = refine(x, attention.view(), params.w_v.view())?;
    Ok(AttentionPass { context, bias, attention, refined })
}
