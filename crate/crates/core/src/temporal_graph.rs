//! Lagged message passing over the camera graph.
//!
//! One step takes node features observed at `t − τ`, exchanges perceptron
//! messages along graph edges, aggregates them with each node's prior, then
//! mixes the aggregates through geometry-conditioned attention and a spectrally
//! bounded value projection before the residual add:
//!
//! `F_temp = 𝒜 (A_agg W_v) + F_{t−τ}`.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera_graph::CameraGraph;
use crate::error::{invalid_input, invalid_param, Result};
use crate::geo_attention::{self, spectral_normalize, AttentionParams, AttentionParamsFile};
use crate::linalg::{frobenius, gaussian_matrix, l2, spectral_norm};

pub const DEFAULT_TAU: f64 = 1.0;
pub const DEFAULT_NEIGHBOR_THRESHOLD: f64 = 0.05;

/// Weights of the message perceptron `(d+d+2 → h → d)` and the linear aggregator `(d+d → d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TgnConfig {
    pub tau: f64,
    pub msg_w1: Array2<f64>,
    pub msg_w2: Array2<f64>,
    pub msg_b1: Option<Array1<f64>>,
    pub msg_b2: Option<Array1<f64>>,
    pub agg_w: Array2<f64>,
    pub agg_b: Option<Array1<f64>>,
    pub use_edge_descriptor: bool,
    pub neighbor_threshold: f64,
}

impl TgnConfig {
    pub fn dim(&self) -> usize {
        self.msg_w2.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.msg_w1.nrows()
    }

    pub fn zeros(d: usize, h: usize) -> Self {
        Self {
            tau: DEFAULT_TAU,
            msg_w1: Array2::zeros((h, 2 * d + 2)),
            msg_w2: Array2::zeros((d, h)),
            msg_b1: None,
            msg_b2: None,
            agg_w: Array2::zeros((d, 2 * d)),
            agg_b: None,
            use_edge_descriptor: true,
            neighbor_threshold: DEFAULT_NEIGHBOR_THRESHOLD,
        }
    }

    /// Gaussian weights with entries `N(0, scale²/fan_in)`.
    pub fn random(d: usize, h: usize, scale: f64, use_edge_descriptor: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| {
            gaussian_matrix(&mut rng, rows, cols, scale / (cols as f64).sqrt())
        };
        let msg_w1 = draw(h, 2 * d + 2);
        let msg_w2 = draw(d, h);
        let agg_w = draw(d, 2 * d);
        Self { msg_w1, msg_w2, agg_w, use_edge_descriptor, ..Self::zeros(d, h) }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.dim(), self.hidden());
        if !(self.tau > 0.0) {
            return Err(invalid_param(format!("tau must be positive, got {}", self.tau)));
        }
        if h == 0 {
            return Err(invalid_param("hidden width must be at least 1"));
        }
        if self.msg_w1.ncols() != 2 * d + 2 || self.agg_w.dim() != (d, 2 * d) {
            return Err(invalid_input(format!(
                "inconsistent TGN shapes: msg_w1 {:?}, msg_w2 {:?}, agg_w {:?}",
                self.msg_w1.dim(),
                self.msg_w2.dim(),
                self.agg_w.dim()
            )));
        }
        let bias_ok = |b: &Option<Array1<f64>>, n: usize| b.as_ref().is_none_or(|b| b.len() == n);
        if !bias_ok(&self.msg_b1, h) || !bias_ok(&self.msg_b2, d) || !bias_ok(&self.agg_b, d) {
            return Err(invalid_input("bias length does not match its layer"));
        }
        let all = self.msg_w1.iter().chain(self.msg_w2.iter()).chain(self.agg_w.iter());
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(invalid_input("TGN weights must be finite"));
        }
        Ok(())
    }
}

/// Node features observed at `t − τ` with their capture times in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSnapshot {
    pub features: Array2<f64>,
    pub timestamps: Vec<f64>,
}

impl TemporalSnapshot {
    pub fn new(features: Array2<f64>, timestamps: Vec<f64>) -> Self {
        Self { features, timestamps }
    }

    /// All timestamps equal to `t`.
    pub fn at(features: Array2<f64>, t: f64) -> Self {
        let n = features.nrows();
        Self { features, timestamps: vec![t; n] }
    }

    /// Checks finiteness and that every timestamp lies within `tau` of the newest one.
    pub fn validate(&self, tau: f64) -> Result<()> {
        if self.timestamps.len() != self.features.nrows() {
            return Err(invalid_input("one timestamp per node is required"));
        }
        if self.features.iter().chain(&self.timestamps).any(|x| !x.is_finite()) {
            return Err(invalid_input("snapshot must be finite"));
        }
        let anchor = self.timestamps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if let Some(t) = self.timestamps.iter().find(|&&t| anchor - t > tau) {
            return Err(invalid_input(format!("timestamp {t} lies outside the window [{}, {anchor}]", anchor - tau)));
        }
        Ok(())
    }
}

fn relu(v: Array1<f64>) -> Array1<f64> {
    v.mapv(|x| x.max(0.0))
}

/// Message perceptron `W2 · relu(W1 [src; dst; edge] + b1) + b2`.
pub fn message(src: ArrayView1<f64>, dst: ArrayView1<f64>, edge: [f64; 2], cfg: &TgnConfig) -> Result<Array1<f64>> {
    let d = cfg.dim();
    if src.len() != d || dst.len() != d {
        return Err(invalid_input(format!("message inputs must have dimension {d}")));
    }
    let mut z = Array1::zeros(2 * d + 2);
    z.slice_mut(s![..d]).assign(&src);
    z.slice_mut(s![d..2 * d]).assign(&dst);
    if cfg.use_edge_descriptor {
        z[2 * d] = edge[0];
        z[2 * d + 1] = edge[1];
    }
    let mut pre = cfg.msg_w1.dot(&z);
    if let Some(b) = &cfg.msg_b1 {
        pre += b;
    }
    let mut out = cfg.msg_w2.dot(&relu(pre));
    if let Some(b) = &cfg.msg_b2 {
        out += b;
    }
    Ok(out)
}

/// Linear aggregator over the message mean and the node prior. An empty
/// neighbourhood contributes the zero mean.
pub fn aggregate(messages: &[Array1<f64>], prior: ArrayView1<f64>, cfg: &TgnConfig) -> Result<Array1<f64>> {
    let d = cfg.dim();
    if prior.len() != d || messages.iter().any(|m| m.len() != d) {
        return Err(invalid_input(format!("aggregate inputs must have dimension {d}")));
    }
    let mut mean = Array1::zeros(d);
    for m in messages {
        mean += m;
    }
    if !messages.is_empty() {
        mean /= messages.len() as f64;
    }
    let mut out = cfg.agg_w.slice(s![.., ..d]).dot(&mean) + cfg.agg_w.slice(s![.., d..]).dot(&prior);
    if let Some(b) = &cfg.agg_b {
        out += b;
    }
    Ok(out)
}

/// Neighbours of node `i`: every other node with affinity at least the threshold.
pub fn neighbors(graph: &CameraGraph, i: usize, threshold: f64) -> Vec<usize> {
    (0..graph.len()).filter(|&j| j != i && graph.affinity[[i, j]] >= threshold).collect()
}

/// Per-node aggregates `A_agg` (one row per node).
pub fn aggregates(snapshot: &TemporalSnapshot, graph: &CameraGraph, cfg: &TgnConfig) -> Result<Array2<f64>> {
    let f = &snapshot.features;
    let (n, d) = f.dim();
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let msgs = neighbors(graph, i, cfg.neighbor_threshold)
            .into_iter()
            .map(|j| {
                let edge = [graph.affinity[[i, j]], snapshot.timestamps[j] - snapshot.timestamps[i]];
                message(f.row(i), f.row(j), edge, cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        out.row_mut(i).assign(&aggregate(&msgs, f.row(i), cfg)?);
    }
    Ok(out)
}

fn check_step_inputs(
    snapshot: &TemporalSnapshot,
    graph: &CameraGraph,
    attn: &AttentionParams,
    cfg: &TgnConfig,
) -> Result<()> {
    cfg.validate()?;
    attn.validate()?;
    snapshot.validate(cfg.tau)?;
    let (n, d) = snapshot.features.dim();
    if n != graph.len() {
        return Err(invalid_input(format!("snapshot has {n} nodes, graph has {}", graph.len())));
    }
    if d != cfg.dim() || d != attn.dim() {
        return Err(invalid_input(format!(
            "feature dim {d} vs TGN dim {} vs attention dim {}",
            cfg.dim(),
            attn.dim()
        )));
    }
    Ok(())
}

/// One temporal step. `W_v` is spectrally normalized to 1 before use.
pub fn tgn_step(
    snapshot: &TemporalSnapshot,
    graph: &CameraGraph,
    attn: &AttentionParams,
    cfg: &TgnConfig,
) -> Result<Array2<f64>> {
    check_step_inputs(snapshot, graph, attn, cfg)?;
    let f = snapshot.features.view();
    let agg = aggregates(snapshot, graph, cfg)?;
    let w_v = spectral_normalize(&attn.w_v, 1.0);
    let pass = geo_attention::forward(f, graph, attn)?;
    Ok(pass.attention.dot(&agg.dot(&w_v)) + f)
}

/// Measured Lipschitz constants and the resulting step bound
/// `‖F_temp‖_F ≤ constant · ‖F_{t−τ}‖_F + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityBound {
    /// Message perceptron: ‖W2‖₂‖W1‖₂.
    pub l_message_layers: f64,
    /// Node-feature Lipschitz constant of the stacked message means, `l_message_layers · (1 + ‖P‖₂)`
    /// with `P` the neighbour-averaging operator.
    pub l_m: f64,
    /// Aggregator gain on the message mean.
    pub l_a: f64,
    /// Aggregator gain on the node prior.
    pub l_a_prior: f64,
    /// ‖𝒜‖₂ · ‖W_v‖₂ for the attention of this snapshot.
    pub mixing_gain: f64,
    pub constant: f64,
    /// Contribution of edge descriptors and biases, independent of the features.
    pub offset: f64,
}

/// Bound for one step, `C = 1 + κ (L_a L_m + L'_a)` with `κ = max(1, ‖𝒜‖₂‖W_v‖₂)`.
///
/// With a non-expansive mixing stage this is `1 + L_a L_m + L'_a`. Row-stochastic
/// attention is not non-expansive in ‖·‖₂ in general, so the measured gain is kept.
pub fn stability_bound(
    snapshot: &TemporalSnapshot,
    graph: &CameraGraph,
    attn: &AttentionParams,
    cfg: &TgnConfig,
) -> Result<StabilityBound> {
    check_step_inputs(snapshot, graph, attn, cfg)?;
    let n = graph.len();
    let d = cfg.dim();

    // Neighbour-averaging operator.
    let mut p = Array2::zeros((n, n));
    let mut edge_mean = Array1::<f64>::zeros(n);
    for i in 0..n {
        let nb = neighbors(graph, i, cfg.neighbor_threshold);
        for &j in &nb {
            p[[i, j]] = 1.0 / nb.len() as f64;
            if cfg.use_edge_descriptor {
                let e = [graph.affinity[[i, j]], snapshot.timestamps[j] - snapshot.timestamps[i]];
                edge_mean[i] += (e[0] * e[0] + e[1] * e[1]).sqrt() / nb.len() as f64;
            }
        }
    }
    let has_neighbors: Vec<bool> = (0..n).map(|i| p.row(i).sum() > 0.0).collect();

    let w1 = spectral_norm(cfg.msg_w1.view());
    let w2 = spectral_norm(cfg.msg_w2.view());
    let l_message_layers = w1 * w2;
    let l_m = l_message_layers * (1.0 + spectral_norm(p.view()));
    let l_a = spectral_norm(cfg.agg_w.slice(s![.., ..d]));
    let l_a_prior = spectral_norm(cfg.agg_w.slice(s![.., d..]));

    let w_v = spectral_normalize(&attn.w_v, 1.0);
    let pass = geo_attention::forward(snapshot.features.view(), graph, attn)?;
    let mixing_gain = spectral_norm(pass.attention.view()) * spectral_norm(w_v.view());
    let kappa = mixing_gain.max(1.0);

    // Per-message constant from biases; only nodes with neighbours receive messages.
    let msg_bias = cfg.msg_b1.as_ref().map_or(0.0, |b| w2 * l2(b.view())) + cfg.msg_b2.as_ref().map_or(0.0, |b| l2(b.view()));
    let with_nb = has_neighbors.iter().filter(|&&b| b).count() as f64;
    let message_offset = l_message_layers * l2(edge_mean.view()) + msg_bias * with_nb.sqrt();
    let agg_offset = cfg.agg_b.as_ref().map_or(0.0, |b| l2(b.view()) * (n as f64).sqrt());

    Ok(StabilityBound {
        l_message_layers,
        l_m,
        l_a,
        l_a_prior,
        mixing_gain,
        constant: 1.0 + kappa * (l_a * l_m + l_a_prior),
        offset: kappa * (l_a * message_offset + agg_offset),
    })
}

impl StabilityBound {
    pub fn holds_for(&self, input: ArrayView2<f64>, output: ArrayView2<f64>) -> bool {
        let rhs = self.constant * frobenius(input) + self.offset;
        frobenius(output) <= rhs * (1.0 + 1e-9) + 1e-12
    }
}

/// JSON configuration for the `tgn step` command: flattened row-major weights,
/// optional biases and optional attention parameters (identity when absent).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TgnConfigFile {
    pub dim: usize,
    pub hidden: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "yes")]
    pub use_edge_descriptor: bool,
    #[serde(default = "default_threshold")]
    pub neighbor_threshold: f64,
    pub msg_w1: Vec<f64>,
    pub msg_w2: Vec<f64>,
    pub agg_w: Vec<f64>,
    #[serde(default)]
    pub msg_b1: Option<Vec<f64>>,
    #[serde(default)]
    pub msg_b2: Option<Vec<f64>>,
    #[serde(default)]
    pub agg_b: Option<Vec<f64>>,
    #[serde(default)]
    pub attention: Option<AttentionParamsFile>,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_threshold() -> f64 {
    DEFAULT_NEIGHBOR_THRESHOLD
}

fn yes() -> bool {
    true
}

impl TgnConfigFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn from_parts(cfg: &TgnConfig, attn: Option<&AttentionParams>) -> Self {
        let flat = |m: &Array2<f64>| m.iter().copied().collect();
        Self {
            dim: cfg.dim(),
            hidden: cfg.hidden(),
            tau: cfg.tau,
            use_edge_descriptor: cfg.use_edge_descriptor,
            neighbor_threshold: cfg.neighbor_threshold,
            msg_w1: flat(&cfg.msg_w1),
            msg_w2: flat(&cfg.msg_w2),
            agg_w: flat(&cfg.agg_w),
            msg_b1: cfg.msg_b1.as_ref().map(|b| b.to_vec()),
            msg_b2: cfg.msg_b2.as_ref().map(|b| b.to_vec()),
            agg_b: cfg.agg_b.as_ref().map(|b| b.to_vec()),
            attention: attn.map(AttentionParams::to_file),
        }
    }

    pub fn into_parts(self) -> Result<(TgnConfig, AttentionParams)> {
        let (d, h) = (self.dim, self.hidden);
        let mat = |name: &str, rows: usize, cols: usize, v: Vec<f64>| {
            Array2::from_shape_vec((rows, cols), v)
                .map_err(|_| invalid_input(format!("{name} must hold {rows}x{cols} numbers")))
        };
        let cfg = TgnConfig {
            tau: self.tau,
            msg_w1: mat("msg_w1", h, 2 * d + 2, self.msg_w1)?,
            msg_w2: mat("msg_w2", d, h, self.msg_w2)?,
            msg_b1: self.msg_b1.map(Array1::from),
            msg_b2: self.msg_b2.map(Array1::from),
            agg_w: mat("agg_w", d, 2 * d, self.agg_w)?,
            agg_b: self.agg_b.map(Array1::from),
            use_edge_descriptor: self.use_edge_descriptor,
            neighbor_threshold: self.neighbor_threshold,
        };
        cfg.validate()?;
        let attn = match self.attention {
            Some(a) => AttentionParams::try_from(a)?,
            None => AttentionParams::identity(d),
        };
        Ok((cfg, attn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera_graph::{build_adjacency, CameraPose};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn line_graph(n: usize, spacing: f64) -> CameraGraph {
        let poses: Vec<_> = (0..n).map(|k| CameraPose::at(format!("c{k}"), [k as f64 * spacing, 0.0, 0.0])).collect();
        build_adjacency(&poses, 1.0).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_message() {
        let cfg = TgnConfig::zeros(3, 4);
        let m = message(array![1.0, 2.0, 3.0].view(), array![-1.0, 0.0, 1.0].view(), [0.5, 0.2], &cfg).unwrap();
        assert_eq!(m, Array1::<f64>::zeros(3));
    }

    #[test]
    fn identity_message_passes_source() {
        let d = 3;
        let mut cfg = TgnConfig::zeros(d, d);
        for k in 0..d {
            cfg.msg_w1[[k, k]] = 1.0;
            cfg.msg_w2[[k, k]] = 1.0;
        }
        let src = array![0.5, 0.0, 2.0];
        let m = message(src.view(), array![9.0, -9.0, 1.0].view(), [0.3, -0.7], &cfg).unwrap();
        assert_eq!(m, src);
    }

    #[test]
    fn message_rejects_wrong_dim() {
        let cfg = TgnConfig::zeros(3, 2);
        assert!(message(array![1.0].view(), array![1.0, 2.0, 3.0].view(), [0.0, 0.0], &cfg).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let d = 2;
        let cfg = TgnConfig::zeros(d, 1);
        assert_eq!(aggregate(&[], array![1.0, 1.0].view(), &cfg).unwrap(), Array1::<f64>::zeros(2));

        let mut pass = TgnConfig::zeros(d, 1);
        pass.agg_w[[0, 0]] = 1.0;
        pass.agg_w[[1, 1]] = 1.0;
        let m = array![0.25, -4.0];
        assert_eq!(aggregate(std::slice::from_ref(&m), array![7.0, 7.0].view(), &pass).unwrap(), m);
        let two = aggregate(&[array![1.0, 0.0], array![0.0, 3.0]], array![7.0, 7.0].view(), &pass).unwrap();
        assert_eq!(two, array![0.5, 1.5]);
    }

    #[test]
    fn pure_residual_when_weights_vanish() {
        let g = line_graph(3, 0.5);
        let mut attn = AttentionParams::identity(2);
        attn.w_v.fill(0.0);
        let snap = TemporalSnapshot::at(array![[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]], 10.0);
        let out = tgn_step(&snap, &g, &attn, &TgnConfig::zeros(2, 3)).unwrap();
        assert_eq!(out, snap.features);
    }

    #[test]
    fn single_node_prior_passthrough_doubles() {
        let g = line_graph(1, 1.0);
        let d = 3;
        let mut cfg = TgnConfig::zeros(d, 2);
        for k in 0..d {
            cfg.agg_w[[k, d + k]] = 1.0;
        }
        let snap = TemporalSnapshot::at(array![[1.0, -2.0, 0.5]], 0.0);
        let out = tgn_step(&snap, &g, &AttentionParams::identity(d), &cfg).unwrap();
        assert_abs_diff_eq!(out, &snap.features * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_features_are_a_fixed_point_without_edges() {
        let g = line_graph(4, 0.7);
        let cfg = TgnConfig::random(3, 5, 1.0, false, 9);
        let snap = TemporalSnapshot::at(Array2::zeros((4, 3)), 0.0);
        let out = tgn_step(&snap, &g, &AttentionParams::random(3, 1.0, 2), &cfg).unwrap();
        assert_eq!(out, Array2::<f64>::zeros((4, 3)));
    }

    #[test]
    fn mismatched_nodes_rejected() {
        let g = line_graph(3, 1.0);
        let snap = TemporalSnapshot::at(Array2::zeros((2, 2)), 0.0);
        assert!(tgn_step(&snap, &g, &AttentionParams::identity(2), &TgnConfig::zeros(2, 1)).is_err());
    }

    #[test]
    fn window_is_enforced() {
        let snap = TemporalSnapshot::new(Array2::zeros((2, 1)), vec![0.0, 1.5]);
        assert!(snap.validate(1.0).is_err());
        assert!(snap.validate(2.0).is_ok());
    }

    #[test]
    fn message_norm_respects_layer_product() {
        for seed in 0..20 {
            let cfg = TgnConfig::random(4, 6, 1.5, true, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let src = gaussian_matrix(&mut rng, 1, 4, 1.0).row(0).to_owned();
            let dst = gaussian_matrix(&mut rng, 1, 4, 1.0).row(0).to_owned();
            let edge = [0.3, -0.2];
            let m = message(src.view(), dst.view(), edge, &cfg).unwrap();
            let l = spectral_norm(cfg.msg_w1.view()) * spectral_norm(cfg.msg_w2.view());
            let bound = l * (l2(src.view()) + l2(dst.view()) + (0.09f64 + 0.04).sqrt());
            assert!(l2(m.view()) <= bound * (1.0 + 1e-9));
        }
    }

    #[test]
    fn config_file_roundtrip() {
        let cfg = TgnConfig::random(2, 3, 1.0, true, 5);
        let attn = AttentionParams::random(2, 1.0, 6);
        let json = serde_json::to_string(&TgnConfigFile::from_parts(&cfg, Some(&attn))).unwrap();
        let (c2, a2) = serde_json::from_str::<TgnConfigFile>(&json).unwrap().into_parts().unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(a2, attn);
    }
}
