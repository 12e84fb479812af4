use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::act::{act_id_loss_with, act_total_with, dissimilarity_matrix, sgd_step_with_decay, ActConfig, LabeledBatch, MarginState};
use crate::audit::compactness;
use crate::dp::{calibrate_sigma, privatize_rows, sensitivity_bound, DpParams};
use crate::embeddings::EmbeddingBatch;
use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::index::{BuildOptions, GalleryIndex, HnswParams, IndexMode};
use crate::linalg::gaussian_matrix;
use crate::transport::{sinkhorn, TransportProblem, DEFAULT_MAX_ITERS, DEFAULT_TOL};

/// Weights of `𝓛_total = 𝓛_ACT + λ_OT 𝓛_OT + λ_aux 𝓛_aux`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub act: ActConfig,
    pub lambda_ot: f64,
    pub lambda_aux: f64,
    pub epsilon_ot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { act: ActConfig::default(), lambda_ot: 0.1, lambda_aux: 0.0, epsilon_ot: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        self.act.validate()?;
        if !(self.lambda_ot >= 0.0) || !(self.lambda_aux >= 0.0) {
            return Err(invalid_param("lambda_ot and lambda_aux must be nonnegative"));
        }
        if self.lambda_ot > 0.0 && !(self.epsilon_ot > 0.0) {
            return Err(invalid_param("epsilon_ot must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub act: f64,
    /// Sinkhorn objective on the batch dissimilarity matrix (uniform marginals).
    pub ot: f64,
    /// Gradient of 𝓛_ACT; the transport and auxiliary terms carry none.
    pub grad_features: Array2<f64>,
    pub grad_prototypes: Array2<f64>,
}

/// `𝓛_ACT + λ_OT 𝓛_OT + λ_aux · 0`. The triplet term is dropped when the
/// batch has no anchor with both a positive and a negative.
pub fn total_loss(batch: &LabeledBatch, gammas: &[f64], weights: &LossWeights) -> Result<TotalLoss> {
    weights.validate()?;
    let act = match act_total_with(batch, gammas, &weights.act) {
        Err(Error::EmptyBatch) => act_id_loss_with(batch, gammas, &weights.act)?,
        other => other?,
    };
    let ot = if weights.lambda_ot > 0.0 {
        let d = dissimilarity_matrix(batch.features.view()).mapv(|x| x.max(0.0));
        let problem = TransportProblem::uniform(d).with_epsilon(weights.epsilon_ot);
        sinkhorn(&problem, DEFAULT_TOL, DEFAULT_MAX_ITERS)?.objective
    } else {
        0.0
    };
    Ok(TotalLoss {
        value: act.value + weights.lambda_ot * ot,
        act: act.value,
        ot,
        grad_features: act.grad_features,
        grad_prototypes: act.grad_prototypes,
    })
}

/// Clip radius and budget used for Stage II/III.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpSettings {
    pub clip_radius_b: f64,
    #[serde(with = "crate::audit::epsilon_serde")]
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for DpSettings {
    fn default() -> Self {
        Self { clip_radius_b: 1.0, epsilon: 2.0, delta: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexSettings {
    pub mode: IndexMode,
    pub hnsw: HnswParams,
}

impl IndexSettings {
    pub fn build_options(&self) -> BuildOptions {
        BuildOptions { mode: self.mode, hnsw: self.hnsw, ..BuildOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Identities per mini-batch; every sample of a chosen identity joins the batch.
    pub batch_identities: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss: LossWeights,
    pub dp: DpSettings,
    /// Epochs between sensitivity/σ re-estimation; 0 disables it.
    pub recalibration_period: usize,
    /// Encoder output dimension; the input dimension when absent.
    pub output_dim: Option<usize>,
    /// Index built over the privatized training set at the end of training.
    pub index: IndexSettings,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_identities: 8,
            learning_rate: 0.02,
            weight_decay: 1e-3,
            loss: LossWeights::default(),
            dp: DpSettings::default(),
            recalibration_period: 5,
            output_dim: None,
            index: IndexSettings::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_identities < 2 {
            return Err(invalid_param("batches need at least two identities"));
        }
        let shrink = self.learning_rate * self.weight_decay;
        if !(self.learning_rate > 0.0 && self.weight_decay >= 0.0 && shrink < 1.0) {
            return Err(invalid_param(format!("need η > 0 and 0 ≤ ηλ_wd < 1, got η={}, λ_wd={}", self.learning_rate, self.weight_decay)));
        }
        if self.output_dim == Some(0) {
            return Err(invalid_param("output dimension must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub epoch: usize,
    pub sensitivity_sf: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    pub act_loss: f64,
    pub ot_loss: f64,
    /// Compactness of the L2-normalised encoded training set after the epoch.
    pub compactness_q: f64,
    /// Margin per identity label after the epoch.
    pub gammas: BTreeMap<u32, f64>,
    pub kl: BTreeMap<u32, f64>,
    pub steps: usize,
    /// Feature rows whose decayed-step norm bound failed during the epoch.
    pub bound_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEncoder {
    /// `d′ × d`; an input row `x` encodes to `W x`.
    #[serde(with = "crate::camera_graph::matrix_serde")]
    pub weights: Array2<f64>,
}

impl LinearEncoder {
    pub fn random(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { weights: gaussian_matrix(&mut rng, output_dim, input_dim, 1.0 / (input_dim as f64).sqrt()) }
    }

    pub fn encode(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.weights.ncols() {
            return Err(invalid_input(format!("encoder expects dimension {}, got {}", self.weights.ncols(), x.ncols())));
        }
        Ok(x.dot(&self.weights.t()))
    }

    pub fn encode_batch(&self, batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        let mut out = batch.clone();
        out.features = self.encode(&batch.features)?;
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: LinearEncoder,
    pub initial_encoder: LinearEncoder,
    pub prototypes: Array2<f64>,
    pub margins: MarginState,
    /// Epoch 0 describes the initial encoder.
    pub history: Vec<EpochRecord>,
    pub calibrations: Vec<Calibration>,
    pub dp: DpParams,
    /// Encoded, clipped and noised training set (Stage III).
    pub privatized: EmbeddingBatch,
    pub index: GalleryIndex,
}

/// Stage III on any embedding batch: clip, add calibrated noise (stream = row),
/// record the parameters in the provenance and build the index.
pub fn privatize_and_index(encoded: &EmbeddingBatch, dp: &DpParams, build: &BuildOptions) -> Result<(EmbeddingBatch, GalleryIndex)> {
    let mut private = encoded.clone();
    private.features = privatize_rows(encoded.features.view(), dp, 0);
    private.provenance = serde_json::json!({ "privatization": dp, "source": encoded.provenance });
    let index = GalleryIndex::build(&private, build)?;
    Ok((private, index))
}

fn unit_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut r in out.rows_mut() {
        let n = r.dot(&r).sqrt();
        if n > 0.0 {
            r /= n;
        }
    }
    out
}

/// Sorted distinct labels and each row's index into them.
pub fn class_indices(labels: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let class_of: BTreeMap<u32, u32> = classes.iter().enumerate().map(|(i, &l)| (l, i as u32)).collect();
    let mapped = labels.iter().map(|l| class_of[l]).collect();
    (classes, mapped)
}

/// Unit-norm class means, one row per class index `0..num_classes`.
pub fn mean_prototypes(features: &Array2<f64>, class_idx: &[u32], num_classes: usize) -> Array2<f64> {
    let mut prototypes = Array2::zeros((num_classes, features.ncols()));
    for (c, mut p) in prototypes.rows_mut().into_iter().enumerate() {
        let rows: Vec<usize> = (0..class_idx.len()).filter(|&i| class_idx[i] as usize == c).collect();
        if let Some(mean) = features.select(Axis(0), &rows).mean_axis(Axis(0)) {
            p.assign(&mean);
        }
    }
    unit_rows(&prototypes)
}

/// Compactness, margins and KL per identity.
type Snapshot = (f64, BTreeMap<u32, f64>, BTreeMap<u32, f64>);

/// Trains a linear encoder on labelled data with `𝓛_total`, then privatizes
/// the encoded data. Features are `F = X Wᵀ`; with `G = ∂𝓛/∂F` the encoder
/// step `W ← W − η(Gᵀ X + λ_wd W)` moves every feature row by exactly
/// `−η(g + λ_wd f)` with `g = X Gᵀ`-row, which is checked against the
/// decayed-step norm bound at every step.
pub fn train_toy(data: &EmbeddingBatch, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let raw_labels = data.labels_required()?;
    let (classes, y) = class_indices(raw_labels);
    if classes.len() < 2 {
        return Err(invalid_input("training needs at least two identities"));
    }
    let x = &data.features;
    let out_dim = cfg.output_dim.unwrap_or(data.dim());

    let initial_encoder = LinearEncoder::random(data.dim(), out_dim, cfg.seed);
    let mut w = initial_encoder.weights.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    // Prototypes start at the normalised class means of the initial features.
    let mut prototypes = mean_prototypes(&x.dot(&w.t()), &y, classes.len());

    let mut margins = MarginState::default();
    let members: Vec<Vec<usize>> = (0..classes.len()).map(|c| (0..y.len()).filter(|&i| y[i] as usize == c).collect()).collect();
    let snapshot = |w: &Array2<f64>, margins: &MarginState| -> Result<Snapshot> {
        let q = compactness(unit_rows(&x.dot(&w.t())).view(), &y)?.q;
        let gammas = classes.iter().enumerate().map(|(c, &l)| (l, margins.gamma(c as u32, &cfg.loss.act))).collect();
        let kl = classes
            .iter()
            .enumerate()
            .filter_map(|(c, &l)| margins.per_identity_kl.get(&(c as u32)).map(|k| (l, *k)))
            .collect();
        Ok((q, gammas, kl))
    };
    let (q0, g0, k0) = snapshot(&w, &margins)?;
    let mut history = vec![EpochRecord { epoch: 0, loss: f64::NAN, act_loss: f64::NAN, ot_loss: f64::NAN, compactness_q: q0, gammas: g0, kl: k0, steps: 0, bound_violations: 0 }];
    let mut calibrations = Vec::new();
    let (eta, wd) = (cfg.learning_rate, cfg.weight_decay);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..classes.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut act_sum, mut ot_sum, mut steps, mut violations) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_identities) {
            let rows: Vec<usize> = chunk.iter().flat_map(|&c| members[c].iter().copied()).collect();
            if chunk.len() < 2 {
                continue;
            }
            let xb = x.select(Axis(0), &rows);
            let yb: Vec<u32> = rows.iter().map(|&i| y[i]).collect();
            let fb = xb.dot(&w.t());
            margins.update(fb.view(), &yb)?;
            margins.refresh(&cfg.loss.act)?;
            let gammas = margins.gamma_vector(classes.len(), &cfg.loss.act);
            let batch = LabeledBatch::new(fb.clone(), yb, prototypes.clone())?;
            let loss = total_loss(&batch, &gammas, &cfg.loss)?;
            if !loss.value.is_finite() {
                return Err(Error::TrainingFailure { epoch, reason: format!("loss became {} at step {steps}", loss.value) });
            }
            let grad_w = loss.grad_features.t().dot(&xb);
            let feature_grad = xb.dot(&grad_w.t());
            let step = sgd_step_with_decay(fb.view(), feature_grad.view(), eta, wd)?;
            w = &w * (1.0 - eta * wd) - &grad_w * eta;
            violations += step.bound_violations;
            let moved = xb.dot(&w.t());
            let drift = (&moved - &step.features).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            if !(drift <= 1e-9 * (1.0 + step.features.mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b)))) {
                return Err(Error::TrainingFailure { epoch, reason: format!("encoder step and feature step disagree by {drift}") });
            }
            prototypes = &prototypes * (1.0 - eta * wd) - &loss.grad_prototypes * eta;
            if w.iter().chain(prototypes.iter()).any(|v| !v.is_finite()) {
                return Err(Error::TrainingFailure { epoch, reason: "parameters became non-finite".into() });
            }
            loss_sum += loss.value;
            act_sum += loss.act;
            ot_sum += loss.ot;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::TrainingFailure { epoch, reason: "no batch had two identities".into() });
        }
        if cfg.recalibration_period > 0 && epoch % cfg.recalibration_period == 0 && cfg.dp.epsilon.is_finite() {
            let sf = sensitivity_bound(cfg.dp.clip_radius_b)?;
            calibrations.push(Calibration { epoch, sensitivity_sf: sf, noise_sigma: calibrate_sigma(sf, cfg.dp.epsilon, cfg.dp.delta)? });
        }
        let (q, gammas, kl) = snapshot(&w, &margins)?;
        let n = steps as f64;
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / n,
            act_loss: act_sum / n,
            ot_loss: ot_sum / n,
            compactness_q: q,
            gammas,
            kl,
            steps,
            bound_violations: violations,
        });
    }

    let encoder = LinearEncoder { weights: w };
    let dp = DpParams::calibrated(cfg.dp.clip_radius_b, cfg.dp.epsilon, cfg.dp.delta, cfg.seed)?;
    let (privatized, index) = privatize_and_index(&encoder.encode_batch(data)?, &dp, &cfg.index.build_options())?;
    Ok(TrainOutcome { encoder, initial_encoder, prototypes, margins, history, calibrations, dp, privatized, index })
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synthetic::{generate_synthetic, SyntheticSpec};
    use ndarray::array;

    #[test]
    fn total_loss_reduces_to_act() {
        let f = array![[1.0, 0.1], [0.9, 0.3], [0.1, 1.0], [-0.2, 0.9]];
        let batch = LabeledBatch::new(f, vec![0, 0, 1, 1], array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let g = [0.4, 0.4];
        let w0 = LossWeights { lambda_ot: 0.0, ..LossWeights::default() };
        let t = total_loss(&batch, &g, &w0).unwrap();
        let act = act_total_with(&batch, &g, &w0.act).unwrap();
        assert_eq!(t.value, act.value);
        assert_eq!(t.grad_features, act.grad_features);

        // Entropic objective of this 4×4 cosine-cost problem from a separate
        // scaling-form solve run to machine precision.
        for (eps, ot) in [(0.1, -0.2912751016085342), (0.2, -0.6027347816498775)] {
            let w1 = LossWeights { lambda_ot: 1.0, epsilon_ot: eps, ..LossWeights::default() };
            let t1 = total_loss(&batch, &g, &w1).unwrap();
            assert!((t1.ot - ot).abs() < 1e-6, "{} vs {ot}", t1.ot);
            assert!((t1.value - (act.value + t1.ot)).abs() < 1e-12);
            assert_eq!(t1.grad_features, act.grad_features);
        }
    }

    #[test]
    fn zero_epochs_keeps_initialisation() {
        let (data, _) = generate_synthetic(&SyntheticSpec { identities: 4, samples_per_identity: 4, dim: 6, ..SyntheticSpec::default() }).unwrap();
        let out = train_toy(&data, &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
        assert_eq!(out.encoder, out.initial_encoder);
        assert_eq!(out.privatized.len(), data.len());
        assert_eq!(out.index.len(), data.len());
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn short_run_is_deterministic_and_bounded() {
        let (data, _) = generate_synthetic(&SyntheticSpec { identities: 6, samples_per_identity: 5, dim: 8, ..SyntheticSpec::default() }).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_identities: 3, ..TrainConfig::default() };
        let a = train_toy(&data, &cfg).unwrap();
        let b = train_toy(&data, &cfg).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.privatized, b.privatized);
        assert!(a.history.iter().all(|h| h.bound_violations == 0));
        assert!(a.history[1..].iter().all(|h| h.loss.is_finite()));
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
