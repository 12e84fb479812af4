//! Adaptive Class-Tolerant (ACT) metric learning.
//!
//! Per-identity margins grow with the divergence of an identity's feature
//! distribution from the global one, and feed both an additive-angular-margin
//! softmax and a triplet hinge with hard-positive / semi-hard-negative mining.

mod loss;
mod margin;
mod mining;


pub use loss::{
    act_id_loss, act_id_loss_with, act_total, act_total_with, act_triplet_loss, act_triplet_loss_with,
    cosine_dissimilarity, sgd_step_with_decay, DecayStep, LossOutput,
};
pub use margin::{adaptive_margin, gaussian_kl_diag, IdentityStats, MarginState, DEFAULT_EMA_DECAY, VARIANCE_FLOOR};
pub use mining::{dissimilarity_matrix, mine_all, mine_hard_positive, mine_semi_hard_negative, MinedTriplet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, Result};

/// Hyperparameters of the ACT objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActConfig {
    pub gamma0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub scale_s: f64,
    pub lambda_tri: f64,
}

impl Default for ActConfig {
    fn default() -> Self {
        Self { gamma0: 0.4, alpha: 0.2, beta: 1.0, scale_s: 30.0, lambda_tri: 1.0 }
    }
}

impl ActConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma0", self.gamma0), ("alpha", self.alpha), ("beta", self.beta), ("scale_s", self.scale_s)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid_param(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda_tri >= 0.0 && self.lambda_tri.is_finite()) {
            return Err(invalid_param(format!("lambda_tri must be nonnegative, got {}", self.lambda_tri)));
        }
        Ok(())
    }

    /// Upper end of the margin range, `γ₀(1 + α)`.
    pub fn max_margin(&self) -> f64 {
        self.gamma0 * (1.0 + self.alpha)
    }
}

/// Features with identity labels and the class prototypes they are scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub features: Array2<f64>,
    pub labels: Vec<u32>,
    pub prototypes: Array2<f64>,
}

impl LabeledBatch {
    pub fn new(features: Array2<f64>, labels: Vec<u32>, prototypes: Array2<f64>) -> Result<Self> {
        let b = Self { features, labels, prototypes };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() != self.labels.len() {
            return Err(invalid_input(format!(
                "{} feature rows for {} labels",
                self.features.nrows(),
                self.labels.len()
            )));
        }
        if self.features.ncols() != self.prototypes.ncols() {
            return Err(invalid_input("features and prototypes differ in dimension"));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.prototypes.nrows()) {
            return Err(invalid_input(format!("label {l} has no prototype ({} classes)", self.prototypes.nrows())));
        }
        if self.features.iter().chain(self.prototypes.iter()).any(|x| !x.is_finite()) {
            return Err(invalid_input("non-finite features or prototypes"));
        }
        Ok(())
    }
}
