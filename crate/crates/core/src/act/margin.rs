use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::ActConfig;
use crate::error::{invalid_input, invalid_param, Error, Result};

pub const DEFAULT_EMA_DECAY: f64 = 0.9;
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// `γ = γ₀ (1 + α tanh(β · kl))`, bounded in `[γ₀, γ₀(1+α)]`.
pub fn adaptive_margin(kl: f64, cfg: &ActConfig) -> Result<f64> {
    if !(kl >= 0.0) {
        return Err(invalid_param(format!("KL divergence must be nonnegative, got {kl}")));
    }
    Ok(cfg.gamma0 * (1.0 + cfg.alpha * (cfg.beta * kl).tanh()))
}

/// KL(N(μp, diag vp) ‖ N(μq, diag vq)).
pub fn gaussian_kl_diag(mu_p: ArrayView1<f64>, var_p: ArrayView1<f64>, mu_q: ArrayView1<f64>, var_q: ArrayView1<f64>) -> f64 {
    let mut kl = 0.0;
    for k in 0..mu_p.len() {
        let r = var_p[k] / var_q[k];
        let gap = mu_p[k] - mu_q[k];
        kl += r - 1.0 - r.ln() + gap * gap / var_q[k];
    }
    // r − 1 − ln r ≥ 0 analytically; clamp rounding residue.
    (0.5 * kl).max(0.0)
}

/// Diagonal-Gaussian moments tracked by exponential moving average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub count: usize,
}

impl IdentityStats {
    fn from_rows(rows: &[ArrayView1<f64>], floor: f64) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = Array1::zeros(d);
        for r in rows {
            mean += r;
        }
        mean /= n;
        let mut var = Array1::zeros(d);
        for r in rows {
            let diff = r - &mean;
            var += &(&diff * &diff);
        }
        var /= n;
        var.mapv_inplace(|v: f64| v.max(floor));
        Self { mean, var, count: rows.len() }
    }

    fn blend(&mut self, batch: IdentityStats, decay: f64, floor: f64) {
        self.mean = &self.mean * decay + &batch.mean * (1.0 - decay);
        self.var = &self.var * decay + &batch.var * (1.0 - decay);
        self.var.mapv_inplace(|v| v.max(floor));
        self.count += batch.count;
    }
}

/// Running per-identity and global feature statistics plus the derived margins.
///
/// Mutated only through [`MarginState::update`] and [`MarginState::refresh`];
/// losses read a frozen snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginState {
    pub ema_decay: f64,
    pub variance_floor: f64,
    pub per_identity: BTreeMap<u32, IdentityStats>,
    pub global: Option<IdentityStats>,
    pub per_identity_kl: BTreeMap<u32, f64>,
    pub per_identity_gamma: BTreeMap<u32, f64>,
}

impl Default for MarginState {
    fn default() -> Self {
        Self::new(DEFAULT_EMA_DECAY)
    }
}

impl MarginState {
    pub fn new(ema_decay: f64) -> Self {
        Self {
            ema_decay,
            variance_floor: VARIANCE_FLOOR,
            per_identity: BTreeMap::new(),
            global: None,
            per_identity_kl: BTreeMap::new(),
            per_identity_gamma: BTreeMap::new(),
        }
    }

    /// Folds a batch into the running moments. The first observation of an
    /// identity initialises its moments directly.
    pub fn update(&mut self, features: ArrayView2<f64>, labels: &[u32]) -> Result<()> {
        if features.nrows() != labels.len() {
            return Err(invalid_input("one label per feature row is required"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(invalid_param(format!("EMA decay must lie in (0,1), got {}", self.ema_decay)));
        }
        if labels.is_empty() {
            return Ok(());
        }
        let mut groups: BTreeMap<u32, Vec<ArrayView1<f64>>> = BTreeMap::new();
        for (row, &l) in features.rows().into_iter().zip(labels) {
            groups.entry(l).or_default().push(row);
        }
        let (decay, floor) = (self.ema_decay, self.variance_floor);
        for (label, rows) in groups {
            let batch = IdentityStats::from_rows(&rows, floor);
            match self.per_identity.get_mut(&label) {
                Some(s) => s.blend(batch, decay, floor),
                None => {
                    self.per_identity.insert(label, batch);
                }
            }
        }
        let all: Vec<_> = features.rows().into_iter().collect();
        let batch = IdentityStats::from_rows(&all, floor);
        match &mut self.global {
            Some(g) => g.blend(batch, decay, floor),
            None => self.global = Some(batch),
        }
        Ok(())
    }

    /// Closed-form KL between the identity's Gaussian and the global reference.
    pub fn estimate_kl(&self, identity: u32) -> Result<f64> {
        let stats = self.per_identity.get(&identity).ok_or(Error::MissingIdentity(identity))?;
        if stats.count < 2 {
            return Err(invalid_input(format!("identity {identity} has {} sample(s); at least 2 are needed", stats.count)));
        }
        let global = self.global.as_ref().ok_or_else(|| invalid_input("global statistics are not initialised"))?;
        Ok(gaussian_kl_diag(stats.mean.view(), stats.var.view(), global.mean.view(), global.var.view()))
    }

    /// Recomputes KL and margins for every identity with enough samples.
    pub fn refresh(&mut self, cfg: &ActConfig) -> Result<()> {
        let ids: Vec<u32> = self.per_identity.keys().copied().collect();
        for id in ids {
            match self.estimate_kl(id) {
                Ok(kl) => {
                    self.per_identity_kl.insert(id, kl);
                    self.per_identity_gamma.insert(id, adaptive_margin(kl, cfg)?);
                }
                Err(Error::InvalidInput(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// Margin of an identity; the base margin γ₀ until statistics exist.
    pub fn gamma(&self, identity: u32, cfg: &ActConfig) -> f64 {
        self.per_identity_gamma.get(&identity).copied().unwrap_or(cfg.gamma0)
    }

    /// Margins for classes `0..num_classes`.
    pub fn gamma_vector(&self, num_classes: usize, cfg: &ActConfig) -> Vec<f64> {
        (0..num_classes as u32).map(|c| self.gamma(c, cfg)).collect()
    }
}
