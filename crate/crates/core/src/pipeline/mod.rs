//! End-to-end orchestration: synthetic data, the linear toy trainer and the
//! staged pipeline that writes every artifact plus a manifest.

mod synthetic;
mod train;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accountant::{LedgerConfig, PrivacyLedger, SpendDecision, DEFAULT_DELTA_PRIME};
use crate::audit::{privacy_utility_sweep, SweepConfig, SweepTable};
use crate::camera_graph::CameraGraph;
use crate::dp::DpParams;
use crate::embeddings::EmbeddingBatch;
use crate::error::{invalid_param, Error, Result};
use crate::geo_attention::{self, power_iteration_spectral_norm, AttentionParams};
use crate::index::{evaluate, EvalOptions, ReidMetrics};
use crate::temporal_graph::{stability_bound, tgn_step, TemporalSnapshot, TgnConfig};

pub use synthetic::{generate_synthetic, query_split, SyntheticSpec};
pub use train::{
    class_indices, mean_prototypes, moving_average, privatize_and_index, total_loss, train_toy, Calibration, DpSettings, EpochRecord, IndexSettings, LinearEncoder, LossWeights,
    TotalLoss, TrainConfig, TrainOutcome,
};

/// Environment variable that replaces the configured master seed.
pub const SEED_ENV: &str = "TOPOGUARD_SEED";

/// Reads [`SEED_ENV`]; `Ok(None)` when unset.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| invalid_param(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

/// Attention and temporal step applied to the per-camera mean features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub attention_scale: f64,
    pub tgn_hidden: usize,
    pub tgn_scale: f64,
    pub steps: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { attention_scale: 1.0, tgn_hidden: 8, tgn_scale: 0.5, steps: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    #[serde(with = "epsilon_list")]
    pub epsilons: Vec<f64>,
    pub runs: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self { epsilons: vec![f64::INFINITY, 8.0, 2.0, 0.5], runs: 5 }
    }
}

mod epsilon_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Eps(#[serde(with = "crate::audit::epsilon_serde")] f64);

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&e| Eps(e)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Eps>::deserialize(d)?.into_iter().map(|e| e.0).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LedgerSettings {
    pub budget_epsilon: f64,
    pub budget_delta: f64,
    pub delta_prime: f64,
}

impl Default for LedgerSettings {
    fn default() -> Self {
        Self { budget_epsilon: 50.0, budget_delta: 1e-4, delta_prime: DEFAULT_DELTA_PRIME }
    }
}

/// A whole pipeline run as one JSON document. Stage seeds derive from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synthetic: SyntheticSpec,
    pub refine: Option<RefineConfig>,
    pub train: TrainConfig,
    pub eval_ks: Vec<usize>,
    pub sweep: Option<SweepSettings>,
    pub ledger: LedgerSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synthetic: SyntheticSpec::default(),
            refine: Some(RefineConfig::default()),
            train: TrainConfig::default(),
            eval_ks: vec![1, 5, 10],
            sweep: Some(SweepSettings::default()),
            ledger: LedgerSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub synthetic: u64,
    pub refine: u64,
    pub train: u64,
    pub privatize: u64,
    pub index: u64,
    pub sweep: u64,
}

impl StageSeeds {
    pub fn derive(seed: u64) -> Self {
        Self {
            synthetic: seed,
            refine: seed.wrapping_add(1),
            train: seed.wrapping_add(2),
            privatize: seed.wrapping_add(3),
            index: seed.wrapping_add(4),
            sweep: seed.wrapping_add(5),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds::derive(self.seed)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.train.validate()?;
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(invalid_param("eval_ks must be nonempty and positive"));
        }
        if let Some(s) = &self.sweep {
            if s.runs == 0 || s.epsilons.is_empty() {
                return Err(invalid_param("sweep needs at least one ε and one run"));
            }
        }
        LedgerConfig { delta_prime: self.ledger.delta_prime, budget_epsilon: self.ledger.budget_epsilon, budget_delta: self.ledger.budget_delta }.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub seeds: StageSeeds,
    pub config_sha256: String,
    pub stages_completed: Vec<String>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub artifacts: BTreeMap<String, Artifact>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Summary of the refinement stage on the per-camera mean features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub cameras: usize,
    pub max_row_sum_error: f64,
    pub attention_spectral_radius: f64,
    pub refined_norm_ratio: f64,
    pub tgn_constant: f64,
    pub tgn_offset: f64,
    pub tgn_steps: usize,
    pub tgn_bound_violations: usize,
    pub tgn_final_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub gallery: usize,
    pub queries: usize,
    pub dp: DpParams,
    pub retrieval: ReidMetrics,
    pub final_compactness_q: f64,
    pub ledger_epsilon_total: f64,
    pub ledger_delta_total: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub manifest: Manifest,
    pub metrics: PipelineMetrics,
    pub sweep: Option<SweepTable>,
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Attention pass and repeated temporal steps over the camera graph.
pub fn refine_cameras(data: &EmbeddingBatch, graph: &CameraGraph, cfg: &RefineConfig, seed: u64) -> Result<RefineReport> {
    let cams = data.cameras.as_deref().ok_or_else(|| invalid_param("refinement needs camera ids"))?;
    let (c, d) = (graph.len(), data.dim());
    let mut x = Array2::zeros((c, d));
    for cam in 0..c {
        let rows: Vec<usize> = (0..cams.len()).filter(|&i| cams[i] as usize == cam).collect();
        if !rows.is_empty() {
            x.row_mut(cam).assign(&data.features.select(Axis(0), &rows).mean_axis(Axis(0)).expect("nonempty"));
        }
    }
    let attn = AttentionParams::random(d, cfg.attention_scale, seed);
    let pass = geo_attention::forward(x.view(), graph, &attn)?;
    let max_row_sum_error = pass.attention.rows().into_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    let mixed = pass.attention.dot(&x).dot(&attn.w_v);
    let x_norm = frobenius(&x);
    let refined_norm_ratio = if x_norm > 0.0 { frobenius(&mixed) / x_norm } else { 0.0 };

    let tgn = TgnConfig::random(d, cfg.tgn_hidden, cfg.tgn_scale, true, seed.wrapping_add(1));
    let mut state = TemporalSnapshot::at(x, 0.0);
    let (mut constant, mut offset, mut violations) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..cfg.steps {
        let bound = stability_bound(&state, graph, &attn, &tgn)?;
        let next = tgn_step(&state, graph, &attn, &tgn)?;
        if !bound.holds_for(state.features.view(), next.view()) {
            violations += 1;
        }
        constant = constant.max(bound.constant);
        offset = offset.max(bound.offset);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("temporal refinement diverged".into()));
        }
        state = TemporalSnapshot::at(next, 0.0);
    }
    Ok(RefineReport {
        cameras: c,
        max_row_sum_error,
        attention_spectral_radius: power_iteration_spectral_norm(pass.attention.view(), 1000, 1e-12),
        refined_norm_ratio,
        tgn_constant: constant,
        tgn_offset: offset,
        tgn_steps: cfg.steps,
        tgn_bound_violations: violations,
        tgn_final_norm: frobenius(&state.features),
    })
}

struct Run<'a> {
    out: &'a Path,
    manifest: Manifest,
}

impl Run<'_> {
    fn write(&mut self, name: &str, file: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(file);
        fs::write(&path, bytes)?;
        self.manifest.artifacts.insert(name.into(), Artifact { path: file.into(), sha256: hex::encode(Sha256::digest(bytes)) });
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, file: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, file, &bytes)
    }

    fn write_batch(&mut self, name: &str, file: &str, batch: &EmbeddingBatch) -> Result<PathBuf> {
        let mut bytes = Vec::new();
        batch.write_to(&mut bytes)?;
        self.write(name, file, &bytes)
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        match f(self) {
            Ok(v) => {
                self.manifest.stages_completed.push(name.into());
                Ok(v)
            }
            Err(e) => {
                self.manifest.failed_stage = Some(name.into());
                self.manifest.error = Some(e.to_string());
                Err(Error::StageFailure { stage: name.into(), source: Box::new(e) })
            }
        }
    }

    fn write_manifest(&self) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        fs::write(self.out.join(MANIFEST_FILE), bytes)?;
        Ok(())
    }
}

/// The sweep as run by both the pipeline and `audit sweep`: the encoded clean
/// gallery is re-privatized per (ε, run) and queried with clean queries.
pub fn sweep_config(settings: &SweepSettings, dp: &DpSettings, index: &IndexSettings, ks: &[usize], seed: u64) -> Result<SweepConfig> {
    Ok(SweepConfig {
        epsilons: settings.epsilons.clone(),
        base: DpParams::calibrated(dp.clip_radius_b, f64::INFINITY, dp.delta, seed)?,
        runs: settings.runs,
        build: index.build_options(),
        eval: EvalOptions { ks: ks.to_vec(), exclude_ids: None },
    })
}

/// Runs every stage and writes artifacts into `out`. On failure the manifest
/// lists the artifacts written so far and names the failed stage.
pub fn run_pipeline(cfg: &PipelineConfig, out: impl AsRef<Path>) -> Result<PipelineOutput> {
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let seeds = cfg.seeds();
    let mut run = Run {
        out,
        manifest: Manifest {
            seed: cfg.seed,
            seeds,
            config_sha256: cfg.hash()?,
            stages_completed: Vec::new(),
            failed_stage: None,
            error: None,
            artifacts: BTreeMap::new(),
        },
    };
    let result = run_stages(cfg, &mut run);
    run.write_manifest()?;
    let (metrics, sweep) = result?;
    Ok(PipelineOutput { manifest: run.manifest, metrics, sweep })
}

fn run_stages(cfg: &PipelineConfig, run: &mut Run) -> Result<(PipelineMetrics, Option<SweepTable>)> {
    let seeds = cfg.seeds();
    run.stage("config", |r| {
        cfg.validate()?;
        r.write_json("config", "config.json", cfg)?;
        Ok(())
    })?;

    let (data, graph) = run.stage("generate", |r| {
        let spec = SyntheticSpec { seed: seeds.synthetic, ..cfg.synthetic.clone() };
        let (data, graph) = generate_synthetic(&spec)?;
        r.write_json("graph", "graph.json", &graph)?;
        r.write_batch("data", "data.emb", &data)?;
        Ok((data, graph))
    })?;

    if let Some(refine) = &cfg.refine {
        run.stage("refine", |r| {
            let report = refine_cameras(&data, &graph, refine, seeds.refine)?;
            r.write_json("refine", "refine.json", &report)?;
            Ok(())
        })?;
    }

    let train_cfg = TrainConfig {
        seed: seeds.train,
        index: IndexSettings { hnsw: crate::index::HnswParams { seed: seeds.index, ..cfg.train.index.hnsw }, ..cfg.train.index },
        ..cfg.train.clone()
    };
    let trained = run.stage("train", |r| {
        let trained = train_toy(&data, &train_cfg)?;
        r.write_json("encoder", "encoder.json", &trained.encoder)?;
        r.write_json("history", "history.json", &serde_json::json!({ "epochs": trained.history, "calibrations": trained.calibrations }))?;
        Ok(trained)
    })?;

    let (gallery, queries) = run.stage("split", |r| {
        let encoded = trained.encoder.encode_batch(&data)?;
        let (gallery, queries) = query_split(&encoded)?;
        r.write_batch("gallery_clean", "gallery_clean.emb", &gallery)?;
        r.write_batch("queries", "queries.emb", &queries)?;
        Ok((gallery, queries))
    })?;

    let (ledger, dp, private) = run.stage("privatize", |r| {
        let ledger_path = r.out.join("ledger.jsonl");
        if ledger_path.exists() {
            fs::remove_file(&ledger_path)?;
        }
        let l = &cfg.ledger;
        let ledger = PrivacyLedger::open(&ledger_path, LedgerConfig { delta_prime: l.delta_prime, budget_epsilon: l.budget_epsilon, budget_delta: l.budget_delta })?;
        let s = &train_cfg.dp;
        let dp = DpParams::calibrated(s.clip_radius_b, s.epsilon, s.delta, seeds.privatize)?;
        if dp.epsilon.is_finite() {
            if let SpendDecision::Refused { epsilon_total, delta_total } = ledger.try_spend(dp.epsilon, dp.delta, "privatize-gallery")? {
                return Err(invalid_param(format!("ledger refused the gallery release: totals would reach ε={epsilon_total}, δ={delta_total}")));
            }
        }
        let mut private = gallery.clone();
        private.features = crate::dp::privatize_rows(gallery.features.view(), &dp, 0);
        private.provenance = serde_json::json!({ "privatization": dp, "source": gallery.provenance });
        r.write_batch("gallery_private", "gallery_private.emb", &private)?;
        let bytes = fs::read(&ledger_path)?;
        r.write("ledger", "ledger.jsonl", &bytes)?;
        Ok((ledger, dp, private))
    })?;

    let index = run.stage("index", |r| {
        let index = crate::index::GalleryIndex::build(&private, &train_cfg.index.build_options())?;
        r.write("index", "index.tgix", &index.to_bytes())?;
        Ok(index)
    })?;

    let metrics = run.stage("evaluate", |r| {
        let retrieval = evaluate(&index, &queries, &EvalOptions { ks: cfg.eval_ks.clone(), exclude_ids: None })?;
        let (eps_total, delta_total) = ledger.totals();
        let metrics = PipelineMetrics {
            gallery: gallery.len(),
            queries: queries.len(),
            dp,
            retrieval,
            final_compactness_q: trained.history.last().map_or(f64::NAN, |h| h.compactness_q),
            ledger_epsilon_total: eps_total,
            ledger_delta_total: delta_total,
        };
        r.write_json("metrics", "metrics.json", &metrics)?;
        Ok(metrics)
    })?;

    let sweep = match &cfg.sweep {
        None => None,
        Some(settings) => Some(run.stage("sweep", |r| {
            // Reload what was written so the numbers match `audit sweep` on the same files.
            let g = EmbeddingBatch::load(r.out.join("gallery_clean.emb"))?;
            let q = EmbeddingBatch::load(r.out.join("queries.emb"))?;
            let sc = sweep_config(settings, &train_cfg.dp, &train_cfg.index, &cfg.eval_ks, seeds.sweep)?;
            let table = privacy_utility_sweep(&g, &q, &sc)?;
            r.write("sweep_csv", "sweep.csv", table.to_csv_string()?.as_bytes())?;
            r.write_json("sweep_json", "sweep.json", &table)?;
            Ok(table)
        })?),
    };
    Ok((metrics, sweep))
}
