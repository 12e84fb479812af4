//! Empirical privacy audits and embedding diagnostics.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{privatize, privatize_rows, DpParams};
use crate::embeddings::EmbeddingBatch;
use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::index::{evaluate, BuildOptions, EvalOptions, GalleryIndex};
use crate::linalg::gaussian_matrix;

/// Serde for ε values where infinity is written as the string `"inf"`.
pub mod epsilon_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 { s.serialize_str("inf") } else { s.serialize_f64(*v) }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => super::parse_epsilon(&t).map_err(serde::de::Error::custom),
        }
    }
}

/// Parses an ε value, accepting `inf`/`∞` for the non-private setting.
pub fn parse_epsilon(text: &str) -> std::result::Result<f64, String> {
    match text.trim().to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "∞" => Ok(f64::INFINITY),
        t => t.parse::<f64>().map_err(|e| format!("bad epsilon {text:?}: {e}")),
    }
}

fn format_epsilon(e: f64) -> String {
    if e.is_infinite() { "inf".to_owned() } else { e.to_string() }
}

/// `2 (precision − 0.5)`.
pub fn mia_advantage(precision: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&precision) {
        return Err(invalid_param(format!("precision must lie in [0,1], got {precision}")));
    }
    Ok(2.0 * (precision - 0.5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaReport {
    pub attack_precision: f64,
    pub advantage: f64,
    #[serde(with = "epsilon_serde")]
    pub epsilon_setting: f64,
    pub noise_sigma: f64,
    /// Held-out records the attack was scored on.
    pub trial_count: usize,
    pub threshold: f64,
}

fn euclid(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Threshold attack on distance to the training members' centroid.
///
/// Each set is shuffled and halved under `seed`. All records are privatized
/// with `dp` (noise seeded by `seed`); the attacker sees the privatized
/// training halves with membership labels, picks the distance threshold
/// maximising training accuracy, and predicts "member" on the held-out
/// halves when the distance is at most that threshold. Precision is the
/// member fraction among held-out "member" predictions (0.5 when none).
pub fn run_mia_audit(members: ArrayView2<f64>, nonmembers: ArrayView2<f64>, dp: &DpParams, seed: u64) -> Result<MiaReport> {
    if members.nrows() < 2 || nonmembers.nrows() < 2 {
        return Err(invalid_input("each set needs at least two records to split"));
    }
    if members.ncols() != nonmembers.ncols() {
        return Err(invalid_input(format!("dimension mismatch: {} vs {}", members.ncols(), nonmembers.ncols())));
    }
    let noise = DpParams { rng_seed: seed, ..*dp };
    let n_m = members.nrows();
    let priv_m = privatize_rows(members, &noise, 0);
    let mut priv_n = Array2::zeros(nonmembers.raw_dim());
    for (i, (src, mut dst)) in nonmembers.rows().into_iter().zip(priv_n.rows_mut()).enumerate() {
        dst.assign(&privatize(src, &noise, (n_m + i) as u64, 0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |n: usize| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let test = idx.split_off(n / 2);
        (idx, test)
    };
    let (m_train, m_test) = split(n_m);
    let (n_train, n_test) = split(nonmembers.nrows());

    let centroid = priv_m.select(Axis(0), &m_train).mean_axis(Axis(0)).expect("nonempty");
    let score = |x: ArrayView1<f64>| euclid(x, centroid.view());
    let mut train: Vec<(f64, bool)> = m_train
        .iter()
        .map(|&i| (score(priv_m.row(i)), true))
        .chain(n_train.iter().map(|&i| (score(priv_n.row(i)), false)))
        .collect();
    train.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));

    // Threshold below everything predicts no members; each prefix end is a candidate.
    let total_nonmembers = n_train.len();
    let (mut best_correct, mut threshold) = (total_nonmembers, f64::NEG_INFINITY);
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &(s, is_member)) in train.iter().enumerate() {
        if is_member { tp += 1 } else { fp += 1 }
        let tied_next = train.get(k + 1).is_some_and(|n| n.0 == s);
        if tied_next {
            continue;
        }
        let correct = tp + (total_nonmembers - fp);
        if correct > best_correct {
            best_correct = correct;
            threshold = s;
        }
    }

    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &m_test {
        if score(priv_m.row(i)) <= threshold {
            tp += 1;
        }
    }
    for &i in &n_test {
        if score(priv_n.row(i)) <= threshold {
            fp += 1;
        }
    }
    let attack_precision = if tp + fp == 0 { 0.5 } else { tp as f64 / (tp + fp) as f64 };
    Ok(MiaReport {
        attack_precision,
        advantage: mia_advantage(attack_precision)?,
        epsilon_setting: dp.epsilon,
        noise_sigma: dp.noise_sigma,
        trial_count: m_test.len() + n_test.len(),
        threshold,
    })
}

/// Members at `+shift·e₀`, nonmembers at `−shift·e₀`, both with isotropic
/// spread `spread`. With `shift = 0` the two sets are identically distributed.
pub fn membership_dataset(n: usize, dim: usize, shift: f64, spread: f64, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = gaussian_matrix(&mut rng, n, dim, spread);
    let mut nm = gaussian_matrix(&mut rng, n, dim, spread);
    m.column_mut(0).mapv_inplace(|x| x + shift);
    nm.column_mut(0).mapv_inplace(|x| x - shift);
    (m, nm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(with = "epsilon_serde")]
    pub epsilon: f64,
    pub noise_sigma: f64,
    pub runs: usize,
    pub rank1_mean: f64,
    pub rank1_std: f64,
    pub map_mean: f64,
    pub map_std: f64,
    pub minp_mean: f64,
    pub minp_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epsilon", "noise_sigma", "runs", "rank1_mean", "rank1_std", "map_mean", "map_std", "minp_mean", "minp_std"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                format_epsilon(r.epsilon),
                r.noise_sigma.to_string(),
                r.runs.to_string(),
                r.rank1_mean.to_string(),
                r.rank1_std.to_string(),
                r.map_mean.to_string(),
                r.map_std.to_string(),
                r.minp_mean.to_string(),
                r.minp_std.to_string(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Mean and sample standard deviation (zero for a single run).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    /// Clip radius, δ and base seed; ε and σ are overridden per row.
    pub base: DpParams,
    pub runs: usize,
    pub build: BuildOptions,
    pub eval: EvalOptions,
}

/// Rank-1/mAP/mINP per ε, each the mean over `runs` independently privatized
/// galleries (run `r` uses noise seed `base.rng_seed + r`). Queries are not
/// privatized and no ledger is charged.
pub fn privacy_utility_sweep(gallery: &EmbeddingBatch, queries: &EmbeddingBatch, cfg: &SweepConfig) -> Result<SweepTable> {
    if cfg.runs == 0 {
        return Err(invalid_param("runs must be at least 1"));
    }
    let mut rows = Vec::with_capacity(cfg.epsilons.len());
    for &eps in &cfg.epsilons {
        let mut stats = (Vec::new(), Vec::new(), Vec::new());
        let mut sigma = 0.0;
        for r in 0..cfg.runs {
            let dp = DpParams::calibrated(cfg.base.clip_radius_b, eps, cfg.base.delta, cfg.base.rng_seed.wrapping_add(r as u64))?;
            sigma = dp.noise_sigma;
            let mut private = gallery.clone();
            private.features = privatize_rows(gallery.features.view(), &dp, 0);
            let index = GalleryIndex::build(&private, &cfg.build)?;
            let m = evaluate(&index, queries, &cfg.eval)?;
            stats.0.push(m.rank1());
            stats.1.push(m.map);
            stats.2.push(m.minp);
        }
        let (rank1_mean, rank1_std) = mean_std(&stats.0);
        let (map_mean, map_std) = mean_std(&stats.1);
        let (minp_mean, minp_std) = mean_std(&stats.2);
        rows.push(SweepRow { epsilon: eps, noise_sigma: sigma, runs: cfg.runs, rank1_mean, rank1_std, map_mean, map_std, minp_mean, minp_std });
    }
    Ok(SweepTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCompactness {
    pub label: u32,
    pub size: usize,
    pub intra_mean: f64,
    pub nearest_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactnessReport {
    #[serde(rename = "Q")]
    pub q: f64,
    pub clusters: Vec<ClusterCompactness>,
}

/// `Q = (1/K) Σᵢ [ mean_{x∈Cᵢ} ‖x − μᵢ‖ − min_{j≠i} ‖μᵢ − μⱼ‖ ]` with clusters
/// in ascending label order.
pub fn compactness(features: ArrayView2<f64>, labels: &[u32]) -> Result<CompactnessReport> {
    if features.nrows() != labels.len() {
        return Err(invalid_input("one label per row is required"));
    }
    let mut groups: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(invalid_input(format!("compactness needs at least two clusters, got {}", groups.len())));
    }
    let centroids: Vec<(u32, Array1<f64>)> = groups
        .iter()
        .map(|(&l, rows)| (l, features.select(Axis(0), rows).mean_axis(Axis(0)).expect("nonempty")))
        .collect();
    let mut clusters = Vec::with_capacity(groups.len());
    for (ci, (label, mu)) in centroids.iter().enumerate() {
        let rows = &groups[label];
        let intra_mean = rows.iter().map(|&r| euclid(features.row(r), mu.view())).sum::<f64>() / rows.len() as f64;
        let nearest_gap = centroids
            .iter()
            .enumerate()
            .filter(|(cj, _)| *cj != ci)
            .map(|(_, (_, other))| euclid(mu.view(), other.view()))
            .fold(f64::INFINITY, f64::min);
        clusters.push(ClusterCompactness { label: *label, size: rows.len(), intra_mean, nearest_gap });
    }
    let q = clusters.iter().map(|c| c.intra_mean - c.nearest_gap).sum::<f64>() / clusters.len() as f64;
    Ok(CompactnessReport { q, clusters })
}

/// Compactness of an embedding batch by its labels.
pub fn batch_compactness(batch: &EmbeddingBatch) -> Result<CompactnessReport> {
    compactness(batch.features.view(), batch.labels_required()?)
}

/// `ReLU(Σ_k (∂y/∂A^k ⊙ A^k) / N²)`. Per entry the head terms are summed in
/// sorted order, so the map does not depend on head order even in floating point.
pub fn attention_saliency(heads: &[Array2<f64>], grads: &[Array2<f64>]) -> Result<Array2<f64>> {
    if heads.is_empty() || heads.len() != grads.len() {
        return Err(invalid_input("need one gradient per attention head and at least one head"));
    }
    let shape = heads[0].dim();
    if shape.0 != shape.1 {
        return Err(invalid_input("attention maps must be square"));
    }
    if heads.iter().chain(grads).any(|m| m.dim() != shape) {
        return Err(invalid_input("attention and gradient shapes differ"));
    }
    let z = (shape.0 * shape.0) as f64;
    let mut terms = vec![0.0; heads.len()];
    Ok(Array2::from_shape_fn(shape, |ij| {
        for (t, (a, g)) in terms.iter_mut().zip(heads.iter().zip(grads)) {
            *t = g[ij] * a[ij] / z;
        }
        terms.sort_by(f64::total_cmp);
        terms.iter().sum::<f64>().max(0.0)
    }))
}

/// `∂y/∂𝒜` by central differences for `y = max_k cos(query, (𝒜 X W_v + X)_k)`,
/// the query's top-1 similarity against the refined gallery nodes.
pub fn top1_score_gradient(attention: ArrayView2<f64>, x: ArrayView2<f64>, w_v: ArrayView2<f64>, query: ArrayView1<f64>, h: f64) -> Result<Array2<f64>> {
    if attention.nrows() != x.nrows() || attention.ncols() != x.nrows() || w_v.dim() != (x.ncols(), x.ncols()) || query.len() != x.ncols() {
        return Err(invalid_input("attention, features, W_v and query shapes disagree"));
    }
    if !(h > 0.0) {
        return Err(invalid_param("finite-difference step must be positive"));
    }
    let xv = x.dot(&w_v);
    let qn = query.dot(&query).sqrt();
    if qn == 0.0 {
        return Err(Error::DegenerateInput("query has zero norm".into()));
    }
    let score = |a: &Array2<f64>| {
        let refined = a.dot(&xv) + x;
        refined
            .rows()
            .into_iter()
            .map(|r| r.dot(&query) / (r.dot(&r).sqrt() * qn))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut a = attention.to_owned();
    let mut grad = Array2::zeros(a.raw_dim());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let orig = a[[i, j]];
            a[[i, j]] = orig + h;
            let up = score(&a);
            a[[i, j]] = orig - h;
            let down = score(&a);
            a[[i, j]] = orig;
            grad[[i, j]] = (up - down) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// `R̂ + √((KL + ln(2√n/δ)) / (2n))`.
pub fn pac_bound(empirical_risk: f64, kl: f64, n: usize, delta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&empirical_risk) {
        return Err(invalid_param(format!("empirical risk must lie in [0,1], got {empirical_risk}")));
    }
    if !(kl >= 0.0 && kl.is_finite()) {
        return Err(invalid_param(format!("KL must be finite and nonnegative, got {kl}")));
    }
    if n == 0 {
        return Err(invalid_param("n must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid_param(format!("delta must lie in (0,1), got {delta}")));
    }
    let n = n as f64;
    Ok(empirical_risk + ((kl + (2.0 * n.sqrt() / delta).ln()) / (2.0 * n)).sqrt())
}
