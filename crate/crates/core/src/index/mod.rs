//! Top-K cosine retrieval over a gallery of embeddings.
//!
//! Vectors are L2-normalised at build time so dissimilarity is `1 − dot`.
//! Two modes: an exact scan and a layered proximity graph (HNSW). Ties are
//! broken by the smaller gallery id in both.
//!
//! Index file layout (`TGIX`, little-endian):
//!
//! ```text
//! "TGIX" | u32 version=1 | u8 mode | u32 dim | u32 count
//! u32 m | u32 ef_construction | u32 ef_search | u64 seed | u64 created_at
//! [u8; 32] privatization hash | u8 has_labels
//! [u64 id; count] | [u32 label; count] if has_labels | count*dim f64 unit vectors
//! graph (mode 1): u32 entry | u32 max_level | per node: u32 levels, per level: u32 len, [u32; len]
//! ```

mod hnsw;
mod metrics;

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accountant::{PrivacyLedger, SpendDecision};
use crate::dp::{privatize, DpParams};
use crate::embeddings::EmbeddingBatch;
use crate::error::{invalid_input, invalid_param, Error, Result};
use hnsw::{HnswGraph, Points, Scored};

pub use hnsw::HnswParams;
pub use metrics::{average_precision, inverse_negative_penalty, ReidMetrics};

pub const INDEX_MAGIC: &[u8; 4] = b"TGIX";
pub const INDEX_VERSION: u32 = 1;
/// Noise stream reserved for query privatization, disjoint from gallery ordinals.
pub const QUERY_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexMode {
    #[default]
    Exact,
    Hnsw,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub mode: IndexMode,
    pub hnsw: HnswParams,
    /// Stored verbatim; left at 0 for byte-reproducible files.
    pub created_at: u64,
    /// Gallery ids; row ordinals when absent.
    pub ids: Option<Vec<u64>>,
}

impl BuildOptions {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn hnsw(params: HnswParams) -> Self {
        Self { mode: IndexMode::Hnsw, hnsw: params, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildMetadata {
    /// SHA-256 of the gallery's provenance JSON (privatization parameters, seed).
    pub privatization_hash: String,
    pub created_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u64,
    pub dissimilarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub hits: Vec<Hit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    dim: usize,
    ids: Vec<u64>,
    labels: Option<Vec<u32>>,
    vectors: Vec<f64>,
    mode: IndexMode,
    params: HnswParams,
    meta: BuildMetadata,
    graph: Option<HnswGraph>,
}

fn unit(v: ArrayView1<f64>) -> Option<Vec<f64>> {
    let n = v.dot(&v).sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

impl GalleryIndex {
    pub fn build(embeddings: &EmbeddingBatch, opts: &BuildOptions) -> Result<Self> {
        embeddings.validate()?;
        let count = embeddings.len();
        if count == 0 {
            return Err(invalid_input("cannot index an empty gallery"));
        }
        if count > u32::MAX as usize {
            return Err(Error::SizeLimit(count));
        }
        let ids = opts.ids.clone().unwrap_or_else(|| (0..count as u64).collect());
        if ids.len() != count {
            return Err(invalid_input("one id per embedding is required"));
        }
        if ids.iter().collect::<HashSet<_>>().len() != count {
            return Err(invalid_input("gallery ids must be unique"));
        }
        if opts.mode == IndexMode::Hnsw && (opts.hnsw.m < 2 || opts.hnsw.ef_construction == 0 || opts.hnsw.ef_search == 0) {
            return Err(invalid_param("HNSW needs m >= 2 and positive beams"));
        }
        let dim = embeddings.dim();
        let mut vectors = Vec::with_capacity(count * dim);
        for (row, id) in embeddings.features.rows().into_iter().zip(&ids) {
            let u = unit(row).ok_or_else(|| Error::DegenerateInput(format!("embedding {id} has zero norm")))?;
            vectors.extend(u);
        }
        let hash = Sha256::digest(serde_json::to_string(&embeddings.provenance)?.as_bytes());
        let graph = match opts.mode {
            IndexMode::Exact => None,
            IndexMode::Hnsw => Some(HnswGraph::build(Points { data: &vectors, dim }, count, &opts.hnsw)),
        };
        Ok(Self {
            dim,
            ids,
            labels: embeddings.labels.clone(),
            vectors,
            mode: opts.mode,
            params: opts.hnsw,
            meta: BuildMetadata { privatization_hash: hex::encode(hash), created_at: opts.created_at },
            graph,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn metadata(&self) -> &BuildMetadata {
        &self.meta
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Stored unit vectors, one row per gallery item.
    pub fn vectors(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.len(), self.dim), self.vectors.clone()).expect("shape fixed at build")
    }

    fn points(&self) -> Points<'_> {
        Points { data: &self.vectors, dim: self.dim }
    }

    fn normalized_query(&self, q: ArrayView1<f64>, k: usize) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(invalid_param("k must be at least 1"));
        }
        if q.len() != self.dim {
            return Err(invalid_input(format!("query has dimension {}, index has {}", q.len(), self.dim)));
        }
        unit(q).ok_or_else(|| Error::DegenerateInput("query has zero norm".into()))
    }

    fn hits(&self, mut scored: Vec<Scored>, k: usize) -> QueryResult {
        scored.sort_by(|a, b| a.dist.total_cmp(&b.dist).then(self.ids[a.id as usize].cmp(&self.ids[b.id as usize])));
        scored.truncate(k);
        QueryResult {
            hits: scored
                .into_iter()
                .map(|s| Hit { id: self.ids[s.id as usize], dissimilarity: s.dist.clamp(0.0, 2.0) })
                .collect(),
        }
    }

    /// Every gallery item ordered by `(1 − cos, id)`, as internal positions.
    fn full_ranking(&self, q: &[f64]) -> Vec<Scored> {
        let pts = self.points();
        let mut all: Vec<Scored> = (0..self.len() as u32).map(|i| Scored { dist: pts.dist_to(q, i), id: i }).collect();
        all.sort_by(|a, b| a.dist.total_cmp(&b.dist).then(self.ids[a.id as usize].cmp(&self.ids[b.id as usize])));
        all
    }

    /// Top-K by the index's own mode.
    pub fn query(&self, q: ArrayView1<f64>, k: usize) -> Result<QueryResult> {
        self.query_with_ef(q, k, self.params.ef_search)
    }

    /// Top-K with an explicit search beam (ignored in exact mode).
    pub fn query_with_ef(&self, q: ArrayView1<f64>, k: usize, ef_search: usize) -> Result<QueryResult> {
        let q = self.normalized_query(q, k)?;
        match &self.graph {
            Some(g) if self.mode == IndexMode::Hnsw => {
                // Widen by one so equal-distance neighbours of the cut can be re-ordered by id.
                let found = g.search(self.points(), &q, k + 1, ef_search.max(k + 1));
                Ok(self.hits(found, k))
            }
            _ => Ok(self.query_exact_normalized(&q, k)),
        }
    }

    /// Exact top-K regardless of mode.
    pub fn query_exact(&self, q: ArrayView1<f64>, k: usize) -> Result<QueryResult> {
        let q = self.normalized_query(q, k)?;
        Ok(self.query_exact_normalized(&q, k))
    }

    fn query_exact_normalized(&self, q: &[f64], k: usize) -> QueryResult {
        let pts = self.points();
        let all: Vec<Scored> = (0..self.len() as u32).map(|i| Scored { dist: pts.dist_to(q, i), id: i }).collect();
        if k >= all.len() {
            return self.hits(all, k);
        }
        let key = |s: &Scored| (s.dist, self.ids[s.id as usize]);
        let mut all = all;
        all.select_nth_unstable_by(k - 1, |a, b| {
            let (da, ia) = key(a);
            let (db, ib) = key(b);
            da.total_cmp(&db).then(ia.cmp(&ib))
        });
        all.truncate(k);
        self.hits(all, k)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_u32::<LittleEndian>(INDEX_VERSION)?;
        w.write_u8(match self.mode {
            IndexMode::Exact => 0,
            IndexMode::Hnsw => 1,
        })?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(self.len() as u32)?;
        for v in [self.params.m, self.params.ef_construction, self.params.ef_search] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        w.write_u64::<LittleEndian>(self.params.seed)?;
        w.write_u64::<LittleEndian>(self.meta.created_at)?;
        let hash = hex::decode(&self.meta.privatization_hash).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(&hash)?;
        w.write_u8(self.labels.is_some() as u8)?;
        for id in &self.ids {
            w.write_u64::<LittleEndian>(*id)?;
        }
        if let Some(labels) = &self.labels {
            for l in labels {
                w.write_u32::<LittleEndian>(*l)?;
            }
        }
        for x in &self.vectors {
            w.write_f64::<LittleEndian>(*x)?;
        }
        if let Some(g) = &self.graph {
            w.write_u32::<LittleEndian>(g.entry)?;
            w.write_u32::<LittleEndian>(g.max_level as u32)?;
            for node in &g.links {
                w.write_u32::<LittleEndian>(node.len() as u32)?;
                for layer in node {
                    w.write_u32::<LittleEndian>(layer.len() as u32)?;
                    for n in layer {
                        w.write_u32::<LittleEndian>(*n)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_owned());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(fmt("not a TGIX index file"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let mode = match r.read_u8()? {
            0 => IndexMode::Exact,
            1 => IndexMode::Hnsw,
            other => return Err(Error::Format(format!("unknown index mode {other}"))),
        };
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let m = r.read_u32::<LittleEndian>()? as usize;
        let ef_construction = r.read_u32::<LittleEndian>()? as usize;
        let ef_search = r.read_u32::<LittleEndian>()? as usize;
        let seed = r.read_u64::<LittleEndian>()?;
        let created_at = r.read_u64::<LittleEndian>()?;
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash)?;
        let has_labels = r.read_u8()? != 0;
        let ids = (0..count).map(|_| r.read_u64::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?;
        let labels = if has_labels {
            Some((0..count).map(|_| r.read_u32::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?)
        } else {
            None
        };
        let mut vectors = vec![0.0; count * dim];
        r.read_f64_into::<LittleEndian>(&mut vectors)?;
        let graph = if mode == IndexMode::Hnsw {
            let entry = r.read_u32::<LittleEndian>()?;
            let max_level = r.read_u32::<LittleEndian>()? as usize;
            let mut links = Vec::with_capacity(count);
            for _ in 0..count {
                let levels = r.read_u32::<LittleEndian>()? as usize;
                let mut node = Vec::with_capacity(levels);
                for _ in 0..levels {
                    let len = r.read_u32::<LittleEndian>()? as usize;
                    let layer = (0..len).map(|_| r.read_u32::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?;
                    if layer.iter().any(|&n| n as usize >= count) {
                        return Err(fmt("graph link out of range"));
                    }
                    node.push(layer);
                }
                links.push(node);
            }
            if entry as usize >= count.max(1) {
                return Err(fmt("graph entry out of range"));
            }
            Some(HnswGraph { links, entry, max_level })
        } else {
            None
        };
        Ok(Self {
            dim,
            ids,
            labels,
            vectors,
            mode,
            params: HnswParams { m, ef_construction, ef_search, seed },
            meta: BuildMetadata { privatization_hash: hex::encode(hash), created_at },
            graph,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum PrivateQueryOutcome {
    Answered { result: QueryResult, epsilon_total: f64, delta_total: f64 },
    /// Ledger totals at the time of refusal; no result is released.
    Refused { epsilon_total: f64, delta_total: f64, reason: String },
}

/// Privatizes `q`, charges `(ε, δ)` to the ledger and answers only if the
/// spend is accepted. The draw counter is the ledger length, so successive
/// queries receive fresh noise.
pub fn private_query(index: &GalleryIndex, q: ArrayView1<f64>, k: usize, dp: &DpParams, ledger: &PrivacyLedger) -> Result<PrivateQueryOutcome> {
    let counter = ledger.records().len() as u64;
    let noisy = privatize(q, dp, QUERY_STREAM, counter);
    let refused = |reason: String| {
        let (epsilon_total, delta_total) = ledger.totals();
        PrivateQueryOutcome::Refused { epsilon_total, delta_total, reason }
    };
    match ledger.try_spend(dp.epsilon, dp.delta, "query") {
        Ok(SpendDecision::Accepted { epsilon_total, delta_total }) => {
            Ok(PrivateQueryOutcome::Answered { result: index.query(noisy.view(), k)?, epsilon_total, delta_total })
        }
        Ok(SpendDecision::Refused { .. }) => Ok(refused("budget exhausted".into())),
        Err(Error::Persistence(e)) => Ok(refused(format!("ledger unavailable: {e}"))),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Per query, a gallery id that must not be matched (the query itself).
    pub exclude_ids: Option<Vec<u64>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10], exclude_ids: None }
    }
}

/// Rank-k, mAP and mINP of labelled queries against the gallery labels.
/// mAP and mINP use the exact full ranking; Rank-k uses the index's own
/// search mode.
pub fn evaluate(index: &GalleryIndex, queries: &EmbeddingBatch, opts: &EvalOptions) -> Result<ReidMetrics> {
    let setup = |m: &str| Error::InvalidEvalSetup(m.to_owned());
    let g_labels = index.labels().ok_or_else(|| setup("gallery has no labels"))?;
    let q_labels = queries.labels.as_deref().ok_or_else(|| setup("queries have no labels"))?;
    if queries.len() != q_labels.len() {
        return Err(setup("query label count mismatch"));
    }
    if queries.is_empty() {
        return Err(setup("no queries"));
    }
    if opts.ks.is_empty() || opts.ks.contains(&0) {
        return Err(invalid_param("rank cut-offs must be positive"));
    }
    if let Some(ex) = &opts.exclude_ids {
        if ex.len() != queries.len() {
            return Err(setup("one exclusion id per query is required"));
        }
    }
    let k_max = *opts.ks.iter().max().expect("nonempty");
    let pos: HashMap<u64, u32> = index.ids.iter().enumerate().map(|(p, id)| (*id, p as u32)).collect();
    let mut hits = vec![0usize; opts.ks.len()];
    let (mut ap_sum, mut inp_sum) = (0.0, 0.0);
    for (qi, row) in queries.features.rows().into_iter().enumerate() {
        let label = q_labels[qi];
        let excluded = opts.exclude_ids.as_ref().map(|e| e[qi]);
        let q = index.normalized_query(row, 1)?;
        let ranking: Vec<Scored> = index
            .full_ranking(&q)
            .into_iter()
            .filter(|s| Some(index.ids[s.id as usize]) != excluded)
            .collect();
        let relevant: Vec<usize> = ranking
            .iter()
            .enumerate()
            .filter(|(_, s)| g_labels[s.id as usize] == label)
            .map(|(r, _)| r + 1)
            .collect();
        if relevant.is_empty() {
            return Err(Error::InvalidEvalSetup(format!("query {qi} label {label} has no gallery match")));
        }
        ap_sum += average_precision(&relevant);
        inp_sum += inverse_negative_penalty(&relevant);
        let top: Vec<u32> = match index.mode {
            IndexMode::Exact => ranking.iter().take(k_max).map(|s| s.id).collect(),
            IndexMode::Hnsw => {
                let extra = usize::from(excluded.is_some());
                index
                    .query_with_ef(row, k_max + extra, index.params.ef_search)?
                    .hits
                    .into_iter()
                    .filter(|h| Some(h.id) != excluded)
                    .take(k_max)
                    .map(|h| pos[&h.id])
                    .collect()
            }
        };
        for (slot, &k) in opts.ks.iter().enumerate() {
            if top.iter().take(k).any(|&p| g_labels[p as usize] == label) {
                hits[slot] += 1;
            }
        }
    }
    let n = queries.len() as f64;
    Ok(ReidMetrics {
        queries: queries.len(),
        rank_k: opts.ks.iter().zip(&hits).map(|(&k, &h)| (k, h as f64 / n)).collect(),
        map: ap_sum / n,
        minp: inp_sum / n,
    })
}
