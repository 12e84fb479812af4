use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array1;
use serde::Serialize;

use topoguard::accountant::{aggregate_budget_report, LedgerConfig, PrivacyLedger, SpendDecision, DEFAULT_DELTA_PRIME};
use topoguard::act::{act_id_loss_with, act_total_with, act_triplet_loss_with, ActConfig, LabeledBatch, MarginState};
use topoguard::audit::{batch_compactness, membership_dataset, mean_std, pac_bound, parse_epsilon, privacy_utility_sweep, run_mia_audit, MiaReport};
use topoguard::camera_graph::{lipschitz_perturbation_bound, perturbation_bound, CameraGraph, CameraLayout};
use topoguard::dp::{privatize_rows, DpParams};
use topoguard::embeddings::EmbeddingBatch;
use topoguard::geo_attention::{self, AttentionParams};
use topoguard::index::{evaluate, private_query, EvalOptions, GalleryIndex, HnswParams, IndexMode, PrivateQueryOutcome, QueryResult};
use topoguard::pipeline::{
    class_indices, generate_synthetic, mean_prototypes, run_pipeline, seed_from_env, sweep_config, DpSettings, IndexSettings, PipelineConfig, SweepSettings,
    SyntheticSpec, SEED_ENV,
};
use topoguard::temporal_graph::{stability_bound, tgn_step, TemporalSnapshot, TgnConfigFile};
use topoguard::transport::{
    exact_ot_oracle, read_matrix_csv, read_vector_csv, sinkhorn_with, SinkhornMethod, SinkhornOptions, TransportProblem, DEFAULT_EPSILON_OT, DEFAULT_MAX_ITERS,
    DEFAULT_TOL, ORACLE_MAX_CELLS,
};

#[derive(Parser)]
#[command(name = "topoguard", version, about = "Topology-guided private embeddings for multi-camera retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Camera affinity graphs.
    #[command(subcommand)]
    Graph(GraphCmd),
    /// Geometry-biased attention.
    #[command(subcommand)]
    Attn(AttnCmd),
    /// Temporal message passing.
    #[command(subcommand)]
    Tgn(TgnCmd),
    /// ACT losses.
    #[command(subcommand)]
    Loss(LossCmd),
    /// Entropic optimal transport.
    #[command(subcommand)]
    Ot(OtCmd),
    /// Clip and noise an embedding file.
    Privatize(PrivatizeArgs),
    /// Privacy ledger.
    #[command(subcommand)]
    Account(AccountCmd),
    /// Gallery index.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Membership inference and privacy/utility sweeps.
    #[command(subcommand)]
    Audit(AuditCmd),
    /// Embedding diagnostics.
    #[command(subcommand)]
    Diagnose(DiagnoseCmd),
    /// Generate a synthetic identity dataset and its camera graph.
    Synth(SynthArgs),
    /// End-to-end pipeline.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Subcommand)]
enum GraphCmd {
    Build {
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    PerturbBound {
        /// Camera displacement in metres.
        #[arg(long = "dp")]
        delta_p: f64,
        #[arg(long)]
        sigma: f64,
    },
}

#[derive(Subcommand)]
enum AttnCmd {
    Refine {
        #[arg(long)]
        graph: PathBuf,
        /// One row per camera, in graph order.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum TgnCmd {
    Step {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        cfg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum LossCmd {
    Eval {
        /// Labelled embeddings.
        #[arg(long)]
        batch: PathBuf,
        /// ActConfig JSON; defaults when absent.
        #[arg(long)]
        cfg: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum OtCmd {
    Solve {
        #[arg(long)]
        cost: PathBuf,
        /// Row marginal; uniform when absent.
        #[arg(long)]
        p: Option<PathBuf>,
        /// Column marginal; uniform when absent.
        #[arg(long)]
        q: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_EPSILON_OT)]
        eps: f64,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
        max_iters: usize,
        /// Weight of the reported marginal KL term.
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long, value_enum, default_value_t = MethodArg::Log)]
        method: MethodArg,
        /// Also report the unregularised optimum (at most 64 cells).
        #[arg(long)]
        exact: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Log,
    Scaling,
}

#[derive(Args, Clone)]
struct LedgerArgs {
    #[arg(long, default_value_t = DEFAULT_DELTA_PRIME)]
    delta_prime: f64,
    #[arg(long, default_value_t = 10.0)]
    budget_eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    budget_delta: f64,
}

impl LedgerArgs {
    fn config(&self) -> LedgerConfig {
        LedgerConfig { delta_prime: self.delta_prime, budget_epsilon: self.budget_eps, budget_delta: self.budget_delta }
    }
}

#[derive(Args)]
struct PrivatizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "B", default_value_t = 1.0)]
    clip_radius: f64,
    #[arg(long, value_parser = parse_epsilon)]
    eps: f64,
    #[arg(long, default_value_t = 1e-6)]
    delta: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Ledger charged with the release; refused spends write nothing.
    #[arg(long)]
    ledger: Option<PathBuf>,
    #[arg(long, default_value = "privatize")]
    tag: String,
    #[command(flatten)]
    budget: LedgerArgs,
}

#[derive(Subcommand)]
enum AccountCmd {
    Status {
        #[arg(long)]
        ledger: PathBuf,
        #[command(flatten)]
        budget: LedgerArgs,
    },
    Spend {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value = "query")]
        tag: String,
        #[command(flatten)]
        budget: LedgerArgs,
    },
}

#[derive(Args, Clone, Copy)]
struct HnswArgs {
    /// Brute-force index instead of the navigable graph.
    #[arg(long)]
    exact: bool,
    #[arg(long, default_value_t = 16)]
    m: usize,
    #[arg(long, default_value_t = 200)]
    ef_construction: usize,
    #[arg(long, default_value_t = 64)]
    ef_search: usize,
}

impl HnswArgs {
    fn settings(&self, seed: u64) -> IndexSettings {
        IndexSettings {
            mode: if self.exact { IndexMode::Exact } else { IndexMode::Hnsw },
            hnsw: HnswParams { m: self.m, ef_construction: self.ef_construction, ef_search: self.ef_search, seed },
        }
    }
}

#[derive(Subcommand)]
enum IndexCmd {
    Build {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hnsw: HnswArgs,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
    },
    Query {
        #[arg(long)]
        index: PathBuf,
        /// Embedding file; every row is a query.
        #[arg(long)]
        query: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        ef_search: Option<usize>,
        /// Brute-force search regardless of the index mode.
        #[arg(long)]
        exact: bool,
        /// Privatize each query and charge this ledger.
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long = "B", default_value_t = 1.0)]
        clip_radius: f64,
        #[arg(long, default_value_t = 0.3)]
        eps: f64,
        #[arg(long, default_value_t = 1e-6)]
        delta: f64,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        budget: LedgerArgs,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
        k: Vec<usize>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
}

#[derive(Subcommand)]
enum AuditCmd {
    Mia {
        /// Member embeddings; with --nonmembers. A synthetic pair is used when absent.
        #[arg(long, requires = "nonmembers")]
        members: Option<PathBuf>,
        #[arg(long, requires = "members")]
        nonmembers: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 0.2)]
        shift: f64,
        #[arg(long, default_value_t = 0.1)]
        spread: f64,
        #[arg(long, value_parser = parse_epsilon, default_value = "inf")]
        eps: f64,
        #[arg(long = "B", default_value_t = 1.0)]
        clip_radius: f64,
        #[arg(long, default_value_t = 1e-6)]
        delta: f64,
        /// Number of audit seeds, starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    Sweep {
        /// Clean gallery embeddings.
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_epsilon, default_value = "inf,8,2,0.5")]
        eps: Vec<f64>,
        /// Independent noise draws per ε.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long = "B", default_value_t = 1.0)]
        clip_radius: f64,
        #[arg(long, default_value_t = 1e-6)]
        delta: f64,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
        k: Vec<usize>,
        /// Use the navigable graph instead of the exact index.
        #[arg(long)]
        hnsw: bool,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_json: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
}

#[derive(Subcommand)]
enum DiagnoseCmd {
    Compactness {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    PacBound {
        #[arg(long)]
        risk: f64,
        #[arg(long)]
        kl: f64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        delta: f64,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// SyntheticSpec JSON; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    intra_sigma: Option<f64>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    view_shift: Option<f64>,
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    graph_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PipelineCmd {
    Run {
        /// PipelineConfig JSON; defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed and TOPOGUARD_SEED.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_batch(path: &Path) -> Result<EmbeddingBatch> {
    EmbeddingBatch::load(path).with_context(|| format!("reading embeddings from {}", path.display()))
}

fn load_csv_file<T>(path: &Path, read: impl FnOnce(fs::File) -> topoguard::Result<T>) -> Result<T> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read(f).with_context(|| format!("parsing {}", path.display()))
}

fn csv_lines(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

fn graph(cmd: GraphCmd) -> Result<()> {
    match cmd {
        GraphCmd::Build { layout, out } => {
            let g = CameraLayout::load(&layout).with_context(|| format!("reading layout {}", layout.display()))?.build()?;
            g.save(&out)?;
            emit(&serde_json::json!({ "cameras": g.len(), "sigma": g.bandwidth_sigma, "out": out }), None)
        }
        GraphCmd::PerturbBound { delta_p, sigma } => emit(
            &serde_json::json!({
                "delta_p": delta_p,
                "sigma": sigma,
                "bound": perturbation_bound(delta_p, sigma)?,
                "lipschitz_bound": lipschitz_perturbation_bound(delta_p, sigma)?,
            }),
            None,
        ),
    }
}

fn attn(cmd: AttnCmd) -> Result<()> {
    let AttnCmd::Refine { graph, features, params, out } = cmd;
    let g = CameraGraph::load(&graph)?;
    let mut batch = load_batch(&features)?;
    let p = AttentionParams::load(&params).with_context(|| format!("reading {}", params.display()))?;
    let pass = geo_attention::forward(batch.features.view(), &g, &p)?;
    batch.features = pass.refined;
    batch.save(&out)?;
    let row_err = pass.attention.rows().into_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    emit(&serde_json::json!({ "rows": batch.len(), "max_row_sum_error": row_err, "out": out }), None)
}

fn tgn(cmd: TgnCmd) -> Result<()> {
    let TgnCmd::Step { graph, snapshot, cfg, out } = cmd;
    let g = CameraGraph::load(&graph)?;
    let batch = load_batch(&snapshot)?;
    let (cfg, attn) = TgnConfigFile::load(&cfg)?.into_parts()?;
    let ts = batch.timestamps.clone().unwrap_or_else(|| vec![0.0; batch.len()]);
    let snap = TemporalSnapshot::new(batch.features.clone(), ts);
    let bound = stability_bound(&snap, &g, &attn, &cfg)?;
    let next = tgn_step(&snap, &g, &attn, &cfg)?;
    let holds = bound.holds_for(snap.features.view(), next.view());
    let mut result = batch;
    result.features = next;
    result.save(&out)?;
    emit(&serde_json::json!({ "bound": bound, "bound_holds": holds, "out": out }), None)
}

fn loss(cmd: LossCmd) -> Result<()> {
    let LossCmd::Eval { batch, cfg } = cmd;
    let data = load_batch(&batch)?;
    let cfg: ActConfig = match cfg {
        Some(p) => serde_json::from_str(&fs::read_to_string(&p)?)?,
        None => ActConfig::default(),
    };
    cfg.validate()?;
    let (classes, y) = class_indices(data.labels_required()?);
    let prototypes = mean_prototypes(&data.features, &y, classes.len());
    let mut margins = MarginState::default();
    margins.update(data.features.view(), &y)?;
    margins.refresh(&cfg)?;
    let gammas = margins.gamma_vector(classes.len(), &cfg);
    let lb = LabeledBatch::new(data.features.clone(), y, prototypes)?;
    let id = act_id_loss_with(&lb, &gammas, &cfg)?.value;
    let tri = act_triplet_loss_with(&lb, &gammas, &cfg).map(|o| o.value).ok();
    let act = act_total_with(&lb, &gammas, &cfg).map(|o| o.value).ok();
    let per_identity: serde_json::Map<String, serde_json::Value> = classes
        .iter()
        .zip(&gammas)
        .enumerate()
        .map(|(c, (l, g))| (l.to_string(), serde_json::json!({ "gamma": g, "kl": margins.per_identity_kl.get(&(c as u32)) })))
        .collect();
    emit(&serde_json::json!({ "loss_id": id, "loss_tri": tri, "loss_act": act, "identities": per_identity }), None)
}

fn ot(cmd: OtCmd) -> Result<()> {
    let OtCmd::Solve { cost, p, q, eps, tol, max_iters, lambda, method, exact, out } = cmd;
    let c = load_csv_file(&cost, read_matrix_csv)?;
    let (n, m) = c.dim();
    let p = match p {
        Some(path) => load_csv_file(&path, read_vector_csv)?,
        None => Array1::from_elem(n, 1.0 / n as f64),
    };
    let q = match q {
        Some(path) => load_csv_file(&path, read_vector_csv)?,
        None => Array1::from_elem(m, 1.0 / m as f64),
    };
    let problem = TransportProblem::new(c, p, q).with_epsilon(eps).with_lambda(lambda);
    let method = match method {
        MethodArg::Log => SinkhornMethod::Log,
        MethodArg::Scaling => SinkhornMethod::Scaling,
    };
    let plan = sinkhorn_with(&problem, &SinkhornOptions { tol, max_iters, method, ..SinkhornOptions::default() })?;
    let exact_cost = if exact {
        if n * m > ORACLE_MAX_CELLS {
            bail!("--exact supports at most {ORACLE_MAX_CELLS} cells, got {}", n * m);
        }
        Some(exact_ot_oracle(&problem)?)
    } else {
        None
    };
    let mut doc = serde_json::to_value(&plan)?;
    doc["exact_cost"] = serde_json::json!(exact_cost);
    emit(&doc, out.as_deref())
}

fn privatize_cmd(a: PrivatizeArgs) -> Result<()> {
    let input = load_batch(&a.input)?;
    let dp = DpParams::calibrated(a.clip_radius, a.eps, a.delta, a.seed)?;
    let mut totals = None;
    if let Some(path) = &a.ledger {
        let ledger = PrivacyLedger::open(path, a.budget.config())?;
        match ledger.try_spend(dp.epsilon, dp.delta, &a.tag)? {
            SpendDecision::Accepted { epsilon_total, delta_total } => totals = Some((epsilon_total, delta_total)),
            SpendDecision::Refused { epsilon_total, delta_total } => {
                bail!("budget refused: the release would bring the ledger to ε={epsilon_total}, δ={delta_total}")
            }
        }
    }
    let mut output = input.clone();
    output.features = privatize_rows(input.features.view(), &dp, 0);
    output.provenance = serde_json::json!({ "privatization": dp, "source": input.provenance });
    output.save(&a.out)?;
    emit(&serde_json::json!({ "params": dp, "rows": output.len(), "ledger_totals": totals, "out": a.out }), None)
}

fn account(cmd: AccountCmd) -> Result<()> {
    match cmd {
        AccountCmd::Status { ledger, budget } => {
            let l = PrivacyLedger::open(&ledger, budget.config())?;
            emit(&serde_json::json!({ "report": aggregate_budget_report(&l), "chain_head": l.chain_head() }), None)
        }
        AccountCmd::Spend { ledger, eps, delta, tag, budget } => {
            let l = PrivacyLedger::open(&ledger, budget.config())?;
            let decision = l.try_spend(eps, delta, &tag)?;
            emit(&decision, None)?;
            if !decision.accepted() {
                bail!("spend refused");
            }
            Ok(())
        }
    }
}

fn query_rows(result: &QueryResult, qi: usize) -> impl Iterator<Item = String> + '_ {
    result.hits.iter().enumerate().map(move |(r, h)| format!("{qi},{},{},{}", r + 1, h.id, h.dissimilarity))
}

fn index(cmd: IndexCmd) -> Result<()> {
    match cmd {
        IndexCmd::Build { input, out, hnsw, seed } => {
            let batch = load_batch(&input)?;
            let idx = GalleryIndex::build(&batch, &hnsw.settings(seed).build_options())?;
            idx.save(&out)?;
            emit(&serde_json::json!({ "count": idx.len(), "dim": idx.dim(), "mode": idx.mode(), "params": idx.params(), "metadata": idx.metadata() }), None)
        }
        IndexCmd::Query { index, query, k, ef_search, exact, ledger, clip_radius, eps, delta, seed, budget, format } => {
            let idx = GalleryIndex::load(&index)?;
            let queries = load_batch(&query)?;
            let mut outcomes = Vec::with_capacity(queries.len());
            let private = match &ledger {
                Some(path) => Some((PrivacyLedger::open(path, budget.config())?, DpParams::calibrated(clip_radius, eps, delta, seed)?)),
                None => None,
            };
            for row in queries.features.rows() {
                let outcome = match &private {
                    Some((l, dp)) => private_query(&idx, row, k, dp, l)?,
                    None => {
                        let result = if exact {
                            idx.query_exact(row, k)?
                        } else {
                            idx.query_with_ef(row, k, ef_search.unwrap_or(idx.params().ef_search))?
                        };
                        PrivateQueryOutcome::Answered { result, epsilon_total: 0.0, delta_total: 0.0 }
                    }
                };
                outcomes.push(outcome);
            }
            match format {
                Format::Json if private.is_some() => emit(&outcomes, None),
                Format::Json => {
                    let results: Vec<&QueryResult> = outcomes
                        .iter()
                        .filter_map(|o| match o {
                            PrivateQueryOutcome::Answered { result, .. } => Some(result),
                            PrivateQueryOutcome::Refused { .. } => None,
                        })
                        .collect();
                    emit(&results, None)
                }
                Format::Csv => {
                    let mut rows = Vec::new();
                    for (qi, o) in outcomes.iter().enumerate() {
                        if let PrivateQueryOutcome::Answered { result, .. } = o {
                            rows.extend(query_rows(result, qi));
                        }
                    }
                    print!("{}", csv_lines("query,rank,id,dissimilarity", rows));
                    Ok(())
                }
            }
        }
        IndexCmd::Eval { index, queries, k, format } => {
            let idx = GalleryIndex::load(&index)?;
            let q = load_batch(&queries)?;
            let m = evaluate(&idx, &q, &EvalOptions { ks: k, exclude_ids: None })?;
            match format {
                Format::Json => emit(&m, None),
                Format::Csv => {
                    let mut rows: Vec<String> = m.rank_k.iter().map(|(k, v)| format!("rank{k},{v}")).collect();
                    rows.push(format!("mAP,{}", m.map));
                    rows.push(format!("mINP,{}", m.minp));
                    rows.push(format!("queries,{}", m.queries));
                    print!("{}", csv_lines("metric,value", rows));
                    Ok(())
                }
            }
        }
    }
}

fn audit(cmd: AuditCmd) -> Result<()> {
    match cmd {
        AuditCmd::Mia { members, nonmembers, n, dim, shift, spread, eps, clip_radius, delta, seeds, seed, format } => {
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let dp = DpParams::calibrated(clip_radius, eps, delta, seed)?;
            let files = match (members, nonmembers) {
                (Some(m), Some(nm)) => Some((load_batch(&m)?.features, load_batch(&nm)?.features)),
                _ => None,
            };
            let mut reports: Vec<(u64, MiaReport)> = Vec::new();
            for s in seed..seed + seeds {
                let (m, nm) = match &files {
                    Some(pair) => pair.clone(),
                    None => membership_dataset(n, dim, shift, spread, s),
                };
                reports.push((s, run_mia_audit(m.view(), nm.view(), &dp, s)?));
            }
            match format {
                Format::Json => {
                    let adv: Vec<f64> = reports.iter().map(|(_, r)| r.advantage).collect();
                    let (mean, std) = mean_std(&adv);
                    let runs: Vec<_> = reports.iter().map(|(s, r)| serde_json::json!({ "seed": s, "report": r })).collect();
                    emit(&serde_json::json!({ "runs": runs, "advantage_mean": mean, "advantage_std": std }), None)
                }
                Format::Csv => {
                    let rows = reports.iter().map(|(s, r)| {
                        let eps = if r.epsilon_setting.is_finite() { r.epsilon_setting.to_string() } else { "inf".into() };
                        format!("{s},{},{},{eps},{},{},{}", r.attack_precision, r.advantage, r.noise_sigma, r.trial_count, r.threshold)
                    });
                    print!("{}", csv_lines("seed,attack_precision,advantage,epsilon,noise_sigma,trial_count,threshold", rows));
                    Ok(())
                }
            }
        }
        AuditCmd::Sweep { gallery, queries, eps, seeds, clip_radius, delta, seed, k, hnsw, out_csv, out_json, format } => {
            let g = load_batch(&gallery)?;
            let q = load_batch(&queries)?;
            let index = IndexSettings { mode: if hnsw { IndexMode::Hnsw } else { IndexMode::Exact }, ..IndexSettings::default() };
            let dp = DpSettings { clip_radius_b: clip_radius, epsilon: f64::INFINITY, delta };
            let cfg = sweep_config(&SweepSettings { epsilons: eps, runs: seeds }, &dp, &index, &k, seed)?;
            let table = privacy_utility_sweep(&g, &q, &cfg)?;
            let csv = table.to_csv_string()?;
            if let Some(p) = &out_csv {
                fs::write(p, &csv)?;
            }
            if let Some(p) = &out_json {
                emit(&table, Some(p))?;
            }
            match format {
                Format::Json => emit(&table, None),
                Format::Csv => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
    }
}

fn diagnose(cmd: DiagnoseCmd) -> Result<()> {
    match cmd {
        DiagnoseCmd::Compactness { input, format } => {
            let report = batch_compactness(&load_batch(&input)?)?;
            match format {
                Format::Json => emit(&report, None),
                Format::Csv => {
                    let rows = report.clusters.iter().map(|c| format!("{},{},{},{}", c.label, c.size, c.intra_mean, c.nearest_gap));
                    print!("{}", csv_lines("label,size,intra_mean,nearest_gap", rows));
                    Ok(())
                }
            }
        }
        DiagnoseCmd::PacBound { risk, kl, n, delta } => emit(&serde_json::json!({ "bound": pac_bound(risk, kl, n, delta)? }), None),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => SyntheticSpec::default(),
    };
    spec.identities = a.identities.unwrap_or(spec.identities);
    spec.samples_per_identity = a.samples.unwrap_or(spec.samples_per_identity);
    spec.dim = a.dim.unwrap_or(spec.dim);
    spec.intra_sigma = a.intra_sigma.unwrap_or(spec.intra_sigma);
    spec.inter_separation = a.separation.unwrap_or(spec.inter_separation);
    spec.cameras = a.cameras.unwrap_or(spec.cameras);
    spec.camera_view_shift = a.view_shift.unwrap_or(spec.camera_view_shift);
    spec.seed = a.seed.unwrap_or(spec.seed);
    let (batch, graph) = generate_synthetic(&spec)?;
    batch.save(&a.out)?;
    if let Some(p) = &a.graph_out {
        graph.save(p)?;
    }
    emit(&serde_json::json!({ "rows": batch.len(), "dim": batch.dim(), "spec": spec }), None)
}

fn pipeline(cmd: PipelineCmd) -> Result<()> {
    let PipelineCmd::Run { config, out, seed, epochs } = cmd;
    let mut cfg = match &config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed_from_env()? {
        cfg.seed = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let result = run_pipeline(&cfg, &out).with_context(|| format!("pipeline failed; partial manifest in {}", out.join("manifest.json").display()))?;
    emit(&serde_json::json!({ "manifest": result.manifest, "metrics": result.metrics }), None)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Graph(c) => graph(c),
        Command::Attn(c) => attn(c),
        Command::Tgn(c) => tgn(c),
        Command::Loss(c) => loss(c),
        Command::Ot(c) => ot(c),
        Command::Privatize(a) => privatize_cmd(a),
        Command::Account(c) => account(c),
        Command::Index(c) => index(c),
        Command::Audit(c) => audit(c),
        Command::Diagnose(c) => diagnose(c),
        Command::Synth(a) => synth(a),
        Command::Pipeline(c) => pipeline(c),
    }
}
