//! Advanced-composition privacy accounting over a persistent spend ledger.
//!
//! The ledger file is JSON lines, one spend per line:
//! `{"ts":float,"eps":float,"delta":float,"tag":str,"chain":hex}` where
//! `chain = SHA-256(previous chain ‖ canonical record JSON)` and the first
//! record chains from 64 zeros. A final line without its newline is a torn
//! write and is discarded on open; any other malformed line is corruption.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid_param, Error, Result};

pub const DEFAULT_DELTA_PRIME: f64 = 1e-6;
pub const GENESIS_CHAIN: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpendRecord {
    #[serde(rename = "ts")]
    pub timestamp: f64,
    #[serde(rename = "eps")]
    pub epsilon_i: f64,
    #[serde(rename = "delta")]
    pub delta_i: f64,
    #[serde(rename = "tag")]
    pub operation_tag: String,
}

impl SpendRecord {
    pub fn new(epsilon_i: f64, delta_i: f64, tag: impl Into<String>) -> Self {
        Self { timestamp: 0.0, epsilon_i, delta_i, operation_tag: tag.into() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon_i > 0.0 && self.epsilon_i.is_finite()) {
            return Err(invalid_param(format!("spend epsilon must be positive, got {}", self.epsilon_i)));
        }
        if !(self.delta_i >= 0.0 && self.delta_i < 1.0) {
            return Err(invalid_param(format!("spend delta must lie in [0,1), got {}", self.delta_i)));
        }
        if !self.timestamp.is_finite() {
            return Err(invalid_param("timestamp must be finite"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct LedgerLine {
    #[serde(flatten)]
    record: SpendRecord,
    chain: String,
}

fn chain_next(prev: &str, record: &SpendRecord) -> String {
    let canonical = serde_json::to_string(record).expect("spend records always serialize");
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(canonical.as_bytes());
    hex::encode(h.finalize())
}

fn check_delta_prime(delta_prime: f64) -> Result<()> {
    if delta_prime > 0.0 && delta_prime < 1.0 {
        Ok(())
    } else {
        Err(invalid_param(format!("delta' must lie in (0,1), got {delta_prime}")))
    }
}

/// `ε_total = Σε + √(2 ln(1/δ′)) √(Σε²)`, `δ_total = Σδ + δ′`.
pub fn compose(records: &[SpendRecord], delta_prime: f64) -> Result<(f64, f64)> {
    check_delta_prime(delta_prime)?;
    let (mut sum, mut sum_sq, mut delta) = (0.0, 0.0, 0.0);
    for r in records {
        sum += r.epsilon_i;
        sum_sq += r.epsilon_i * r.epsilon_i;
        delta += r.delta_i;
    }
    Ok((sum + (2.0 * (1.0 / delta_prime).ln()).sqrt() * sum_sq.sqrt(), delta + delta_prime))
}

/// `T ε + ε √(2 T ln(1/δ′))`, the composition of `T` identical spends.
pub fn aggregate_epsilon(t: usize, epsilon_query: f64, delta_prime: f64) -> Result<f64> {
    check_delta_prime(delta_prime)?;
    let t = t as f64;
    Ok(t * epsilon_query + epsilon_query * (2.0 * t * (1.0 / delta_prime).ln()).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerConfig {
    pub delta_prime: f64,
    pub budget_epsilon: f64,
    pub budget_delta: f64,
}

impl LedgerConfig {
    pub fn new(budget_epsilon: f64, budget_delta: f64) -> Self {
        Self { delta_prime: DEFAULT_DELTA_PRIME, budget_epsilon, budget_delta }
    }

    pub fn validate(&self) -> Result<()> {
        check_delta_prime(self.delta_prime)?;
        if !(self.budget_epsilon >= 0.0) || !(self.budget_delta >= 0.0) {
            return Err(invalid_param("budgets must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "lowercase")]
pub enum SpendDecision {
    Accepted { epsilon_total: f64, delta_total: f64 },
    /// Totals that the spend would have produced.
    Refused { epsilon_total: f64, delta_total: f64 },
}

impl SpendDecision {
    pub fn accepted(&self) -> bool {
        matches!(self, SpendDecision::Accepted { .. })
    }
}

#[derive(Debug)]
struct LedgerState {
    records: Vec<SpendRecord>,
    chain: String,
}

/// Append-only spend ledger with budget enforcement. `try_spend` holds the
/// lock across the check and the durable append, so concurrent callers are
/// admitted in some serial order.
#[derive(Debug)]
pub struct PrivacyLedger {
    config: LedgerConfig,
    path: Option<PathBuf>,
    state: Mutex<LedgerState>,
}

impl PrivacyLedger {
    pub fn in_memory(config: LedgerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            path: None,
            state: Mutex::new(LedgerState { records: Vec::new(), chain: GENESIS_CHAIN.into() }),
        })
    }

    /// Opens or creates the ledger at `path`, verifying the hash chain.
    pub fn open(path: impl AsRef<Path>, config: LedgerConfig) -> Result<Self> {
        config.validate()?;
        let path = path.as_ref().to_path_buf();
        let state = if path.exists() { replay(&path)? } else { LedgerState { records: Vec::new(), chain: GENESIS_CHAIN.into() } };
        Ok(Self { config, path: Some(path), state: Mutex::new(state) })
    }

    pub fn config(&self) -> LedgerConfig {
        self.config
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, LedgerState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn records(&self) -> Vec<SpendRecord> {
        self.lock().records.clone()
    }

    /// Head of the hash chain.
    pub fn chain_head(&self) -> String {
        self.lock().chain.clone()
    }

    pub fn totals(&self) -> (f64, f64) {
        compose(&self.lock().records, self.config.delta_prime).expect("delta' validated at construction")
    }

    /// Appends the spend only if the composed totals stay within both budgets.
    pub fn try_spend(&self, epsilon_i: f64, delta_i: f64, tag: &str) -> Result<SpendDecision> {
        let mut st = self.lock();
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let last = st.records.last().map_or(f64::NEG_INFINITY, |r| r.timestamp);
        let record = SpendRecord { timestamp: now.max(last), epsilon_i, delta_i, operation_tag: tag.to_owned() };
        record.validate()?;
        st.records.push(record);
        let composed = compose(&st.records, self.config.delta_prime);
        let record = st.records.pop().expect("just pushed");
        let (epsilon_total, delta_total) = composed?;
        if epsilon_total > self.config.budget_epsilon || delta_total > self.config.budget_delta {
            return Ok(SpendDecision::Refused { epsilon_total, delta_total });
        }
        let chain = chain_next(&st.chain, &record);
        if let Some(path) = &self.path {
            append_line(path, &LedgerLine { record: record.clone(), chain: chain.clone() })?;
        }
        st.records.push(record);
        st.chain = chain;
        Ok(SpendDecision::Accepted { epsilon_total, delta_total })
    }
}

fn persistence(e: impl std::fmt::Display) -> Error {
    Error::Persistence(e.to_string())
}

fn append_line(path: &Path, line: &LedgerLine) -> Result<()> {
    let mut text = serde_json::to_string(line).map_err(persistence)?;
    text.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(persistence)?;
    f.write_all(text.as_bytes()).map_err(persistence)?;
    f.sync_data().map_err(persistence)
}

fn replay(path: &Path) -> Result<LedgerState> {
    let file = File::open(path).map_err(persistence)?;
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut chain = GENESIS_CHAIN.to_owned();
    let mut good_len = 0u64;
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(persistence)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if !buf.ends_with('\n') {
            // Torn final write: roll back to the last complete record.
            OpenOptions::new().write(true).open(path).and_then(|f| f.set_len(good_len)).map_err(persistence)?;
            break;
        }
        let parsed: LedgerLine = serde_json::from_str(buf.trim_end())
            .map_err(|e| Error::LedgerCorrupt { line: line_no, reason: e.to_string() })?;
        let expect = chain_next(&chain, &parsed.record);
        if expect != parsed.chain {
            return Err(Error::LedgerCorrupt { line: line_no, reason: "hash chain mismatch".into() });
        }
        if records.last().is_some_and(|r: &SpendRecord| r.timestamp > parsed.record.timestamp) {
            return Err(Error::LedgerCorrupt { line: line_no, reason: "timestamps go backwards".into() });
        }
        chain = expect;
        records.push(parsed.record);
        good_len += n as u64;
    }
    Ok(LedgerState { records, chain })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TagSummary {
    pub count: usize,
    pub epsilon_sum: f64,
    pub delta_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub records: usize,
    pub delta_prime: f64,
    pub epsilon_total: f64,
    pub delta_total: f64,
    pub budget_epsilon: f64,
    pub budget_delta: f64,
    pub remaining_epsilon: f64,
    pub remaining_delta: f64,
    pub per_tag: BTreeMap<String, TagSummary>,
    /// Closed-form total when every spend has the same ε.
    pub identical_spend_epsilon: Option<f64>,
}

pub fn aggregate_budget_report(ledger: &PrivacyLedger) -> BudgetReport {
    let records = ledger.records();
    let cfg = ledger.config();
    let (epsilon_total, delta_total) = compose(&records, cfg.delta_prime).expect("delta' validated at construction");
    let mut per_tag: BTreeMap<String, TagSummary> = BTreeMap::new();
    for r in &records {
        let e = per_tag.entry(r.operation_tag.clone()).or_default();
        e.count += 1;
        e.epsilon_sum += r.epsilon_i;
        e.delta_sum += r.delta_i;
    }
    let identical_spend_epsilon = match records.first() {
        None => Some(0.0),
        Some(first) if records.iter().all(|r| r.epsilon_i == first.epsilon_i) => {
            aggregate_epsilon(records.len(), first.epsilon_i, cfg.delta_prime).ok()
        }
        Some(_) => None,
    };
    BudgetReport {
        records: records.len(),
        delta_prime: cfg.delta_prime,
        epsilon_total,
        delta_total,
        budget_epsilon: cfg.budget_epsilon,
        budget_delta: cfg.budget_delta,
        remaining_epsilon: cfg.budget_epsilon - epsilon_total,
        remaining_delta: cfg.budget_delta - delta_total,
        per_tag,
        identical_spend_epsilon,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn repeat(k: usize, eps: f64, delta: f64) -> Vec<SpendRecord> {
        vec![SpendRecord::new(eps, delta, "q"); k]
    }

    #[test]
    fn compose_examples() {
        let (e, d) = compose(&repeat(100, 0.03, 1e-6), 1e-6).unwrap();
        assert_abs_diff_eq!(e, 4.577, epsilon = 1e-3);
        assert_abs_diff_eq!(d, 1.01e-4, epsilon = 1e-12);
        assert_eq!(compose(&[], 1e-6).unwrap(), (0.0, 1e-6));
        let (e, _) = compose(&repeat(1, 0.5, 0.0), 1e-5).unwrap();
        assert_abs_diff_eq!(e, 0.5 + 0.5 * (2.0 * 1e5f64.ln()).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(e, 2.8993, epsilon = 1e-4);
        assert!(compose(&[], 0.0).is_err());
    }

    #[test]
    fn aggregate_formula() {
        let v = aggregate_epsilon(100, 0.3, 1e-5).unwrap();
        assert_abs_diff_eq!(v, 30.0 + 0.3 * (200.0 * 1e5f64.ln()).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 44.396, epsilon = 1e-3);
        assert_eq!(aggregate_epsilon(0, 0.3, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn budget_examples() {
        let ledger = PrivacyLedger::in_memory(LedgerConfig::new(4.0, 1.0)).unwrap();
        assert!(ledger.try_spend(0.3, 0.0, "q").unwrap().accepted());

        let tight = PrivacyLedger::in_memory(LedgerConfig::new(4.0, 1e-3)).unwrap();
        let accepted = (0..100).filter(|_| tight.try_spend(0.03, 1e-6, "q").unwrap().accepted()).count();
        assert!(accepted < 100);
        let loose = PrivacyLedger::in_memory(LedgerConfig::new(5.0, 1e-3)).unwrap();
        assert!((0..100).all(|_| loose.try_spend(0.03, 1e-6, "q").unwrap().accepted()));
    }

    #[test]
    fn ledger_roundtrip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let cfg = LedgerConfig::new(10.0, 1.0);
        let ledger = PrivacyLedger::open(&path, cfg).unwrap();
        for tag in ["a", "b", "a"] {
            ledger.try_spend(0.1, 1e-7, tag).unwrap();
        }
        let again = PrivacyLedger::open(&path, cfg).unwrap();
        assert_eq!(again.records(), ledger.records());
        assert_eq!(again.chain_head(), ledger.chain_head());
        let report = aggregate_budget_report(&again);
        assert_eq!(report.per_tag["a"].count, 2);

        let text = std::fs::read_to_string(&path).unwrap().replacen("0.1", "0.01", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(PrivacyLedger::open(&path, cfg), Err(Error::LedgerCorrupt { line: 1, .. })));
    }

    #[test]
    fn torn_tail_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let cfg = LedgerConfig::new(10.0, 1.0);
        PrivacyLedger::open(&path, cfg).unwrap().try_spend(0.2, 0.0, "q").unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"ts":1.0,"eps":0.2,"del"#).unwrap();
        let ledger = PrivacyLedger::open(&path, cfg).unwrap();
        assert_eq!(ledger.records().len(), 1);
        ledger.try_spend(0.2, 0.0, "q").unwrap();
        assert_eq!(PrivacyLedger::open(&path, cfg).unwrap().records().len(), 2);
    }

    #[test]
    fn io_failure_refuses_without_recording() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = PrivacyLedger::open(dir.path(), LedgerConfig::new(10.0, 1.0)).unwrap_err();
        assert!(matches!(ledger, Error::Persistence(_)));
        let missing = dir.path().join("no-such-dir").join("ledger.jsonl");
        let ledger = PrivacyLedger::open(&missing, LedgerConfig::new(10.0, 1.0)).unwrap();
        assert!(matches!(ledger.try_spend(0.1, 0.0, "q"), Err(Error::Persistence(_))));
        assert!(ledger.records().is_empty());
    }
}
