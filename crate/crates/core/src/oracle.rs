//! Conditional-probability black box backed by a known network, plus
//! forward sampling of observational data.

use std::collections::HashSet;
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{BayesNet, NetworkError};
use crate::rng;
use crate::subset::SubsetMask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("node {0} is out of range")]
    NodeOutOfRange(usize),
    #[error("node {0} cannot condition on itself")]
    SelfConditioning(usize),
    #[error("assignment sets nodes {0} outside the conditioning set")]
    StrayAssignment(SubsetMask),
    #[error("P(X_{node} | X_{set} = {ones}) is undefined: conditioning event has probability 0")]
    Undefined {
        node: usize,
        set: SubsetMask,
        ones: SubsetMask,
    },
    #[error("exact marginalization for this query needs the joint table: {0}")]
    Capacity(String),
    #[error("sampled mode needs at least one sample per query")]
    NoSamples,
}

/// `P(X_i = 0 | X_A = x_A)`, where `x_A` sets the members of `ones` to 1 and
/// the rest of `a` to 0.
///
/// When `a` covers the blanket of `i` inside the ancestral closure of
/// `a ∪ {i}`, only the factors mentioning `X_i` matter and the ratio is
/// computed directly. Otherwise the joint table is summed.
pub fn exact_conditional(bn: &BayesNet, i: usize, a: SubsetMask, ones: SubsetMask) -> Result<f64, OracleError> {
    exact_conditional_with(bn, i, a, ones, || bn.joint_table().map_err(capacity))
}

fn capacity(e: NetworkError) -> OracleError {
    OracleError::Capacity(e.to_string())
}

fn check_query(bn: &BayesNet, i: usize, a: SubsetMask, ones: SubsetMask) -> Result<(), OracleError> {
    if i >= bn.n() {
        return Err(OracleError::NodeOutOfRange(i));
    }
    if let Some(j) = a.difference(bn.dag().nodes()).first() {
        return Err(OracleError::NodeOutOfRange(j));
    }
    if a.contains(i) {
        return Err(OracleError::SelfConditioning(i));
    }
    let stray = ones.difference(a);
    if !stray.is_empty() {
        return Err(OracleError::StrayAssignment(stray));
    }
    Ok(())
}

fn exact_conditional_with<J>(
    bn: &BayesNet,
    i: usize,
    a: SubsetMask,
    ones: SubsetMask,
    joint: J,
) -> Result<f64, OracleError>
where
    J: FnOnce() -> Result<Vec<f64>, OracleError>,
{
    check_query(bn, i, a, ones)?;
    let undefined = || OracleError::Undefined { node: i, set: a, ones };
    let closure = bn.dag().ancestral_closure(a.with(i));
    if bn.dag().markov_blanket_within(i, closure).is_subset_of(a) {
        return bn.blanket_conditional(i, closure, ones).ok_or_else(undefined);
    }
    let table = joint()?;
    marginal_ratio(&table, bn.dag().nodes(), i, a, ones).ok_or_else(undefined)
}

/// Slow path: sums the joint over every node outside `a ∪ {i}`.
fn marginal_ratio(joint: &[f64], all: SubsetMask, i: usize, a: SubsetMask, ones: SubsetMask) -> Option<f64> {
    let free = all.difference(a.with(i));
    let (mut p0, mut p1) = (0.0, 0.0);
    for f in free.subsets() {
        let s = ones.union(f);
        p0 += joint[s.bits() as usize];
        p1 += joint[s.with(i).bits() as usize];
    }
    let den = p0 + p1;
    (den > 0.0).then(|| p0 / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum OracleMode {
    Exact,
    Sampled { samples_per_query: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub mode: OracleMode,
    pub seed: u64,
}

impl OracleConfig {
    pub fn exact() -> Self {
        Self { mode: OracleMode::Exact, seed: 0 }
    }

    pub fn sampled(samples_per_query: u64, seed: u64) -> Self {
        Self {
            mode: OracleMode::Sampled { samples_per_query },
            seed,
        }
    }

    /// Samples a caller should request per query; zero in exact mode.
    pub fn samples_per_query(&self) -> u64 {
        match self.mode {
            OracleMode::Exact => 0,
            OracleMode::Sampled { samples_per_query } => samples_per_query,
        }
    }
}

/// Snapshot of the black-box accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLedger {
    /// Distinct `(node, conditioning set)` pairs.
    pub selections: u64,
    /// Individual `(node, set, assignment)` evaluations.
    pub queries: u64,
    /// Sum of requested sample counts.
    pub samples: u64,
}

#[derive(Default)]
struct LedgerState {
    seen: HashSet<(usize, SubsetMask)>,
    queries: u64,
    samples: u64,
}

/// Identifies a query for the purpose of its random stream, so that
/// results do not depend on evaluation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryKey {
    pub round: u64,
    pub index: u64,
}

/// The black box: answers `BB(i, A, x_A, N)` and keeps a ledger.
pub struct BlackBox<'a> {
    bn: &'a BayesNet,
    config: OracleConfig,
    joint: OnceLock<Result<Vec<f64>, OracleError>>,
    ledger: Mutex<LedgerState>,
}

impl<'a> BlackBox<'a> {
    pub fn new(bn: &'a BayesNet, config: OracleConfig) -> Result<Self, OracleError> {
        if config.mode == (OracleMode::Sampled { samples_per_query: 0 }) {
            return Err(OracleError::NoSamples);
        }
        Ok(Self {
            bn,
            config,
            joint: OnceLock::new(),
            ledger: Mutex::new(LedgerState::default()),
        })
    }

    pub fn network(&self) -> &BayesNet {
        self.bn
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    pub fn exact(&self, i: usize, a: SubsetMask, ones: SubsetMask) -> Result<f64, OracleError> {
        exact_conditional_with(self.bn, i, a, ones, || {
            self.joint
                .get_or_init(|| self.bn.joint_table().map_err(capacity))
                .clone()
        })
    }

    /// One query with `samples` draws. In exact mode the sample count is
    /// only recorded.
    pub fn query(
        &self,
        i: usize,
        a: SubsetMask,
        ones: SubsetMask,
        samples: u64,
        key: QueryKey,
    ) -> Result<f64, OracleError> {
        let p = self.exact(i, a, ones)?;
        let out = self.degrade(p, i, samples, key)?;
        let mut l = self.ledger.lock().expect("ledger lock");
        l.seen.insert((i, a));
        l.queries += 1;
        l.samples += samples;
        Ok(out)
    }

    /// All assignments in `rows` for one selection `(i, a)`; the ledger is
    /// updated once. Row `j` uses stream key `(round, first_index + j)`.
    pub fn query_batch(
        &self,
        i: usize,
        a: SubsetMask,
        rows: &[SubsetMask],
        samples: u64,
        round: u64,
        first_index: u64,
    ) -> Result<Vec<f64>, OracleError> {
        let out = rows
            .iter()
            .enumerate()
            .map(|(j, &ones)| {
                let p = self.exact(i, a, ones)?;
                let key = QueryKey {
                    round,
                    index: first_index + j as u64,
                };
                self.degrade(p, i, samples, key)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut l = self.ledger.lock().expect("ledger lock");
        l.seen.insert((i, a));
        l.queries += rows.len() as u64;
        l.samples += samples * rows.len() as u64;
        Ok(out)
    }

    fn degrade(&self, p: f64, i: usize, samples: u64, key: QueryKey) -> Result<f64, OracleError> {
        match self.config.mode {
            OracleMode::Exact => Ok(p),
            OracleMode::Sampled { .. } => {
                if samples == 0 {
                    return Err(OracleError::NoSamples);
                }
                let mut r = rng::stream(self.config.seed, &[key.round, i as u64, key.index]);
                let zeros = Binomial::new(samples, p.clamp(0.0, 1.0))
                    .expect("valid binomial parameters")
                    .sample(&mut r);
                Ok(zeros as f64 / samples as f64)
            }
        }
    }

    pub fn ledger(&self) -> QueryLedger {
        let l = self.ledger.lock().expect("ledger lock");
        QueryLedger {
            selections: l.seen.len() as u64,
            queries: l.queries,
            samples: l.samples,
        }
    }
}

/// Smallest per-query sample count for which a union bound over `m`
/// queries of the two-sided DKW inequality gives accuracy `eps` with
/// probability `1 - delta`: `ceil(2 (ln m + ln(4/delta)) / eps^2)`.
pub fn dkw_sample_size(m: u64, eps: f64, delta: f64) -> u64 {
    assert!(m >= 1, "need at least one query");
    assert!(eps > 0.0 && eps <= 1.0, "eps must lie in (0, 1]");
    assert!(delta > 0.0 && delta <= 1.0, "delta must lie in (0, 1]");
    (2.0 * ((m as f64).ln() + (4.0 / delta).ln()) / (eps * eps)).ceil() as u64
}

/// Observational samples: one full state per row, bit `j` set when `X_j = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub seed: u64,
    pub rows: Vec<SubsetMask>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {detail}")]
    Format { line: usize, detail: String },
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The first `count` rows (datasets drawn from one seed are nested).
    pub fn prefix(&self, count: usize) -> Dataset {
        Dataset {
            n: self.n,
            seed: self.seed,
            rows: self.rows[..count.min(self.rows.len())].to_vec(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("n={} N={} seed={}\n", self.n, self.rows.len(), self.seed);
        for r in &self.rows {
            for j in 0..self.n {
                if j > 0 {
                    out.push(' ');
                }
                out.push(if r.contains(j) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        let fmt_err = |line: usize, detail: String| DatasetError::Format { line, detail };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| fmt_err(1, "missing header".into()))?;
        let (mut n, mut big_n, mut seed) = (None, None, None);
        for field in header.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| fmt_err(1, format!("bad header field {field:?}")))?;
            let v: u64 = v.parse().map_err(|_| fmt_err(1, format!("bad value in {field:?}")))?;
            match k {
                "n" => n = Some(v as usize),
                "N" => big_n = Some(v as usize),
                "seed" => seed = Some(v),
                _ => return Err(fmt_err(1, format!("unknown header field {k:?}"))),
            }
        }
        let n = n.ok_or_else(|| fmt_err(1, "header lacks n".into()))?;
        if n == 0 || n > crate::subset::MAX_NODES {
            return Err(fmt_err(1, format!("n = {n} out of range")));
        }
        let mut rows = Vec::new();
        for (k, line) in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != n {
                return Err(fmt_err(k + 1, format!("expected {n} values, got {}", toks.len())));
            }
            let mut state = SubsetMask::EMPTY;
            for (j, tok) in toks.into_iter().enumerate() {
                match tok {
                    "0" => {}
                    "1" => state = state.with(j),
                    _ => return Err(fmt_err(k + 1, format!("expected a bit, got {tok:?}"))),
                }
            }
            rows.push(state);
        }
        if let Some(expected) = big_n {
            if expected != rows.len() {
                return Err(fmt_err(1, format!("header says N={expected}, found {} rows", rows.len())));
            }
        }
        Ok(Dataset {
            n,
            seed: seed.unwrap_or(0),
            rows,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

impl std::fmt::Display for QueryLedger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "selections={} queries={} samples={}", self.selections, self.queries, self.samples)
    }
}

/// `count` i.i.d. forward samples in topological order, from one stream.
pub fn sample_observational(bn: &BayesNet, count: usize, seed: u64) -> Dataset {
    let order = bn.dag().topological_order();
    let mut r = rng::stream(seed, &[0x0B5]);
    let rows = (0..count)
        .map(|_| {
            order.iter().fold(SubsetMask::EMPTY, |state, &j| {
                let p1 = bn.cpt(j).prob_in_state(true, state);
                if r.random::<f64>() < p1 {
                    state.with(j)
                } else {
                    state
                }
            })
        })
        .collect();
    Dataset { n: bn.n(), seed, rows }
}
