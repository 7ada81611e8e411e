//! Structure learning by repeated terminal-node identification.
//!
//! Each round probes nodes of the working set `S`: it draws random
//! assignments, queries `P(X_i = 0 | X_{S∖i} = x^A)` for each, recovers the
//! degree-≤2 Fourier coefficients by ℓ1 minimization, and declares `i`
//! terminal when no pair coefficient survives the threshold. Terminal nodes
//! keep their surviving singletons as parents and are removed from `S`.
//! The loop stops when fewer than three nodes remain.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::graph::{Dag, GraphError};
use crate::oracle::{dkw_sample_size, BlackBox, OracleError, OracleMode, QueryLedger};
use crate::recovery::{
    build_candidate_basis, debug_dump, draw_measurement_rows, threshold_support, CandidateBasis, MeasurementSystem,
    RecoveryError, RecoveryResult, ThresholdMode,
};
use crate::rng;
use crate::solver::{bpdn_widened, SolverError, SolverOptions};
use crate::subset::SubsetMask;

/// Queries per probe: `min(cap, ceil(10^C * max(k^2 ln^4 n', k^2 ln(1/delta))))`,
/// never below 1.
pub fn num_queries(k: usize, n_prime: usize, c: f64, delta: f64, cap: usize) -> usize {
    let k2 = (k * k) as f64;
    let l = (n_prime as f64).ln();
    let base = (k2 * l.powi(4)).max(k2 * (1.0 / delta).ln());
    let m = (10f64.powf(c) * base).ceil();
    if m.is_nan() {
        return 1;
    }
    (m.min(cap as f64) as usize).max(1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequeryPolicy {
    /// Probe every node of `S` in every round.
    All,
    /// After the first round, probe only nodes that lost a child.
    #[default]
    Affected,
}

/// Fidelity radius of the ℓ1 problem in sampled mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusPolicy {
    /// `sqrt(m) * eps_query`: the worst case allowed by the per-query
    /// accuracy target.
    Dkw,
    /// The expected binomial noise norm `sqrt(sum p(1-p)/N)`, inflated by
    /// two standard deviations of its chi-square fluctuation.
    #[default]
    Empirical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    /// Assumed bound on Markov blanket sizes.
    pub k: usize,
    pub delta: f64,
    /// Control parameter scaling the number of queries.
    pub c: f64,
    pub query_cap: usize,
    pub threshold: ThresholdMode,
    pub requery: RequeryPolicy,
    pub radius: RadiusPolicy,
    /// Per-query accuracy target; sets the samples per query in sampled mode.
    pub eps_query: f64,
    /// Fixed samples per query, overriding the accuracy target.
    pub samples_per_query: Option<u64>,
    pub solver: SolverOptions,
    pub seed: u64,
    pub execution: Execution,
    /// Keep a text dump of every measurement system.
    pub dump_systems: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            k: 4,
            delta: 0.01,
            c: 0.0,
            query_cap: 300,
            threshold: ThresholdMode::Absolute { tau: 0.01 },
            requery: RequeryPolicy::Affected,
            radius: RadiusPolicy::Empirical,
            eps_query: 0.05,
            samples_per_query: None,
            solver: SolverOptions::default(),
            seed: 0,
            execution: Execution::Parallel,
            dump_systems: false,
        }
    }
}

impl LearnerConfig {
    /// Parses a TOML table; missing fields take their defaults.
    pub fn from_toml(text: &str) -> Result<Self, LearnError> {
        let cfg: Self = toml::from_str(text).map_err(|e| LearnError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |s: String| Err(LearnError::Config(s));
        if self.k < 1 {
            return bad("k must be at least 1".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta = {} must lie in (0, 1)", self.delta));
        }
        if self.query_cap < 1 {
            return bad("query_cap must be at least 1".into());
        }
        if !(self.eps_query > 0.0 && self.eps_query <= 1.0) {
            return bad(format!("eps_query = {} must lie in (0, 1]", self.eps_query));
        }
        if !self.c.is_finite() {
            return bad("C must be finite".into());
        }
        Ok(())
    }
}

/// Recovered parent sets, one per node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentMap {
    pub parents: Vec<SubsetMask>,
    /// Nodes left when peeling stopped; their parent sets are empty by
    /// convention, not by inference.
    pub unresolved: SubsetMask,
}

impl ParentMap {
    pub fn n(&self) -> usize {
        self.parents.len()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n())
            .flat_map(|c| self.parents[c].iter().map(move |p| (p, c)))
            .collect()
    }

    /// The recovered graph; fails if noise produced a cycle.
    pub fn to_dag(&self) -> Result<Dag, GraphError> {
        Dag::from_parent_masks(self.parents.clone())
    }

    pub fn from_dag(dag: &Dag) -> Self {
        Self {
            parents: dag.parent_masks().to_vec(),
            unresolved: SubsetMask::EMPTY,
        }
    }

    /// Edge-list text: one `parent child` line per edge, then the
    /// unresolved nodes.
    pub fn to_text(&self) -> String {
        let mut out = format!("n {}\n", self.n());
        for (p, c) in self.edges() {
            out.push_str(&format!("{p} {c}\n"));
        }
        out.push_str(&format!("unresolved {}\n", self.unresolved));
        out
    }
}

/// What happened to one node in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeLog {
    pub node: usize,
    pub queries: usize,
    pub samples_per_query: u64,
    pub basis_len: usize,
    /// Radius actually used by the solver.
    pub eps: f64,
    pub threshold: f64,
    pub pair_margin: f64,
    pub terminal: bool,
    pub parents: SubsetMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub set: SubsetMask,
    pub peeled: SubsetMask,
    pub probes: Vec<ProbeLog>,
}

impl fmt::Display for RoundLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "round {} |S|={} peeled={}", self.round, self.set.len(), self.peeled)?;
        for p in &self.probes {
            write!(
                f,
                " {}:m={},margin={:.4},{}",
                p.node,
                p.queries,
                p.pair_margin,
                if p.terminal { "T" } else { "N" }
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnOutcome {
    pub parents: ParentMap,
    pub rounds: Vec<RoundLog>,
    pub ledger: QueryLedger,
    pub dumps: Vec<String>,
}

impl LearnOutcome {
    pub fn log_text(&self) -> String {
        self.rounds.iter().map(|r| format!("{r}\n")).collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("network has {0} nodes; at least 3 are needed")]
    TooFewNodes(usize),
    #[error("blanket map has {got} entries for {n} nodes")]
    BlanketMap { got: usize, n: usize },
    #[error("no terminal node found among {survivors} in round {round}")]
    Stall {
        round: usize,
        survivors: SubsetMask,
        /// Largest pair coefficient per surviving node, from its latest probe.
        margins: Vec<(usize, f64)>,
        partial: Box<ParentMap>,
        rounds: Vec<RoundLog>,
        ledger: QueryLedger,
    },
    #[error("node {node}: {source}")]
    Oracle { node: usize, source: OracleError },
    #[error("node {node}: {source}")]
    Solver { node: usize, source: SolverError },
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
}

struct Probe {
    result: RecoveryResult,
    log: ProbeLog,
    dump: Option<String>,
}

fn probe(
    bb: &BlackBox<'_>,
    cfg: &LearnerConfig,
    s: SubsetMask,
    i: usize,
    blanket: Option<SubsetMask>,
    round: usize,
) -> Result<Probe, LearnError> {
    let (basis, n_prime) = match blanket {
        None => (build_candidate_basis(s, i)?, s.len()),
        Some(mb) => {
            let ground = mb.intersection(s).without(i);
            (CandidateBasis::over_ground(i, ground), (ground.len() + 1).max(3))
        }
    };
    let ground = basis.ground;
    let m = num_queries(cfg.k, n_prime, cfg.c, cfg.delta, cfg.query_cap);
    let mut row_rng = rng::stream(cfg.seed, &[round as u64, i as u64, 1]);
    let rows = draw_measurement_rows(ground, m, &mut row_rng);

    let samples = match bb.config().mode {
        OracleMode::Exact => 0,
        OracleMode::Sampled { .. } => cfg
            .samples_per_query
            .unwrap_or_else(|| dkw_sample_size(m as u64, cfg.eps_query, cfg.delta)),
    };
    let rhs = bb
        .query_batch(i, ground, &rows, samples, round as u64, 0)
        .map_err(|source| LearnError::Oracle { node: i, source })?;

    let eps = match bb.config().mode {
        OracleMode::Exact => 0.0,
        OracleMode::Sampled { .. } => match cfg.radius {
            RadiusPolicy::Dkw => (m as f64).sqrt() * cfg.eps_query,
            RadiusPolicy::Empirical => {
                let n = samples as f64;
                let var: f64 = rhs.iter().map(|p| (p * (1.0 - p)).max(1.0 / n) / n).sum();
                (var * (1.0 + 2.0 * (2.0 / m as f64).sqrt())).sqrt()
            }
        },
    };

    let sys = MeasurementSystem::new(basis, rows, rhs, eps)?;
    let (sol, used) = bpdn_widened(&sys.matrix, &sys.rhs, sys.eps, 1.01, &cfg.solver)
        .map_err(|source| LearnError::Solver { node: i, source })?;
    let beta: Vec<f64> = sol.beta.iter().copied().collect();
    let tau = cfg.threshold.resolve(beta.iter().skip(1).copied());
    let result = threshold_support(&sys.basis, &beta, tau);
    let log = ProbeLog {
        node: i,
        queries: m,
        samples_per_query: samples,
        basis_len: sys.basis.len(),
        eps: used,
        threshold: tau,
        pair_margin: result.pair_margin,
        terminal: result.is_terminal,
        parents: result.parents,
    };
    let dump = cfg.dump_systems.then(|| {
        let mut sys = sys;
        sys.eps = used;
        debug_dump(&sys, &result)
    });
    Ok(Probe { result, log, dump })
}

/// One round: probes `probes ⊆ s` and returns the nodes judged terminal
/// along with every probe's result.
pub fn get_terminal_nodes(
    bb: &BlackBox<'_>,
    cfg: &LearnerConfig,
    s: SubsetMask,
    probes: SubsetMask,
    blankets: Option<&[SubsetMask]>,
    round: usize,
) -> Result<(SubsetMask, Vec<RecoveryResult>), LearnError> {
    let (t, results, _, _) = run_round(bb, cfg, s, probes, blankets, round)?;
    Ok((t, results))
}

type RoundOutput = (SubsetMask, Vec<RecoveryResult>, Vec<ProbeLog>, Vec<String>);

fn run_round(
    bb: &BlackBox<'_>,
    cfg: &LearnerConfig,
    s: SubsetMask,
    probes: SubsetMask,
    blankets: Option<&[SubsetMask]>,
    round: usize,
) -> Result<RoundOutput, LearnError> {
    if s.len() < 3 {
        return Err(RecoveryError::TooSmall { set: s }.into());
    }
    let nodes = probes.intersection(s).to_vec();
    let outs = cfg
        .execution
        .map(&nodes, |&i| probe(bb, cfg, s, i, blankets.map(|b| b[i]), round));
    let mut terminal = SubsetMask::EMPTY;
    let mut results = Vec::with_capacity(outs.len());
    let mut logs = Vec::with_capacity(outs.len());
    let mut dumps = Vec::new();
    for out in outs {
        let p = out?;
        if p.result.is_terminal {
            terminal = terminal.with(p.result.node);
        }
        results.push(p.result);
        logs.push(p.log);
        dumps.extend(p.dump);
    }
    Ok((terminal, results, logs, dumps))
}

/// Full peeling. `blankets`, when given, restricts every node's queries and
/// candidate basis to its (estimated) Markov blanket.
pub fn get_parents(
    bb: &BlackBox<'_>,
    cfg: &LearnerConfig,
    blankets: Option<&[SubsetMask]>,
) -> Result<LearnOutcome, LearnError> {
    cfg.validate()?;
    let n = bb.network().n();
    if n < 3 {
        return Err(LearnError::TooFewNodes(n));
    }
    if let Some(b) = blankets {
        if b.len() != n {
            return Err(LearnError::BlanketMap { got: b.len(), n });
        }
    }
    let mut parents = vec![SubsetMask::EMPTY; n];
    let mut margins = vec![f64::NAN; n];
    let mut s = SubsetMask::full(n);
    let mut probes = s;
    let mut rounds = Vec::new();
    let mut dumps = Vec::new();
    let mut round = 0;
    while s.len() >= 3 {
        round += 1;
        let (t, results, logs, d) = run_round(bb, cfg, s, probes, blankets, round)?;
        dumps.extend(d);
        for r in &results {
            margins[r.node] = r.pair_margin;
        }
        rounds.push(RoundLog {
            round,
            set: s,
            peeled: t,
            probes: logs,
        });
        if t.is_empty() {
            return Err(LearnError::Stall {
                round,
                survivors: s,
                margins: s.iter().map(|i| (i, margins[i])).collect(),
                partial: Box::new(ParentMap {
                    parents,
                    unresolved: s,
                }),
                rounds,
                ledger: bb.ledger(),
            });
        }
        let mut lost_child = SubsetMask::EMPTY;
        for r in results.iter().filter(|r| r.is_terminal) {
            parents[r.node] = r.parents;
            lost_child = lost_child.union(r.parents);
        }
        s = s.difference(t);
        probes = match cfg.requery {
            RequeryPolicy::All => s,
            RequeryPolicy::Affected => lost_child.intersection(s),
        };
    }
    Ok(LearnOutcome {
        parents: ParentMap {
            parents,
            unresolved: s,
        },
        rounds,
        ledger: bb.ledger(),
        dumps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{generate_rank2_cpts, BayesNet};
    use crate::oracle::OracleConfig;

    #[test]
    fn query_budget_formula() {
        // k^2 (ln 20)^4 = 16 * 80.5 = 1288.7
        assert_eq!(num_queries(4, 20, 0.0, 0.01, 300), 300);
        assert_eq!(num_queries(4, 20, -1.0, 0.01, 300), 129);
        assert_eq!(num_queries(4, 20, -2.0, 0.01, 300), 13);
        assert_eq!(num_queries(4, 20, -3.0, 0.01, 300), 2);
        assert_eq!(num_queries(4, 20, -30.0, 0.01, 300), 1);
        assert_eq!(num_queries(4, 20, 5.0, 0.01, 10_000), 10_000);
        // the log(1/delta) branch wins for tiny n'
        let want = (0.1 * 16.0 * (1e6f64).ln()).ceil() as usize;
        assert_eq!(num_queries(4, 3, -1.0, 1e-6, 300), want);
    }

    #[test]
    fn chain_of_three() {
        let dag = Dag::new(3, [(0, 1), (1, 2)]).unwrap();
        let bn = generate_rank2_cpts(&dag, 0.05, 4).unwrap();
        let bb = BlackBox::new(&bn, OracleConfig::exact()).unwrap();
        let cfg = LearnerConfig {
            threshold: ThresholdMode::Absolute { tau: 0.025 },
            ..Default::default()
        };
        let s = SubsetMask::full(3);
        let (t, results) = get_terminal_nodes(&bb, &cfg, s, s, None, 1).unwrap();
        let r2 = results.iter().find(|r| r.node == 2).unwrap();
        assert_eq!(r2.parents, SubsetMask::singleton(1));
        assert!(!t.contains(1));
        // the root's conditional depends on X_1 alone, exactly like a
        // terminal node with parent 1: the edge 0 -> 1 is not orientable here
        let r0 = results.iter().find(|r| r.node == 0).unwrap();
        assert_eq!(t, SubsetMask::from_nodes([0, 2]));
        assert_eq!(r0.parents, SubsetMask::singleton(1));
    }

    #[test]
    fn small_instances_recover_exactly() {
        for seed in 0..3 {
            let bn = BayesNet::random(6, 3, 0.02, seed).unwrap();
            let bb = BlackBox::new(&bn, OracleConfig::exact()).unwrap();
            let out = get_parents(&bb, &LearnerConfig::default(), None).unwrap();
            for i in 0..bn.n() {
                assert_eq!(out.parents.parents[i], bn.dag().parents(i), "seed {seed} node {i}");
            }
        }
    }

    #[test]
    fn star_peels_all_leaves_at_once() {
        // one root with four children: every child is terminal in round one
        let dag = Dag::new(5, [(0, 1), (0, 2), (0, 3), (0, 4)]).unwrap();
        let bn = generate_rank2_cpts(&dag, 0.05, 1).unwrap();
        let bb = BlackBox::new(&bn, OracleConfig::exact()).unwrap();
        let cfg = LearnerConfig {
            threshold: ThresholdMode::Absolute { tau: 0.025 },
            ..Default::default()
        };
        let out = get_parents(&bb, &cfg, None).unwrap();
        assert_eq!(out.rounds.len(), 1);
        assert_eq!(out.rounds[0].peeled, SubsetMask::from_nodes([1, 2, 3, 4]));
        assert_eq!(out.parents.unresolved, SubsetMask::singleton(0));
    }

    #[test]
    fn invalid_configs() {
        let bn = BayesNet::random(5, 3, 0.02, 0).unwrap();
        let bb = BlackBox::new(&bn, OracleConfig::exact()).unwrap();
        let cfg = LearnerConfig {
            delta: 1.5,
            ..Default::default()
        };
        assert!(matches!(get_parents(&bb, &cfg, None), Err(LearnError::Config(_))));
        let cfg = LearnerConfig::default();
        assert!(matches!(
            get_parents(&bb, &cfg, Some(&[SubsetMask::EMPTY; 2])),
            Err(LearnError::BlanketMap { .. })
        ));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let bn = BayesNet::random(8, 4, 0.02, 2).unwrap();
        let run = |execution| {
            let bb = BlackBox::new(&bn, OracleConfig::sampled(2000, 5)).unwrap();
            let cfg = LearnerConfig {
                execution,
                c: -1.0,
                ..Default::default()
            };
            get_parents(&bb, &cfg, None).map(|o| (o.parents, o.ledger))
        };
        assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
    }
}
