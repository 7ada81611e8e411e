//! Seeded sweeps over the control parameter `C`, scoring, and plot-ready
//! tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::learn::{get_parents, LearnError, LearnerConfig, ParentMap, RadiusPolicy, RequeryPolicy};
use crate::markov_blanket::{estimate_moments, observational_samples, recover_blankets, MbOptions};
use crate::network::BayesNet;
use crate::oracle::{sample_observational, BlackBox, OracleConfig, QueryLedger};
use crate::recovery::ThresholdMode;
use crate::rng::derive_seed;
use crate::subset::SubsetMask;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("cannot parse experiment config: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{truth} true sets but {recovered} recovered sets")]
pub struct MetricsError {
    pub truth: usize,
    pub recovered: usize,
}

/// Set-recovery scores summed over nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub hamming: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores per-node sets. Ratios with a zero denominator are 0, except that
/// empty truth recovered as empty scores 1.
pub fn score_sets(truth: &[SubsetMask], recovered: &[SubsetMask], include: impl Fn(usize) -> bool) -> Result<SetMetrics, MetricsError> {
    if truth.len() != recovered.len() {
        return Err(MetricsError {
            truth: truth.len(),
            recovered: recovered.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (i, (t, r)) in truth.iter().zip(recovered).enumerate() {
        if include(i) {
            tp += t.intersection(*r).len();
            fp += r.difference(*t).len();
            fn_ += t.difference(*r).len();
        }
    }
    let ratio = |num: usize, den: usize| match (num, den) {
        (_, 0) if tp + fp + fn_ == 0 => 1.0,
        (_, 0) => 0.0,
        _ => num as f64 / den as f64,
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(SetMetrics {
        hamming: fp + fn_,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        precision,
        recall,
        f1,
    })
}

/// Parent-set scores. A reversed edge costs 2: once as a missed parent and
/// once as a spurious one. With `score_unresolved` off, nodes left
/// unresolved by peeling are skipped.
pub fn compute_dag_metrics(truth: &ParentMap, recovered: &ParentMap, score_unresolved: bool) -> Result<SetMetrics, MetricsError> {
    let skip = recovered.unresolved;
    score_sets(&truth.parents, &recovered.parents, |i| score_unresolved || !skip.contains(i))
}

pub fn compute_mb_metrics(truth: &[SubsetMask], recovered: &[SubsetMask]) -> Result<SetMetrics, MetricsError> {
    score_sets(truth, recovered, |_| true)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    BlackboxOnly,
    WithObservational,
    /// Recover blankets from observational samples and stop.
    BlanketsOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Exact,
    #[default]
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    /// Instance labels; each gets its own network.
    pub seeds: Vec<u64>,
    pub n: usize,
    pub k: usize,
    pub delta: f64,
    pub gamma_min: f64,
    pub c_grid: Vec<f64>,
    pub query_cap: usize,
    pub eps_query: f64,
    pub oracle: OracleKind,
    pub regime: Regime,
    /// Accuracy in the observational sample size `max(10^C ln n / eps^2, n)`.
    pub eps_obs: f64,
    pub threshold: ThresholdMode,
    pub mb_threshold: ThresholdMode,
    pub requery: RequeryPolicy,
    pub radius: RadiusPolicy,
    /// Count nodes left unresolved at the end of peeling in the DAG scores.
    pub score_unresolved: bool,
    pub parallel: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: vec![1, 2, 3, 4, 5],
            n: 20,
            k: 4,
            delta: 0.01,
            gamma_min: 0.02,
            c_grid: vec![-3.0, -2.0, -1.0, 0.0, 1.0],
            query_cap: 300,
            eps_query: 0.05,
            oracle: OracleKind::Sampled,
            regime: Regime::BlackboxOnly,
            eps_obs: 0.05,
            threshold: ThresholdMode::Absolute { tau: 0.01 },
            mb_threshold: ThresholdMode::Absolute { tau: 0.01 },
            requery: RequeryPolicy::Affected,
            radius: RadiusPolicy::Empirical,
            score_unresolved: true,
            parallel: true,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |s: &str| Err(ExperimentError::Config(s.to_string()));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !c.is_finite()) {
            return bad("c_grid must hold finite values");
        }
        if self.c_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("c_grid must be strictly ascending");
        }
        if self.n < 3 {
            return bad("n must be at least 3");
        }
        if !(self.gamma_min > 0.0 && self.gamma_min < 0.25) {
            return bad("gamma_min must lie in (0, 0.25)");
        }
        if !(self.eps_obs > 0.0 && self.eps_obs < 1.0) {
            return bad("eps_obs must lie in (0, 1)");
        }
        self.learner(0.0, 0).validate().map_err(|e| ExperimentError::Config(e.to_string()))
    }

    fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    fn learner(&self, c: f64, seed: u64) -> LearnerConfig {
        LearnerConfig {
            k: self.k,
            delta: self.delta,
            c,
            query_cap: self.query_cap,
            threshold: self.threshold,
            requery: self.requery,
            radius: self.radius,
            eps_query: self.eps_query,
            seed,
            execution: self.execution(),
            ..Default::default()
        }
    }

    /// Network seed for instance label `s`.
    pub fn network_seed(&self, s: u64) -> u64 {
        derive_seed(self.seed, &[0, s])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub c: f64,
    /// `ok`, `stall` (scored on the partial map), or `error` (not scored).
    pub status: String,
    pub message: String,
    pub dag: Option<SetMetrics>,
    pub mb: Option<SetMetrics>,
    pub ledger: QueryLedger,
    pub observations: usize,
    pub unresolved: usize,
    pub ridge_solves: usize,
    pub wall_seconds: f64,
}

/// One `(seed, C)` cell, end to end. Never fails; problems become the
/// row's status.
pub fn run_cell(cfg: &ExperimentConfig, seed: u64, c: f64, c_index: usize) -> MetricsRow {
    let start = Instant::now();
    let mut row = MetricsRow {
        seed,
        c,
        status: "ok".into(),
        message: String::new(),
        dag: None,
        mb: None,
        ledger: QueryLedger::default(),
        observations: 0,
        unresolved: 0,
        ridge_solves: 0,
        wall_seconds: 0.0,
    };
    let fail = |mut row: MetricsRow, msg: String| {
        row.status = "error".into();
        row.message = msg;
        row.wall_seconds = start.elapsed().as_secs_f64();
        row
    };
    let bn = match BayesNet::random(cfg.n, cfg.k, cfg.gamma_min, cfg.network_seed(seed)) {
        Ok(bn) => bn,
        Err(e) => return fail(row, e.to_string()),
    };
    let cell_seed = derive_seed(cfg.seed, &[1, seed, c_index as u64]);

    let blankets = if cfg.regime != Regime::BlackboxOnly {
        let count = observational_samples(cfg.n, c, cfg.eps_obs);
        row.observations = count;
        let data = sample_observational(&bn, count, derive_seed(cfg.seed, &[2, seed, c_index as u64]));
        let opts = MbOptions {
            threshold: cfg.mb_threshold,
            ..Default::default()
        };
        let results = match estimate_moments(&data).and_then(|m| recover_blankets(&m, &opts, cfg.execution())) {
            Ok(r) => r,
            Err(e) => return fail(row, e.to_string()),
        };
        row.ridge_solves = results.iter().filter(|r| r.diagnostics.ridge.is_some()).count();
        let est: Vec<SubsetMask> = results.iter().map(|r| r.mb).collect();
        let truth: Vec<SubsetMask> = (0..cfg.n).map(|i| bn.dag().markov_blanket(i)).collect();
        row.mb = compute_mb_metrics(&truth, &est).ok();
        if cfg.regime == Regime::BlanketsOnly {
            row.wall_seconds = start.elapsed().as_secs_f64();
            return row;
        }
        Some(est)
    } else {
        None
    };

    let oracle = match cfg.oracle {
        OracleKind::Exact => OracleConfig::exact(),
        OracleKind::Sampled => OracleConfig::sampled(1, cell_seed),
    };
    let bb = match BlackBox::new(&bn, oracle) {
        Ok(bb) => bb,
        Err(e) => return fail(row, e.to_string()),
    };
    let learner = cfg.learner(c, cell_seed);
    let truth = ParentMap::from_dag(bn.dag());
    let recovered = match get_parents(&bb, &learner, blankets.as_deref()) {
        Ok(out) => {
            row.ledger = out.ledger;
            out.parents
        }
        Err(LearnError::Stall {
            partial, ledger, survivors, ..
        }) => {
            row.status = "stall".into();
            row.message = format!("no terminal node among {survivors}");
            row.ledger = ledger;
            *partial
        }
        Err(e) => {
            row.ledger = bb.ledger();
            return fail(row, e.to_string());
        }
    };
    row.unresolved = recovered.unresolved.len();
    row.dag = compute_dag_metrics(&truth, &recovered, cfg.score_unresolved).ok();
    row.wall_seconds = start.elapsed().as_secs_f64();
    row
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CAverage {
    pub c: f64,
    /// Rows that carried scores.
    pub scored: usize,
    pub hamming: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mb: Option<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub config: ExperimentConfig,
    /// Seed-major, then ascending `C`.
    pub rows: Vec<MetricsRow>,
    pub averages: Vec<CAverage>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, k) = v.fold((0.0, 0usize), |(s, k), x| (s + x, k + 1));
    if k == 0 {
        f64::NAN
    } else {
        s / k as f64
    }
}

/// Per-`C` arithmetic means over the rows that carry scores.
pub fn average_rows(c_grid: &[f64], rows: &[MetricsRow]) -> Vec<CAverage> {
    c_grid
        .iter()
        .map(|&c| {
            let dag: Vec<SetMetrics> = rows.iter().filter(|r| r.c == c).filter_map(|r| r.dag).collect();
            let mb: Vec<SetMetrics> = rows.iter().filter(|r| r.c == c).filter_map(|r| r.mb).collect();
            CAverage {
                c,
                scored: dag.len(),
                hamming: mean(dag.iter().map(|m| m.hamming as f64)),
                precision: mean(dag.iter().map(|m| m.precision)),
                recall: mean(dag.iter().map(|m| m.recall)),
                f1: mean(dag.iter().map(|m| m.f1)),
                mb: (!mb.is_empty()).then(|| {
                    [
                        mean(mb.iter().map(|m| m.hamming as f64)),
                        mean(mb.iter().map(|m| m.precision)),
                        mean(mb.iter().map(|m| m.recall)),
                        mean(mb.iter().map(|m| m.f1)),
                    ]
                }),
            }
        })
        .collect()
}

/// Runs every `(seed, C)` cell; results are merged in seed-major order no
/// matter how the cells were scheduled.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult, ExperimentError> {
    cfg.validate()?;
    let cells: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| (0..cfg.c_grid.len()).map(move |j| (s, j)))
        .collect();
    let rows = cfg
        .execution()
        .map(&cells, |&(s, j)| run_cell(cfg, s, cfg.c_grid[j], j));
    let averages = average_rows(&cfg.c_grid, &rows);
    Ok(SweepResult {
        config: cfg.clone(),
        rows,
        averages,
    })
}

fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.6}")
    }
}

fn opt_cols(m: Option<SetMetrics>) -> String {
    match m {
        Some(m) => format!("{}\t{}\t{}\t{}", m.hamming, num(m.precision), num(m.recall), num(m.f1)),
        None => "na\tna\tna\tna".into(),
    }
}

/// The metric columns a plot table can be built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotMetric {
    Hamming,
    Precision,
    Recall,
    F1,
}

impl PlotMetric {
    pub const ALL: [PlotMetric; 4] = [PlotMetric::Hamming, PlotMetric::Precision, PlotMetric::Recall, PlotMetric::F1];

    pub fn name(self) -> &'static str {
        match self {
            PlotMetric::Hamming => "hamming",
            PlotMetric::Precision => "precision",
            PlotMetric::Recall => "recall",
            PlotMetric::F1 => "f1",
        }
    }

    fn of(self, m: &SetMetrics) -> f64 {
        match self {
            PlotMetric::Hamming => m.hamming as f64,
            PlotMetric::Precision => m.precision,
            PlotMetric::Recall => m.recall,
            PlotMetric::F1 => m.f1,
        }
    }
}

impl SweepResult {
    /// One tab-separated line per cell, without wall times so reruns are
    /// byte-identical.
    pub fn results_table(&self) -> String {
        let mut out = String::from(
            "seed\tC\tstatus\thamming\tprecision\trecall\tf1\tmb_hamming\tmb_precision\tmb_recall\tmb_f1\tselections\tqueries\tsamples\tobservations\tunresolved\tridge_solves\tmessage\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.seed,
                r.c,
                r.status,
                opt_cols(r.dag),
                opt_cols(r.mb),
                r.ledger.selections,
                r.ledger.queries,
                r.ledger.samples,
                r.observations,
                r.unresolved,
                r.ridge_solves,
                r.message,
            );
        }
        out
    }

    pub fn averages_table(&self) -> String {
        let mut out = String::from("C\tscored\thamming\tprecision\trecall\tf1\tmb_hamming\tmb_precision\tmb_recall\tmb_f1\n");
        for a in &self.averages {
            let mb = a.mb.map_or("na\tna\tna\tna".to_string(), |m| {
                m.iter().map(|&x| num(x)).collect::<Vec<_>>().join("\t")
            });
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                a.c,
                a.scored,
                num(a.hamming),
                num(a.precision),
                num(a.recall),
                num(a.f1),
                mb
            );
        }
        out
    }

    /// `C`, the mean, then one column per seed. `blanket` selects the
    /// Markov blanket scores instead of the parent-set scores.
    pub fn plot_table(&self, metric: PlotMetric, blanket: bool) -> String {
        let pick = |r: &MetricsRow| if blanket { r.mb } else { r.dag };
        let mut out = format!("C\tmean_{}", metric.name());
        for s in &self.config.seeds {
            let _ = write!(out, "\tseed_{s}");
        }
        out.push('\n');
        for &c in &self.config.c_grid {
            let vals: Vec<Option<f64>> = self
                .config
                .seeds
                .iter()
                .map(|&s| {
                    self.rows
                        .iter()
                        .find(|r| r.seed == s && r.c == c)
                        .and_then(pick)
                        .map(|m| metric.of(&m))
                })
                .collect();
            let _ = write!(out, "{c}\t{}", num(mean(vals.iter().flatten().copied())));
            for v in vals {
                let _ = write!(out, "\t{}", v.map_or("na".into(), num));
            }
            out.push('\n');
        }
        out
    }

    pub fn timings_table(&self) -> String {
        let mut out = String::from("seed\tC\twall_seconds\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{:.3}", r.seed, r.c, r.wall_seconds);
        }
        out
    }

    /// Writes every table into `dir` and returns the paths.
    pub fn write_tables(&self, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ExperimentError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut files = vec![
            ("results.tsv".to_string(), self.results_table()),
            ("averages.tsv".to_string(), self.averages_table()),
            ("timings.tsv".to_string(), self.timings_table()),
        ];
        for m in PlotMetric::ALL {
            files.push((format!("{}_vs_c.tsv", m.name()), self.plot_table(m, false)));
            if self.config.regime != Regime::BlackboxOnly {
                files.push((format!("mb_{}_vs_c.tsv", m.name()), self.plot_table(m, true)));
            }
        }
        let mut paths = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(io(&path))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(parents: &[&[usize]]) -> ParentMap {
        ParentMap {
            parents: parents.iter().map(|p| SubsetMask::from_nodes(p.iter().copied())).collect(),
            unresolved: SubsetMask::EMPTY,
        }
    }

    #[test]
    fn perfect_recovery() {
        let t = pm(&[&[], &[0], &[0, 1]]);
        let m = compute_dag_metrics(&t, &t, true).unwrap();
        assert_eq!(m.hamming, 0);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn reversed_edge_costs_two() {
        let t = pm(&[&[], &[0]]);
        let r = pm(&[&[1], &[]]);
        let m = compute_dag_metrics(&t, &r, true).unwrap();
        assert_eq!(m.hamming, 2);
        assert_eq!(m.true_positives, 0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn empty_recovery_scores_zero_precision() {
        let t = pm(&[&[], &[0], &[0, 1]]);
        let r = pm(&[&[], &[], &[]]);
        let m = compute_dag_metrics(&t, &r, true).unwrap();
        assert_eq!(m.hamming, 3);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        let e = pm(&[&[], &[]]);
        assert_eq!(compute_dag_metrics(&e, &e, true).unwrap().f1, 1.0);
    }

    #[test]
    fn unresolved_flag_skips_nodes() {
        let t = pm(&[&[], &[0], &[1]]);
        let mut r = pm(&[&[], &[], &[1]]);
        r.unresolved = SubsetMask::from_nodes([0, 1]);
        assert_eq!(compute_dag_metrics(&t, &r, true).unwrap().hamming, 1);
        let m = compute_dag_metrics(&t, &r, false).unwrap();
        assert_eq!(m.hamming, 0);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn supersets_have_full_recall() {
        let t = vec![SubsetMask::from_nodes([1]), SubsetMask::from_nodes([0])];
        let r = vec![SubsetMask::from_nodes([1, 2]), SubsetMask::from_nodes([0, 2])];
        let m = compute_mb_metrics(&t, &r).unwrap();
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.precision, 0.5);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(compute_mb_metrics(&[SubsetMask::EMPTY], &[]).is_err());
    }

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let parsed = ExperimentConfig::from_toml("seed = 9\nseeds = [4]\nc_grid = [-1.0, 0.5]\n[threshold]\nmode = \"largest_gap\"\n").unwrap();
        assert_eq!(parsed.seed, 9);
        assert_eq!(parsed.threshold, ThresholdMode::LargestGap);
        for bad in ["seeds = []", "c_grid = [1.0, 0.0]", "n = 2", "gamma_min = 0.3", "delta = 2.0", "bogus = 1"] {
            assert!(ExperimentConfig::from_toml(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn small_sweep_is_deterministic_and_averages_match() {
        let cfg = ExperimentConfig {
            n: 6,
            k: 3,
            seeds: vec![1, 2],
            c_grid: vec![-1.0, 0.0],
            regime: Regime::WithObservational,
            ..Default::default()
        };
        let a = run_sweep(&cfg).unwrap();
        let b = run_sweep(&ExperimentConfig {
            parallel: false,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(a.results_table(), b.results_table());
        assert_eq!(a.rows.len(), 4);
        for avg in &a.averages {
            let f1: Vec<f64> = a.rows.iter().filter(|r| r.c == avg.c).filter_map(|r| r.dag.map(|m| m.f1)).collect();
            assert!((avg.f1 - f1.iter().sum::<f64>() / f1.len() as f64).abs() < 1e-15);
        }
        assert!(a.plot_table(PlotMetric::F1, true).lines().count() == 3);
    }
}
