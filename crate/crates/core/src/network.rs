//! Rank-2 conditional probability tables, Bayesian networks over them, and
//! the random instance generator.
//!
//! A rank-2 CPT writes the conditional of node `i` given its parents as an
//! additive family
//!
//! ```text
//! P(X_i = x | X_pa = x_pa) = Q_i(x) + sum_{j in pa(i)} Q_ij(x, x_j)
//! ```
//!
//! so it is stored as one 2-vector plus one 2x2 table per parent.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fourier;
use crate::graph::{generate_random_dag, Dag, GenerationError, GraphError};
use crate::rng;
use crate::subset::SubsetMask;

/// Largest network whose full joint table may be materialized.
pub const JOINT_CAP: usize = 25;

const VALIDITY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("assignment for node {node}: {detail}")]
    Assignment { node: usize, detail: String },
    #[error("CPT of node {node} is invalid: {detail}")]
    InvalidCpt { node: usize, detail: String },
    #[error("joint table needs n <= {JOINT_CAP}, network has {0} nodes")]
    Capacity(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Additive (rank-2) CPT of a single node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTwoCpt {
    pub node: usize,
    /// `Q_i(X_i = 0)`, `Q_i(X_i = 1)`.
    pub q_node: [f64; 2],
    /// `q_pair[j][x_i][x_j] = Q_ij(X_i = x_i, X_j = x_j)`.
    pub q_pair: BTreeMap<usize, [[f64; 2]; 2]>,
}

impl RankTwoCpt {
    pub fn parents(&self) -> SubsetMask {
        self.q_pair.keys().copied().collect()
    }

    /// `P(X_node = x_i | parents)` for an explicit parent assignment.
    ///
    /// The assignment must name every parent exactly once and nothing else.
    pub fn conditional_prob(&self, x_i: bool, parents: &[(usize, bool)]) -> Result<f64, NetworkError> {
        let mut seen = SubsetMask::EMPTY;
        let mut state = SubsetMask::EMPTY;
        for &(j, v) in parents {
            if !self.q_pair.contains_key(&j) {
                return Err(NetworkError::Assignment {
                    node: self.node,
                    detail: format!("{j} is not a parent"),
                });
            }
            if seen.contains(j) {
                return Err(NetworkError::Assignment {
                    node: self.node,
                    detail: format!("parent {j} assigned twice"),
                });
            }
            seen = seen.with(j);
            if v {
                state = state.with(j);
            }
        }
        let missing = self.parents().difference(seen);
        if let Some(j) = missing.first() {
            return Err(NetworkError::Assignment {
                node: self.node,
                detail: format!("parent {j} not assigned"),
            });
        }
        Ok(self.prob_in_state(x_i, state))
    }

    /// Conditional probability with parent values read from the bits of a
    /// full network state (bit `j` set means `X_j = 1`).
    #[inline]
    pub fn prob_in_state(&self, x_i: bool, state: SubsetMask) -> f64 {
        let xi = x_i as usize;
        self.q_pair
            .iter()
            .fold(self.q_node[xi], |acc, (&j, t)| acc + t[xi][state.contains(j) as usize])
    }

    /// Minimum and maximum of `P(X_i = x_i | .)` over all parent assignments.
    /// The family is additive, so both extremes are separable.
    pub fn range(&self, x_i: bool) -> (f64, f64) {
        let xi = x_i as usize;
        self.q_pair.values().fold((self.q_node[xi], self.q_node[xi]), |(lo, hi), t| {
            (lo + t[xi][0].min(t[xi][1]), hi + t[xi][0].max(t[xi][1]))
        })
    }

    /// Checks that every parent assignment yields a probability distribution.
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |detail: String| NetworkError::InvalidCpt { node: self.node, detail };
        if self.q_pair.contains_key(&self.node) {
            return Err(bad("node listed as its own parent".into()));
        }
        // the sum over x_i is itself additive: it equals 1 everywhere iff each
        // pair table's column sums agree and the constants add up to 1
        let mut total = self.q_node[0] + self.q_node[1];
        for (j, t) in &self.q_pair {
            let (c0, c1) = (t[0][0] + t[1][0], t[0][1] + t[1][1]);
            if (c0 - c1).abs() > VALIDITY_TOL {
                return Err(bad(format!("normalization depends on parent {j}")));
            }
            total += c0;
        }
        if (total - 1.0).abs() > VALIDITY_TOL {
            return Err(bad(format!("conditionals sum to {total}, not 1")));
        }
        for x in [false, true] {
            let (lo, hi) = self.range(x);
            if lo < -VALIDITY_TOL || hi > 1.0 + VALIDITY_TOL {
                return Err(bad(format!("P(X={}) ranges over [{lo}, {hi}]", x as u8)));
            }
        }
        Ok(())
    }

    /// Half the difference `Q_ij(v, 0) - Q_ij(v, 1)`; the singleton Fourier
    /// coefficient contributed by parent `j` when the node takes value `v`.
    pub fn pair_effect(&self, j: usize, value: bool) -> Option<f64> {
        let t = self.q_pair.get(&j)?;
        let v = value as usize;
        Some(0.5 * (t[v][0] - t[v][1]))
    }
}

/// A DAG with one rank-2 CPT per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkFile", into = "NetworkFile")]
pub struct BayesNet {
    dag: Dag,
    cpts: Vec<RankTwoCpt>,
}

/// On-disk layout.
#[derive(Serialize, Deserialize)]
struct NetworkFile {
    n: usize,
    edges: Vec<[usize; 2]>,
    cpts: Vec<RankTwoCpt>,
}

impl TryFrom<NetworkFile> for BayesNet {
    type Error = NetworkError;
    fn try_from(f: NetworkFile) -> Result<Self, NetworkError> {
        let dag = Dag::new(f.n, f.edges.iter().map(|e| (e[0], e[1])))?;
        BayesNet::new(dag, f.cpts)
    }
}

impl From<BayesNet> for NetworkFile {
    fn from(bn: BayesNet) -> Self {
        NetworkFile {
            n: bn.n(),
            edges: bn.dag.edges().into_iter().map(|(p, c)| [p, c]).collect(),
            cpts: bn.cpts,
        }
    }
}

impl BayesNet {
    pub fn new(dag: Dag, mut cpts: Vec<RankTwoCpt>) -> Result<Self, NetworkError> {
        if cpts.len() != dag.n() {
            return Err(NetworkError::InvalidCpt {
                node: cpts.len().min(dag.n()),
                detail: format!("expected {} CPTs, got {}", dag.n(), cpts.len()),
            });
        }
        cpts.sort_by_key(|c| c.node);
        for (i, cpt) in cpts.iter().enumerate() {
            if cpt.node != i {
                return Err(NetworkError::InvalidCpt {
                    node: cpt.node,
                    detail: "CPT nodes must be exactly 0..n".into(),
                });
            }
            if cpt.parents() != dag.parents(i) {
                return Err(NetworkError::InvalidCpt {
                    node: i,
                    detail: format!(
                        "pair tables cover {} but parents are {}",
                        cpt.parents(),
                        dag.parents(i)
                    ),
                });
            }
            cpt.validate()?;
        }
        Ok(BayesNet { dag, cpts })
    }

    /// Random faithful-looking instance: DAG then CPTs, both from `seed`.
    pub fn random(n: usize, k_max: usize, gamma_min: f64, seed: u64) -> Result<Self, GenerationError> {
        let dag = generate_random_dag(n, k_max, rng::derive_seed(seed, &[1]))?;
        generate_rank2_cpts(&dag, gamma_min, rng::derive_seed(seed, &[2]))
    }

    pub fn n(&self) -> usize {
        self.dag.n()
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn cpt(&self, i: usize) -> &RankTwoCpt {
        &self.cpts[i]
    }

    pub fn cpts(&self) -> &[RankTwoCpt] {
        &self.cpts
    }

    /// Joint probability of a full state.
    pub fn joint_prob(&self, state: SubsetMask) -> f64 {
        self.cpts
            .iter()
            .map(|c| c.prob_in_state(state.contains(c.node), state))
            .product()
    }

    /// Full joint table indexed by state bits; refuses beyond [`JOINT_CAP`].
    pub fn joint_table(&self) -> Result<Vec<f64>, NetworkError> {
        let n = self.n();
        if n > JOINT_CAP {
            return Err(NetworkError::Capacity(n));
        }
        Ok((0..1u64 << n)
            .map(|s| self.joint_prob(SubsetMask::from_bits(s)))
            .collect())
    }

    /// `P(X_i = 0 | X_rest)` inside the sub-network on the ancestral set
    /// `within`, using only the factors that mention `X_i`. Values for every
    /// member of the Markov blanket of `i` in that sub-network are read from
    /// `state`; all other bits are ignored.
    ///
    /// Returns `None` when both factor products vanish.
    pub fn blanket_conditional(&self, i: usize, within: SubsetMask, state: SubsetMask) -> Option<f64> {
        let kids = self.dag.children(i).intersection(within);
        let weight = |xi: bool| {
            let s = if xi { state.with(i) } else { state.without(i) };
            kids.iter().fold(self.cpts[i].prob_in_state(xi, s), |acc, c| {
                acc * self.cpts[c].prob_in_state(s.contains(c), s)
            })
        };
        let (w0, w1) = (weight(false), weight(true));
        let den = w0 + w1;
        (den > 0.0).then(|| w0 / den)
    }

    /// Largest pair (|B| = 2) Fourier coefficient of `A -> P(X_i = 0 | x^A)`
    /// in the sub-network on `within`, over subsets of the local blanket.
    pub fn pair_witness(&self, i: usize, within: SubsetMask) -> f64 {
        let mb = self.dag.markov_blanket_within(i, within);
        if mb.len() < 2 {
            return 0.0;
        }
        let table: Vec<f64> = (0..1usize << mb.len())
            .map(|k| {
                self.blanket_conditional(i, within, SubsetMask::expand(k, mb))
                    .unwrap_or(0.0)
            })
            .collect();
        let coeffs = fourier::walsh_hadamard(table);
        coeffs
            .iter()
            .enumerate()
            .filter(|(k, _)| k.count_ones() == 2)
            .map(|(_, c)| c.abs())
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, NetworkError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetworkError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetworkError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Options for [`generate_rank2_cpts_with`].
#[derive(Clone, Debug)]
pub struct CptOptions {
    /// Rejection budget per node for the singleton-effect floor.
    pub node_attempts: usize,
    /// Resampling rounds for the pair-coefficient witness.
    pub repair_rounds: usize,
    /// Require a pair coefficient of at least `gamma_min` for every node
    /// that is non-terminal at some stage of peeling.
    pub require_pair_witness: bool,
}

impl Default for CptOptions {
    fn default() -> Self {
        Self {
            node_attempts: 1000,
            repair_rounds: 1000,
            require_pair_witness: true,
        }
    }
}

/// Draws rank-2 CPTs for `dag` with every effect coefficient at least
/// `gamma_min` in magnitude and every conditional in `[gamma_min, 1 - gamma_min]`.
pub fn generate_rank2_cpts(dag: &Dag, gamma_min: f64, seed: u64) -> Result<BayesNet, GenerationError> {
    generate_rank2_cpts_with(dag, gamma_min, seed, &CptOptions::default())
}

pub fn generate_rank2_cpts_with(
    dag: &Dag,
    gamma_min: f64,
    seed: u64,
    opts: &CptOptions,
) -> Result<BayesNet, GenerationError> {
    if !(gamma_min > 0.0 && gamma_min < 0.25) {
        return Err(GenerationError::InvalidParameters(format!(
            "gamma_min = {gamma_min} must lie in (0, 0.25)"
        )));
    }
    let mut rng = rng::stream(seed, &[0xC97]);
    let mut cpts = Vec::with_capacity(dag.n());
    for i in 0..dag.n() {
        cpts.push(draw_cpt(i, dag.parents(i), gamma_min, opts.node_attempts, &mut rng)?);
    }
    let assemble = |cpts: &[RankTwoCpt]| {
        BayesNet::new(dag.clone(), cpts.to_vec()).map_err(|e| GenerationError::InvalidParameters(e.to_string()))
    };
    if !opts.require_pair_witness {
        return assemble(&cpts);
    }
    let stages: Vec<SubsetMask> = dag.peel_sequence().into_iter().filter(|s| s.len() >= 3).collect();
    let mut tightest = String::new();
    for _ in 0..opts.repair_rounds.max(1) {
        let bn = assemble(&cpts)?;
        match first_weak_witness(&bn, &stages, gamma_min) {
            None => return Ok(bn),
            Some((i, within, value)) => {
                tightest = format!(
                    "node {i} in stage {within}: largest pair coefficient {value:.3e} < {gamma_min}"
                );
                let kids = dag.children(i).intersection(within);
                for j in kids.with(i) {
                    cpts[j] = draw_cpt(j, dag.parents(j), gamma_min, opts.node_attempts, &mut rng)?;
                }
            }
        }
    }
    Err(GenerationError::Exhausted {
        attempts: opts.repair_rounds,
        tightest,
    })
}

fn first_weak_witness(bn: &BayesNet, stages: &[SubsetMask], gamma_min: f64) -> Option<(usize, SubsetMask, f64)> {
    for &s in stages {
        let terminal = bn.dag.terminal_nodes_within(s);
        for i in s.difference(terminal) {
            // a blanket below two members has no pair terms at all; that is a
            // property of the graph, which no choice of CPT can repair
            if bn.dag.markov_blanket_within(i, s).len() < 2 {
                continue;
            }
            let w = bn.pair_witness(i, s);
            if w < gamma_min {
                return Some((i, s, w));
            }
        }
    }
    None
}

fn draw_cpt<R: Rng>(
    node: usize,
    parents: SubsetMask,
    gamma: f64,
    attempts: usize,
    rng: &mut R,
) -> Result<RankTwoCpt, GenerationError> {
    let mut best = 0.0f64;
    for _ in 0..attempts.max(1) {
        let raw_node: f64 = rng.random();
        let raw: Vec<(usize, [f64; 2])> = parents.iter().map(|j| (j, [rng.random(), rng.random()])).collect();
        let lo = raw_node + raw.iter().map(|(_, r)| r[0].min(r[1])).sum::<f64>();
        let hi = raw_node + raw.iter().map(|(_, r)| r[0].max(r[1])).sum::<f64>();
        let room = 1.0 - 2.0 * gamma;
        let scale = if hi - lo > room { room / (hi - lo) } else { 1.0 };
        // place the scaled range uniformly inside [gamma, 1 - gamma]
        let slack = room - scale * (hi - lo);
        let shift = gamma - scale * lo + rng.random::<f64>() * slack;

        let weakest = raw
            .iter()
            .map(|(_, r)| 0.5 * scale * (r[0] - r[1]).abs())
            .fold(f64::INFINITY, f64::min);
        if weakest < gamma {
            best = best.max(weakest);
            continue;
        }
        let q1 = shift + scale * raw_node;
        let q_pair = raw
            .into_iter()
            .map(|(j, r)| {
                let one = [scale * r[0], scale * r[1]];
                (j, [[-one[0], -one[1]], one])
            })
            .collect();
        return Ok(RankTwoCpt {
            node,
            q_node: [1.0 - q1, q1],
            q_pair,
        });
    }
    Err(GenerationError::Exhausted {
        attempts,
        tightest: format!(
            "node {node}: weakest parent effect {best:.3e} < gamma_min {gamma}"
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_parent(q10: f64, q11: f64) -> RankTwoCpt {
        // node 1 with parent 0; P(X1=1 | x0) = 0.3 + q1x0
        RankTwoCpt {
            node: 1,
            q_node: [0.7, 0.3],
            q_pair: BTreeMap::from([(0, [[-q10, -q11], [q10, q11]])]),
        }
    }

    #[test]
    fn no_parent_conditional() {
        let c = RankTwoCpt {
            node: 0,
            q_node: [0.3, 0.7],
            q_pair: BTreeMap::new(),
        };
        assert_eq!(c.conditional_prob(true, &[]).unwrap(), 0.7);
        assert_eq!(c.conditional_prob(false, &[]).unwrap(), 0.3);
    }

    #[test]
    fn assignment_contract() {
        let c = single_parent(0.2, 0.6);
        assert!(c.conditional_prob(true, &[]).is_err());
        assert!(c.conditional_prob(true, &[(0, true), (2, false)]).is_err());
        assert!(c.conditional_prob(true, &[(0, true), (0, false)]).is_err());
        let p = c.conditional_prob(true, &[(0, true)]).unwrap();
        assert!((p - 0.9).abs() < 1e-15);
    }

    #[test]
    fn validate_catches_bad_tables() {
        let mut c = single_parent(0.2, 0.6);
        c.validate().unwrap();
        c.q_pair.get_mut(&0).unwrap()[1][1] = 0.8;
        assert!(c.validate().is_err());
        let c = single_parent(0.2, 0.9);
        assert!(c.validate().is_err(), "0.3 + 0.9 > 1");
    }

    #[test]
    fn generated_cpts_are_valid_and_exhaustively_normalized() {
        let bn = BayesNet::random(8, 4, 0.02, 3).unwrap();
        for cpt in bn.cpts() {
            let pa = cpt.parents();
            for sub in pa.subsets() {
                let assign: Vec<(usize, bool)> = pa.iter().map(|j| (j, sub.contains(j))).collect();
                let p0 = cpt.conditional_prob(false, &assign).unwrap();
                let p1 = cpt.conditional_prob(true, &assign).unwrap();
                assert!((0.02 - 1e-12..=0.98 + 1e-12).contains(&p1));
                assert!((p0 + p1 - 1.0).abs() < 1e-12);
            }
            for j in pa {
                assert!(cpt.pair_effect(j, true).unwrap().abs() >= 0.02);
            }
        }
    }

    #[test]
    fn joint_sums_to_one() {
        let bn = BayesNet::random(12, 4, 0.02, 11).unwrap();
        let total: f64 = bn.joint_table().unwrap().iter().sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn joint_capacity() {
        let dag = Dag::new(26, []).unwrap();
        let bn = generate_rank2_cpts(&dag, 0.02, 0).unwrap();
        assert!(matches!(bn.joint_table(), Err(NetworkError::Capacity(26))));
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let bn = BayesNet::random(10, 4, 0.02, 9).unwrap();
        let text = bn.to_json();
        let back = BayesNet::from_json(&text).unwrap();
        assert_eq!(back, bn);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn parse_rejects_mismatched_parents() {
        let text = r#"{"n":2,"edges":[[0,1]],"cpts":[
            {"node":0,"q_node":[0.5,0.5],"q_pair":{}},
            {"node":1,"q_node":[0.5,0.5],"q_pair":{}}]}"#;
        assert!(BayesNet::from_json(text).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = BayesNet::random(20, 4, 0.02, 7).unwrap();
        let b = BayesNet::random(20, 4, 0.02, 7).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }
}
