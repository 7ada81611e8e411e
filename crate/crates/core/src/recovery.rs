//! Candidate Fourier basis, random measurement systems, and support
//! thresholding for a single node.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fourier::parity;
use crate::solver::{bpdn, SolverError, SolverOptions};
use crate::subset::SubsetMask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecoveryError {
    #[error("working set {set} has fewer than 3 nodes")]
    TooSmall { set: SubsetMask },
    #[error("node {node} is not in working set {set}")]
    NotInSet { node: usize, set: SubsetMask },
    #[error("{rows} measurements for {rhs} right-hand-side values")]
    Shape { rows: usize, rhs: usize },
}

/// The empty set, all singletons and all pairs of a ground set, in that
/// order (singletons ascending, pairs lexicographic).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateBasis {
    pub node: usize,
    pub ground: SubsetMask,
    pub sets: Vec<SubsetMask>,
}

impl CandidateBasis {
    pub fn over_ground(node: usize, ground: SubsetMask) -> Self {
        let members = ground.to_vec();
        let t = members.len();
        let mut sets = Vec::with_capacity(1 + t + t * t.saturating_sub(1) / 2);
        sets.push(SubsetMask::EMPTY);
        sets.extend(members.iter().map(|&j| SubsetMask::singleton(j)));
        for (a, &x) in members.iter().enumerate() {
            for &y in &members[a + 1..] {
                sets.push(SubsetMask::pair(x, y));
            }
        }
        Self { node, ground, sets }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn index_of(&self, b: SubsetMask) -> Option<usize> {
        self.sets.iter().position(|&s| s == b)
    }
}

/// Basis for node `i` over `S \ {i}`.
pub fn build_candidate_basis(s: SubsetMask, i: usize) -> Result<CandidateBasis, RecoveryError> {
    if !s.contains(i) {
        return Err(RecoveryError::NotInSet { node: i, set: s });
    }
    if s.len() < 3 {
        return Err(RecoveryError::TooSmall { set: s });
    }
    Ok(CandidateBasis::over_ground(i, s.without(i)))
}

/// `m` independent uniform subsets of `ground` (duplicates allowed).
pub fn draw_measurement_rows<R: Rng>(ground: SubsetMask, m: usize, rng: &mut R) -> Vec<SubsetMask> {
    (0..m)
        .map(|_| SubsetMask::from_bits(rng.random::<u64>() & ground.bits()))
        .collect()
}

/// `(-1)^{|A_j ∩ B_k|}` for rows `A_j` and basis sets `B_k`.
pub fn sign_matrix(rows: &[SubsetMask], basis: &CandidateBasis) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), basis.len(), |j, k| parity(rows[j], basis.sets[k]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSystem {
    pub rows: Vec<SubsetMask>,
    pub basis: CandidateBasis,
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub eps: f64,
}

impl MeasurementSystem {
    pub fn new(basis: CandidateBasis, rows: Vec<SubsetMask>, rhs: Vec<f64>, eps: f64) -> Result<Self, RecoveryError> {
        if rows.len() != rhs.len() {
            return Err(RecoveryError::Shape {
                rows: rows.len(),
                rhs: rhs.len(),
            });
        }
        let matrix = sign_matrix(&rows, &basis);
        Ok(Self {
            rows,
            basis,
            matrix,
            rhs: DVector::from_vec(rhs),
            eps,
        })
    }

    pub fn residual(&self, beta: &DVector<f64>) -> f64 {
        (&self.matrix * beta - &self.rhs).norm()
    }
}

/// Solves the system with the default interior-point solver.
pub fn bpdn_solve(sys: &MeasurementSystem) -> Result<DVector<f64>, SolverError> {
    bpdn_solve_with(sys, &SolverOptions::default())
}

pub fn bpdn_solve_with(sys: &MeasurementSystem, opts: &SolverOptions) -> Result<DVector<f64>, SolverError> {
    bpdn(&sys.matrix, &sys.rhs, sys.eps, opts).map(|s| s.beta)
}

/// How the support threshold is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ThresholdMode {
    /// A fixed cutoff.
    Absolute { tau: f64 },
    /// The midpoint of the widest gap among `0` and the sorted magnitudes of
    /// all non-empty-set coefficients.
    LargestGap,
}

impl ThresholdMode {
    pub fn label(&self) -> &'static str {
        match self {
            ThresholdMode::Absolute { .. } => "absolute",
            ThresholdMode::LargestGap => "largest_gap",
        }
    }

    pub fn resolve(&self, values: impl IntoIterator<Item = f64>) -> f64 {
        match *self {
            ThresholdMode::Absolute { tau } => tau,
            ThresholdMode::LargestGap => largest_gap(values),
        }
    }
}

fn largest_gap(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().map(f64::abs).collect();
    v.push(0.0);
    v.sort_by(f64::total_cmp);
    v.windows(2)
        .max_by(|a, b| (a[1] - a[0]).total_cmp(&(b[1] - b[0])))
        .map_or(0.0, |w| 0.5 * (w[0] + w[1]))
}

/// Thresholded solver output for one node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub node: usize,
    pub sets: Vec<SubsetMask>,
    pub beta: Vec<f64>,
    pub threshold: f64,
    pub support: Vec<SubsetMask>,
    pub is_terminal: bool,
    pub parents: SubsetMask,
    /// Largest pair-coefficient magnitude; how far the node is from being
    /// judged terminal.
    pub pair_margin: f64,
}

/// Support `{B : |beta_B| > tau}`; the node is terminal iff no pair survives.
pub fn threshold_support(basis: &CandidateBasis, beta: &[f64], tau: f64) -> RecoveryResult {
    assert_eq!(basis.len(), beta.len(), "one coefficient per basis set");
    let support: Vec<SubsetMask> = basis
        .sets
        .iter()
        .zip(beta)
        .filter(|(_, b)| b.abs() > tau)
        .map(|(&s, _)| s)
        .collect();
    let is_terminal = support.iter().all(|s| s.len() < 2);
    let parents = support
        .iter()
        .filter(|s| s.len() == 1)
        .fold(SubsetMask::EMPTY, |acc, s| acc.union(*s));
    let pair_margin = basis
        .sets
        .iter()
        .zip(beta)
        .filter(|(s, _)| s.len() == 2)
        .map(|(_, b)| b.abs())
        .fold(0.0, f64::max);
    RecoveryResult {
        node: basis.node,
        sets: basis.sets.clone(),
        beta: beta.to_vec(),
        threshold: tau,
        support,
        is_terminal,
        parents,
        pair_margin,
    }
}

/// Plain-text record of one solve: basis, rows, measurements, coefficients
/// and threshold, one record per line.
pub fn debug_dump(sys: &MeasurementSystem, result: &RecoveryResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "node {} eps {:e} threshold {:e}", result.node, sys.eps, result.threshold);
    for (k, (s, b)) in result.sets.iter().zip(&result.beta).enumerate() {
        let _ = writeln!(out, "basis {k} {s} {b:e}");
    }
    for (j, (a, y)) in sys.rows.iter().zip(sys.rhs.iter()).enumerate() {
        let _ = writeln!(out, "row {j} {a} {y:e}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn basis_sizes_and_order() {
        let s = SubsetMask::from_nodes([0, 2, 5, 7]);
        let b = build_candidate_basis(s, 2).unwrap();
        assert_eq!(b.len(), 7);
        let expect: Vec<SubsetMask> = vec![
            SubsetMask::EMPTY,
            SubsetMask::singleton(0),
            SubsetMask::singleton(5),
            SubsetMask::singleton(7),
            SubsetMask::pair(0, 5),
            SubsetMask::pair(0, 7),
            SubsetMask::pair(5, 7),
        ];
        assert_eq!(b.sets, expect);
        assert_eq!(build_candidate_basis(SubsetMask::full(20), 3).unwrap().len(), 191);
        assert_eq!(build_candidate_basis(s, 2).unwrap(), b);
    }

    #[test]
    fn basis_errors() {
        assert!(matches!(
            build_candidate_basis(SubsetMask::from_nodes([1, 2]), 1),
            Err(RecoveryError::TooSmall { .. })
        ));
        assert!(matches!(
            build_candidate_basis(SubsetMask::full(4), 6),
            Err(RecoveryError::NotInSet { .. })
        ));
    }

    #[test]
    fn rows_are_uniform_and_exclude_the_node() {
        let ground = SubsetMask::full(12).without(4);
        let rows = draw_measurement_rows(ground, 100_000, &mut rng::stream(3, &[]));
        assert!(rows.iter().all(|r| r.is_subset_of(ground)));
        for j in ground {
            let freq = rows.iter().filter(|r| r.contains(j)).count() as f64 / rows.len() as f64;
            assert!((0.49..=0.51).contains(&freq), "element {j}: {freq}");
        }
        let again = draw_measurement_rows(ground, 100, &mut rng::stream(3, &[]));
        assert_eq!(again[..], rows[..100]);
    }

    #[test]
    fn matrix_is_signed_with_constant_first_column() {
        let basis = CandidateBasis::over_ground(0, SubsetMask::from_nodes([1, 2, 3]));
        let rows = draw_measurement_rows(basis.ground, 20, &mut rng::stream(1, &[]));
        let m = sign_matrix(&rows, &basis);
        assert!(m.iter().all(|&v| v == 1.0 || v == -1.0));
        assert!(m.column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn threshold_rules() {
        let basis = CandidateBasis::over_ground(0, SubsetMask::from_nodes([1, 2, 3]));
        let zero = threshold_support(&basis, &[0.0; 7], 0.01);
        assert!(zero.is_terminal);
        assert_eq!(zero.parents, SubsetMask::EMPTY);

        let mut beta = [0.0; 7];
        beta[0] = 0.5;
        beta[2] = -0.2;
        let r = threshold_support(&basis, &beta, 0.1);
        assert!(r.is_terminal);
        assert_eq!(r.parents, SubsetMask::singleton(2));

        beta[5] = 0.3;
        let r = threshold_support(&basis, &beta, 0.1);
        assert!(!r.is_terminal);
        assert_eq!(r.pair_margin, 0.3);
    }

    #[test]
    fn largest_gap_splits_noise_from_signal() {
        let tau = ThresholdMode::LargestGap.resolve([1e-5, -2e-5, 0.2, 0.25, -0.3]);
        assert!(tau > 2e-5 && tau < 0.2);
        assert_eq!(ThresholdMode::LargestGap.resolve([0.0, 0.0]), 0.0);
    }
}
