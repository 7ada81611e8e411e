//! Parity-basis Fourier analysis of real set functions.
//!
//! For a ground set `T` with `t = |T|`, the coefficients are
//! `f^(B) = 2^-t * sum_{A ⊆ T} f(A) (-1)^{|A ∩ B|}` and the inverse is
//! `f(A) = sum_B f^(B) (-1)^{|A ∩ B|}`. Dense tables are indexed by
//! [`SubsetMask::compress`] relative to the ground set.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::network::{BayesNet, RankTwoCpt, JOINT_CAP};
use crate::subset::SubsetMask;

/// Largest ground set that may be tabulated.
pub const TABULATION_CAP: usize = 25;
/// Largest ground set accepted by the quadratic reference transform.
pub const NAIVE_CAP: usize = 12;
/// Coefficients at or below this magnitude are dropped from sparse spectra.
pub const ZERO_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum FourierError {
    #[error("ground set of size {size} exceeds the limit of {cap}")]
    Capacity { size: usize, cap: usize },
    #[error("node {0} is terminal")]
    Terminal(usize),
    #[error("conditional of node {0} is undefined for some assignment")]
    Undefined(usize),
}

/// `(-1)^{|A ∩ B|}`.
#[inline]
pub fn parity(a: SubsetMask, b: SubsetMask) -> f64 {
    if a.intersection(b).len().is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// In-place unnormalized butterfly over a `2^t` table.
fn butterfly(v: &mut [f64]) {
    let n = v.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for block in v.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                let (a, b) = (*x, *y);
                *x = a + b;
                *y = a - b;
            }
        }
        h *= 2;
    }
}

/// Forward transform of a dense table, normalized by `2^-t`.
pub fn walsh_hadamard(mut table: Vec<f64>) -> Vec<f64> {
    butterfly(&mut table);
    let scale = 1.0 / table.len() as f64;
    table.iter_mut().for_each(|c| *c *= scale);
    table
}

/// Inverse transform of a dense coefficient table.
pub fn inverse_walsh_hadamard(mut coeffs: Vec<f64>) -> Vec<f64> {
    butterfly(&mut coeffs);
    coeffs
}

/// A set function tabulated over every subset of its ground set.
#[derive(Clone, Debug, PartialEq)]
pub struct SetFunction {
    ground: SubsetMask,
    table: Vec<f64>,
}

impl SetFunction {
    pub fn tabulate<F: FnMut(SubsetMask) -> f64>(ground: SubsetMask, mut f: F) -> Result<Self, FourierError> {
        check_cap(ground.len(), TABULATION_CAP)?;
        let table = (0..1usize << ground.len())
            .map(|k| f(SubsetMask::expand(k, ground)))
            .collect();
        Ok(Self { ground, table })
    }

    pub fn from_table(ground: SubsetMask, table: Vec<f64>) -> Result<Self, FourierError> {
        check_cap(ground.len(), TABULATION_CAP)?;
        assert_eq!(table.len(), 1usize << ground.len(), "table length must be 2^|ground|");
        Ok(Self { ground, table })
    }

    pub fn ground(&self) -> SubsetMask {
        self.ground
    }

    pub fn eval(&self, a: SubsetMask) -> f64 {
        self.table[a.intersection(self.ground).compress(self.ground)]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }
}

/// Sparse map from subsets to coefficients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FourierSpectrum {
    pub ground: SubsetMask,
    pub coeffs: BTreeMap<SubsetMask, f64>,
}

impl FourierSpectrum {
    /// Builds a spectrum from a dense coefficient table, dropping near-zeros.
    pub fn from_dense(ground: SubsetMask, dense: &[f64]) -> Self {
        let coeffs = dense
            .iter()
            .enumerate()
            .filter(|(_, c)| c.abs() > ZERO_TOL)
            .map(|(k, &c)| (SubsetMask::expand(k, ground), c))
            .collect();
        Self { ground, coeffs }
    }

    /// Coefficient at `b`; absent keys are zero.
    pub fn get(&self, b: SubsetMask) -> f64 {
        self.coeffs.get(&b).copied().unwrap_or(0.0)
    }

    pub fn support(&self) -> Vec<SubsetMask> {
        self.coeffs.keys().copied().collect()
    }

    /// Sum of squared coefficients.
    pub fn energy(&self) -> f64 {
        self.coeffs.values().map(|c| c * c).sum()
    }
}

fn check_cap(size: usize, cap: usize) -> Result<(), FourierError> {
    if size > cap {
        Err(FourierError::Capacity { size, cap })
    } else {
        Ok(())
    }
}

/// Fast transform of a tabulated set function.
pub fn brute_force_transform(f: &SetFunction) -> FourierSpectrum {
    FourierSpectrum::from_dense(f.ground, &walsh_hadamard(f.table.clone()))
}

/// Dense coefficients from the defining double sum. Quadratic in `2^t`;
/// kept as a reference for the butterfly.
pub fn naive_transform(f: &SetFunction) -> Result<Vec<f64>, FourierError> {
    let t = f.ground.len();
    check_cap(t, NAIVE_CAP)?;
    let size = 1usize << t;
    let scale = 1.0 / size as f64;
    Ok((0..size)
        .map(|b| {
            let bm = SubsetMask::from_bits(b as u64);
            scale
                * (0..size)
                    .map(|a| f.table[a] * parity(SubsetMask::from_bits(a as u64), bm))
                    .sum::<f64>()
        })
        .collect())
}

/// `f(A) = sum_B f^(B) (-1)^{|A ∩ B|}`.
pub fn reconstruct(spectrum: &FourierSpectrum, a: SubsetMask) -> f64 {
    spectrum.coeffs.iter().map(|(&b, &c)| c * parity(a, b)).sum()
}

/// Closed-form spectrum of `A -> P(X_t = value | x^A)` for a terminal node
/// `t`, where `x^A` sets exactly the members of `A` to 1.
///
/// Only the empty set and the parent singletons can carry mass:
/// `f^(∅) = Q_t(v) + ½ sum_j (Q_tj(v,0) + Q_tj(v,1))` and
/// `f^({j}) = ½ (Q_tj(v,0) − Q_tj(v,1))`.
pub fn analytic_terminal_spectrum(cpt: &RankTwoCpt, ground: SubsetMask, value: bool) -> FourierSpectrum {
    let v = value as usize;
    let mut dense: Vec<(SubsetMask, f64)> = Vec::with_capacity(cpt.q_pair.len() + 1);
    let mut empty = cpt.q_node[v];
    for (&j, t) in &cpt.q_pair {
        empty += 0.5 * (t[v][0] + t[v][1]);
        dense.push((SubsetMask::singleton(j), 0.5 * (t[v][0] - t[v][1])));
    }
    dense.push((SubsetMask::EMPTY, empty));
    FourierSpectrum {
        ground,
        coeffs: dense.into_iter().filter(|(_, c)| c.abs() > ZERO_TOL).collect(),
    }
}

/// Coefficient at `b` of `A -> P(X_i = 0 | X_rest = x^A)` for a non-terminal
/// node, evaluated from the closed form: zero unless `b ⊆ mb(i)`, otherwise
/// the normalized-factor-product average over all `2^{n-1}` assignments.
pub fn nonterminal_coeff(bn: &BayesNet, i: usize, b: SubsetMask) -> Result<f64, FourierError> {
    let dag = bn.dag();
    if dag.is_terminal(i) {
        return Err(FourierError::Terminal(i));
    }
    if !b.is_subset_of(dag.markov_blanket(i)) {
        return Ok(0.0);
    }
    check_cap(bn.n(), JOINT_CAP)?;
    let rest = dag.nodes().without(i);
    let everything = dag.nodes();
    let mut total = 0.0;
    for a in rest.subsets() {
        let r = bn
            .blanket_conditional(i, everything, a)
            .ok_or(FourierError::Undefined(i))?;
        total += r * parity(a, b);
    }
    Ok(total / (1u64 << rest.len()) as f64)
}
