//! Markov blanket recovery from observational moments.
//!
//! For target `i`, let `z = (1[X_j = 0] for j != i, 1)`. The coefficients
//! `q = (Q~_ij ..., Q~_i)` of the linear model
//! `P(X_i = 0 | x) = Q~_i + sum_j Q~_ij 1[x_j = 0]` solve
//! `E[z z^T] q = E[z 1[X_i = 0]]`, an `n x n` system built from unary and
//! pairwise zero-frequencies only. Blanket members are the `j` with a
//! nonzero `Q~_ij`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::network::{BayesNet, NetworkError};
use crate::oracle::Dataset;
use crate::recovery::ThresholdMode;
use crate::subset::SubsetMask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MbError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("node {0} is out of range")]
    NodeOutOfRange(usize),
    #[error("system for node {node} is singular even with ridge {ridge:e}")]
    Unsolvable { node: usize, ridge: f64 },
    #[error("exact moments need the joint table: {0}")]
    Capacity(String),
}

/// Zero-frequencies: `p0[j] = P(X_j = 0)`, `p00[(j, l)] = P(X_j = 0, X_l = 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentEstimates {
    pub p0: DVector<f64>,
    pub p00: DMatrix<f64>,
    pub sample_count: usize,
}

impl MomentEstimates {
    pub fn n(&self) -> usize {
        self.p0.len()
    }

    /// Largest entrywise deviation from another set of moments.
    pub fn max_abs_diff(&self, other: &MomentEstimates) -> f64 {
        (&self.p0 - &other.p0).amax().max((&self.p00 - &other.p00).amax())
    }
}

/// Empirical moments with no smoothing. Columns are packed into bitsets so
/// each pairwise count is a run of popcounts.
pub fn estimate_moments(data: &Dataset) -> Result<MomentEstimates, MbError> {
    if data.is_empty() {
        return Err(MbError::EmptyDataset);
    }
    let n = data.n;
    let words = data.len().div_ceil(64);
    let mut cols = vec![vec![0u64; words]; n];
    for (r, row) in data.rows.iter().enumerate() {
        for (j, col) in cols.iter_mut().enumerate() {
            if !row.contains(j) {
                col[r / 64] |= 1 << (r % 64);
            }
        }
    }
    let total = data.len() as f64;
    let mut p00 = DMatrix::zeros(n, n);
    for j in 0..n {
        for l in j..n {
            let c: u32 = cols[j].iter().zip(&cols[l]).map(|(a, b)| (a & b).count_ones()).sum();
            let v = c as f64 / total;
            p00[(j, l)] = v;
            p00[(l, j)] = v;
        }
    }
    Ok(MomentEstimates {
        p0: p00.diagonal(),
        p00,
        sample_count: data.len(),
    })
}

/// Population moments from the joint table.
pub fn exact_moments(bn: &BayesNet) -> Result<MomentEstimates, MbError> {
    let joint = bn
        .joint_table()
        .map_err(|e: NetworkError| MbError::Capacity(e.to_string()))?;
    let n = bn.n();
    let full = SubsetMask::full(n);
    let mut p00 = DMatrix::zeros(n, n);
    for (s, &pr) in joint.iter().enumerate() {
        let zeros = full.difference(SubsetMask::from_bits(s as u64)).to_vec();
        for (a, &j) in zeros.iter().enumerate() {
            for &l in &zeros[a..] {
                p00[(j, l)] += pr;
            }
        }
    }
    for j in 0..n {
        for l in 0..j {
            p00[(j, l)] = p00[(l, j)];
        }
    }
    Ok(MomentEstimates {
        p0: p00.diagonal(),
        p00,
        sample_count: 0,
    })
}

/// The moment system for one target node.
#[derive(Clone, Debug, PartialEq)]
pub struct MbSystem {
    pub node: usize,
    /// Node id of each coefficient column except the last (the constant).
    pub columns: Vec<usize>,
    pub a: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl MbSystem {
    fn p0_others(&self) -> f64 {
        let last = self.a.nrows() - 1;
        (0..last).map(|c| self.a[(last, c)]).sum()
    }

    fn p0_target(&self) -> f64 {
        self.y[self.y.len() - 1]
    }
}

/// Assembles `A = E[z z^T]`, `y = E[z 1[X_i = 0]]`. Row and column `r < n-1`
/// belong to the `r`-th node other than `i`; the last ones belong to the
/// constant.
pub fn assemble_system(m: &MomentEstimates, i: usize) -> Result<MbSystem, MbError> {
    let n = m.n();
    if i >= n {
        return Err(MbError::NodeOutOfRange(i));
    }
    let columns: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    let last = n - 1;
    let mut a = DMatrix::zeros(n, n);
    let mut y = DVector::zeros(n);
    for (r, &l) in columns.iter().enumerate() {
        for (c, &j) in columns.iter().enumerate() {
            a[(r, c)] = m.p00[(j, l)];
        }
        a[(r, last)] = m.p0[l];
        a[(last, r)] = m.p0[l];
        y[r] = m.p00[(i, l)];
    }
    a[(last, last)] = 1.0;
    y[last] = m.p0[i];
    Ok(MbSystem { node: i, columns, a, y })
}

/// The `(2n-2) x n` system before eliminating the rows that are linear
/// combinations of the others: for every `l != i` one row for `X_l = 0`
/// and one for `X_l = 1`.
pub fn unreduced_system(m: &MomentEstimates, i: usize) -> Result<(DMatrix<f64>, DVector<f64>), MbError> {
    let sys = assemble_system(m, i)?;
    let n = m.n();
    let last = n - 1;
    let mut a = DMatrix::zeros(2 * n - 2, n);
    let mut y = DVector::zeros(2 * n - 2);
    for (r, &l) in sys.columns.iter().enumerate() {
        for (c, &j) in sys.columns.iter().enumerate() {
            a[(2 * r, c)] = m.p00[(j, l)];
            a[(2 * r + 1, c)] = m.p0[j] - m.p00[(j, l)];
        }
        a[(2 * r, last)] = m.p0[l];
        a[(2 * r + 1, last)] = 1.0 - m.p0[l];
        y[2 * r] = m.p00[(i, l)];
        y[2 * r + 1] = m.p0[i] - m.p00[(i, l)];
    }
    Ok((a, y))
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn psd_check(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MbDiagnostics {
    pub min_eigenvalue: f64,
    /// `||A||_inf ||A^-1||_inf` of the matrix actually solved.
    pub kappa_inf: f64,
    /// Relative perturbation bound for moment accuracy `eps`; present when
    /// an accuracy was supplied.
    pub eta: Option<f64>,
    pub ridge: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MbResult {
    pub node: usize,
    /// `Q~_ij` by node id (zero at `i`), then `Q~_i`.
    pub q_hat: Vec<f64>,
    pub threshold: f64,
    pub mb: SubsetMask,
    pub diagnostics: MbDiagnostics,
}

impl MbResult {
    pub fn to_text(&self) -> String {
        let d = &self.diagnostics;
        format!(
            "{} {} min_eig={:e} kappa_inf={:e} eta={} ridge={}\n",
            self.node,
            self.mb,
            d.min_eigenvalue,
            d.kappa_inf,
            d.eta.map_or("na".to_string(), |e| format!("{e:e}")),
            d.ridge.map_or("none".to_string(), |r| format!("{r:e}")),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MbOptions {
    pub threshold: ThresholdMode,
    /// Ridge used when the plain solve fails; `None` picks
    /// `1e-9 * trace(A) / n`.
    pub ridge: Option<f64>,
    /// Accuracy of the moment estimates, for the `eta` diagnostic.
    pub eps: Option<f64>,
}

impl Default for MbOptions {
    fn default() -> Self {
        Self {
            threshold: ThresholdMode::Absolute { tau: 0.01 },
            ridge: None,
            eps: None,
        }
    }
}

fn inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = a.clone().lu().try_inverse()?;
    let ok = inv.iter().all(|v| v.is_finite()) && inf_norm(&inv) * inf_norm(a) < 1e14;
    ok.then_some(inv)
}

fn inf_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn solve_mb(sys: &MbSystem, opts: &MbOptions) -> Result<MbResult, MbError> {
    let n = sys.a.nrows();
    let (inv, ridge) = match inverse(&sys.a) {
        Some(inv) => (inv, None),
        None => {
            let lambda = opts.ridge.unwrap_or(1e-9 * sys.a.trace() / n as f64);
            let mut a = sys.a.clone();
            for k in 0..n {
                a[(k, k)] += lambda;
            }
            let inv = inverse(&a).ok_or(MbError::Unsolvable {
                node: sys.node,
                ridge: lambda,
            })?;
            (inv, Some(lambda))
        }
    };
    let q = &inv * &sys.y;
    let mut solved = sys.a.clone();
    if let Some(l) = ridge {
        for k in 0..n {
            solved[(k, k)] += l;
        }
    }
    let kappa_inf = inf_norm(&solved) * inf_norm(&inv);
    let eta = opts.eps.map(|e| {
        let nn = (n) as f64;
        (nn * e / (sys.p0_others() + 1.0)).max(e / sys.p0_target())
    });

    let mut q_hat = vec![0.0; n + 1];
    for (c, &j) in sys.columns.iter().enumerate() {
        q_hat[j] = q[c];
    }
    q_hat[n] = q[n - 1];
    let coeffs = sys.columns.iter().map(|&j| q_hat[j]);
    let threshold = opts.threshold.resolve(coeffs);
    let mb = sys.columns.iter().copied().filter(|&j| q_hat[j].abs() > threshold).collect();
    Ok(MbResult {
        node: sys.node,
        q_hat,
        threshold,
        mb,
        diagnostics: MbDiagnostics {
            min_eigenvalue: psd_check(&sys.a),
            kappa_inf,
            eta,
            ridge,
        },
    })
}

/// Blankets for every node.
pub fn recover_blankets(m: &MomentEstimates, opts: &MbOptions, execution: Execution) -> Result<Vec<MbResult>, MbError> {
    execution
        .map_range(m.n(), |i| assemble_system(m, i).and_then(|s| solve_mb(&s, opts)))
        .into_iter()
        .collect()
}

/// Smallest `N >= n` with `4 exp(ln(C(n,2) + 3n) - N eps^2 / 2) <= delta`.
pub fn mb_sample_bound(n: usize, eps: f64, delta: f64) -> u64 {
    assert!(eps > 0.0 && eps < 1.0, "eps must lie in (0, 1)");
    assert!(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1)");
    let terms = (n * n.saturating_sub(1) / 2 + 3 * n) as f64;
    let bound = (2.0 * (terms.ln() + (4.0 / delta).ln()) / (eps * eps)).ceil() as u64;
    bound.max(n as u64)
}

/// Observational sample size for control parameter `c`:
/// `max(ceil(10^c ln n / eps^2), n)`.
pub fn observational_samples(n: usize, c: f64, eps: f64) -> usize {
    let raw = (10f64.powf(c) * (n as f64).ln() / (eps * eps)).ceil();
    (raw as usize).max(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::sample_observational;

    fn bn(seed: u64) -> BayesNet {
        BayesNet::random(8, 4, 0.02, seed).unwrap()
    }

    #[test]
    fn all_zero_rows() {
        let d = Dataset {
            n: 4,
            seed: 0,
            rows: vec![SubsetMask::EMPTY; 10],
        };
        let m = estimate_moments(&d).unwrap();
        assert!(m.p0.iter().all(|&v| v == 1.0));
        assert!(m.p00.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let d = Dataset { n: 3, seed: 0, rows: vec![] };
        assert_eq!(estimate_moments(&d), Err(MbError::EmptyDataset));
    }

    #[test]
    fn estimates_match_direct_counts() {
        let net = bn(1);
        let d = sample_observational(&net, 777, 2);
        let m = estimate_moments(&d).unwrap();
        for j in 0..8 {
            assert_eq!(m.p00[(j, j)], m.p0[j]);
            for l in 0..8 {
                let c = d.rows.iter().filter(|r| !r.contains(j) && !r.contains(l)).count();
                assert_eq!(m.p00[(j, l)], c as f64 / 777.0);
            }
        }
    }

    #[test]
    fn system_is_the_indicator_second_moment() {
        let net = bn(3);
        let m = exact_moments(&net).unwrap();
        let joint = net.joint_table().unwrap();
        let i = 2;
        let sys = assemble_system(&m, i).unwrap();
        // E[z z^T] and E[z 1[X_i = 0]] by direct expectation
        let mut a = DMatrix::zeros(8, 8);
        let mut y = DVector::zeros(8);
        for (s, &p) in joint.iter().enumerate() {
            let st = SubsetMask::from_bits(s as u64);
            let mut z: Vec<f64> = sys.columns.iter().map(|&j| (!st.contains(j)) as u8 as f64).collect();
            z.push(1.0);
            let zv = DVector::from_vec(z);
            a += &zv * zv.transpose() * p;
            if !st.contains(i) {
                y += zv * p;
            }
        }
        assert!((a - &sys.a).amax() < 1e-12);
        assert!((y - &sys.y).amax() < 1e-12);
        assert_eq!(sys.a[(7, 7)], 1.0);
    }

    #[test]
    fn psd_examples() {
        assert!((psd_check(&DMatrix::identity(4, 4)) - 1.0).abs() < 1e-15);
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        assert!(psd_check(&(&v * v.transpose())).abs() < 1e-12);
    }

    #[test]
    fn zero_coefficients_give_empty_blanket() {
        let mut a = DMatrix::identity(3, 3);
        a[(2, 2)] = 1.0;
        let sys = MbSystem {
            node: 0,
            columns: vec![1, 2],
            a,
            y: DVector::from_vec(vec![0.0, 0.0, 0.4]),
        };
        let r = solve_mb(&sys, &MbOptions::default()).unwrap();
        assert_eq!(r.mb, SubsetMask::EMPTY);
        assert!(r.diagnostics.ridge.is_none());
    }

    #[test]
    fn singular_system_falls_back_to_ridge() {
        let sys = MbSystem {
            node: 0,
            columns: vec![1, 2],
            a: DMatrix::from_element(3, 3, 0.5),
            y: DVector::from_vec(vec![0.25, 0.25, 0.5]),
        };
        let r = solve_mb(&sys, &MbOptions::default()).unwrap();
        assert!(r.diagnostics.ridge.is_some());
    }

    #[test]
    fn sample_bound_formula() {
        let want = |n: usize, e: f64, d: f64| {
            let t = (n * (n - 1) / 2 + 3 * n) as f64;
            ((2.0 * (t.ln() + (4.0 / d).ln()) / (e * e)).ceil() as u64).max(n as u64)
        };
        assert_eq!(mb_sample_bound(20, 0.05, 0.01), want(20, 0.05, 0.01));
        assert!(mb_sample_bound(20, 0.05, 0.01) >= 20);
        assert!(mb_sample_bound(20, 0.1, 0.01) < mb_sample_bound(20, 0.05, 0.01));
        assert_eq!(mb_sample_bound(50, 0.99, 0.99), 50);
    }

    #[test]
    fn observational_sample_sizes() {
        let got: Vec<usize> = [-3.0, -2.0, -1.0, 0.0, 1.0]
            .iter()
            .map(|&c| observational_samples(20, c, 0.05))
            .collect();
        assert_eq!(got, vec![20, 20, 120, 1199, 11983]);
    }
}
