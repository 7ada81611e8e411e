//! Basis pursuit denoising: `min ||beta||_1  s.t.  ||M beta - y||_2 <= eps`.
//!
//! The default solver is a primal log-barrier method. With `eps > 0` it works
//! on the second-order-cone form (variables `beta`, `u` with `|beta| <= u`);
//! with `eps = 0` it parametrizes the affine solution set through a null-space
//! basis and runs the same barrier on the box constraints only. A slower ADMM
//! solver with support polishing serves as an independent reference.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("no point within eps = {eps:.3e} of the measurements (best residual {residual:.3e})")]
    Infeasible { residual: f64, eps: f64 },
    #[error("no convergence after {iterations} iterations (gap {gap:.3e}, residual {residual:.3e})")]
    NotConverged { iterations: usize, gap: f64, residual: f64 },
    #[error("dimension mismatch: matrix is {rows}x{cols}, rhs has {rhs} entries")]
    Dimension { rows: usize, cols: usize, rhs: usize },
    #[error("eps must be finite and non-negative, got {0}")]
    BadRadius(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    InteriorPoint,
    Admm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub kind: SolverKind,
    /// Target relative suboptimality of `||beta||_1`.
    pub rel_gap: f64,
    /// Barrier parameter growth per outer iteration.
    pub mu: f64,
    pub max_outer: usize,
    pub max_newton: usize,
    pub admm_iterations: usize,
    pub admm_rho: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            kind: SolverKind::InteriorPoint,
            rel_gap: 1e-6,
            mu: 10.0,
            max_outer: 60,
            max_newton: 80,
            admm_iterations: 20_000,
            admm_rho: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BpdnSolution {
    pub beta: DVector<f64>,
    /// `||M beta - y||_2` in the caller's units.
    pub residual: f64,
    pub l1: f64,
    pub iterations: usize,
}

/// Solves the problem with the configured solver.
pub fn bpdn(m: &DMatrix<f64>, y: &DVector<f64>, eps: f64, opts: &SolverOptions) -> Result<BpdnSolution, SolverError> {
    bpdn_inner(m, y, eps, None, opts)
}

/// Like [`bpdn`], but widens the radius to `slack` times the least-squares
/// residual when the measurements are inconsistent at radius `eps`. Returns
/// the solution and the radius actually used.
pub fn bpdn_widened(
    m: &DMatrix<f64>,
    y: &DVector<f64>,
    eps: f64,
    slack: f64,
    opts: &SolverOptions,
) -> Result<(BpdnSolution, f64), SolverError> {
    let mut used = eps;
    let sol = bpdn_inner(m, y, eps, Some((slack, &mut used)), opts)?;
    Ok((sol, used))
}

fn bpdn_inner(
    m: &DMatrix<f64>,
    y: &DVector<f64>,
    eps: f64,
    widen: Option<(f64, &mut f64)>,
    opts: &SolverOptions,
) -> Result<BpdnSolution, SolverError> {
    if m.nrows() != y.len() {
        return Err(SolverError::Dimension {
            rows: m.nrows(),
            cols: m.ncols(),
            rhs: y.len(),
        });
    }
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(SolverError::BadRadius(eps));
    }
    let p = m.ncols();
    if y.norm() <= eps || p == 0 {
        return Ok(finish(m, y, DVector::zeros(p), 0));
    }
    // unit-norm columns for +-1 matrices; the minimizer is unchanged
    let scale = 1.0 / (m.nrows().max(1) as f64).sqrt();
    let ms = m * scale;
    let ys = y * scale;
    let mut es = eps * scale;
    let ls = least_squares(&ms, &ys);
    if let Some((slack, used)) = widen {
        // consistent systems keep their radius (and the exact path at eps = 0)
        if ls.1 > es && ls.1 > 1e-10 * ys.norm().max(1.0) {
            es = slack * ls.1;
        }
        *used = es / scale;
        if ys.norm() <= es {
            return Ok(finish(m, y, DVector::zeros(p), 0));
        }
    }
    let (beta, iterations) = match opts.kind {
        SolverKind::InteriorPoint => interior_point(&ms, &ys, es, ls, opts)?,
        SolverKind::Admm => admm(&ms, &ys, es, opts)?,
    };
    Ok(finish(m, y, beta, iterations))
}

fn finish(m: &DMatrix<f64>, y: &DVector<f64>, beta: DVector<f64>, iterations: usize) -> BpdnSolution {
    let residual = (m * &beta - y).norm();
    let l1 = beta.iter().map(|b| b.abs()).sum();
    BpdnSolution {
        beta,
        residual,
        l1,
        iterations,
    }
}

/// Minimum-norm least-squares solution and its residual norm.
pub fn least_squares(m: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, f64) {
    let svd = m.clone().svd(true, true);
    let tol = svd.singular_values.max() * 1e-12 * (m.nrows().max(m.ncols()) as f64);
    let x = svd.solve(y, tol).expect("svd computed with both factors");
    let r = (m * &x - y).norm();
    (x, r)
}

fn l1(v: &DVector<f64>) -> f64 {
    v.iter().map(|b| b.abs()).sum()
}

fn interior_point(
    m: &DMatrix<f64>,
    y: &DVector<f64>,
    eps: f64,
    (x0, r0): (DVector<f64>, f64),
    opts: &SolverOptions,
) -> Result<(DVector<f64>, usize), SolverError> {
    let consistency_tol = 1e-10 * y.norm().max(1.0);
    if eps == 0.0 {
        if r0 > consistency_tol {
            return Err(SolverError::Infeasible { residual: r0, eps });
        }
        return equality_barrier(m, x0, opts);
    }
    if r0 >= eps {
        // the feasible set is (numerically) the least-squares point itself
        if r0 <= eps + consistency_tol {
            return Ok((x0, 0));
        }
        return Err(SolverError::Infeasible { residual: r0, eps });
    }
    cone_barrier(m, y, eps, x0, opts)
}

/// Box-barrier state `fu1 = x - u < 0`, `fu2 = -x - u < 0`.
fn box_terms(x: &DVector<f64>, u: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let fu1 = x - u;
    let fu2 = -x - u;
    (fu1.iter().all(|&v| v < 0.0) && fu2.iter().all(|&v| v < 0.0)).then_some((fu1, fu2))
}

fn initial_u(x: &DVector<f64>) -> DVector<f64> {
    let big = x.amax().max(1e-3);
    x.map(|v| 0.95 * v.abs() + 0.1 * big)
}

fn gap_target(x: &DVector<f64>, rel_gap: f64) -> f64 {
    // the barrier gap bounds ||x||_1 - opt from above; ask for well below
    // the requested relative tolerance
    (0.01 * rel_gap * l1(x)).max(1e-14)
}

/// Solves `H d = rhs` for a symmetric positive definite `H`, with diagonal
/// (Jacobi) scaling to tame the wide dynamic range near the boundary.
fn spd_solve(h: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let d = h.diagonal().map(|v| 1.0 / v.max(f64::MIN_POSITIVE).sqrt());
    let mut hs = h;
    let n = hs.nrows();
    for j in 0..n {
        for i in 0..n {
            hs[(i, j)] *= d[i] * d[j];
        }
    }
    let bs = rhs.component_mul(&d);
    let sol = match Cholesky::new(hs.clone()) {
        Some(c) => c.solve(&bs),
        None => {
            for k in 0..n {
                hs[(k, k)] += 1e-12;
            }
            hs.lu().solve(&bs)?
        }
    };
    Some(sol.component_mul(&d))
}

fn cone_barrier(
    m: &DMatrix<f64>,
    y: &DVector<f64>,
    eps: f64,
    x0: DVector<f64>,
    opts: &SolverOptions,
) -> Result<(DVector<f64>, usize), SolverError> {
    let p = m.ncols();
    let mtm = m.transpose() * m;
    let mut x = x0;
    let mut u = initial_u(&x);
    let mut r = m * &x - y;
    let ncons = (2 * p + 1) as f64;
    let mut tau = (ncons / l1(&x).max(1e-12)).max(1.0);
    let mut total = 0;

    let objective = |x: &DVector<f64>, u: &DVector<f64>, r: &DVector<f64>, tau: f64| -> f64 {
        let fe = 0.5 * (r.norm_squared() - eps * eps);
        match box_terms(x, u) {
            Some((fu1, fu2)) if fe < 0.0 => {
                tau * u.sum()
                    - fu1.iter().map(|v| (-v).ln()).sum::<f64>()
                    - fu2.iter().map(|v| (-v).ln()).sum::<f64>()
                    - (-fe).ln()
            }
            _ => f64::INFINITY,
        }
    };

    for _ in 0..opts.max_outer {
        let mut f = objective(&x, &u, &r, tau);
        for _ in 0..opts.max_newton {
            total += 1;
            let (fu1, fu2) = box_terms(&x, &u).expect("iterate stays interior");
            let fe = 0.5 * (r.norm_squared() - eps * eps);
            let atr = m.transpose() * &r;
            let inv1 = fu1.map(|v| 1.0 / v);
            let inv2 = fu2.map(|v| 1.0 / v);
            let ntgz = &inv1 - &inv2 + &atr / fe;
            let ntgu = (&inv1 + &inv2).map(|v| -tau - v);
            let sig11 = inv1.component_mul(&inv1) + inv2.component_mul(&inv2);
            let sig12 = inv2.component_mul(&inv2) - inv1.component_mul(&inv1);
            let ratio = sig12.component_div(&sig11);
            let sigx = &sig11 - sig12.component_mul(&ratio);
            let w1 = &ntgz - ratio.component_mul(&ntgu);

            let mut h = &mtm * (-1.0 / fe) + (&atr * atr.transpose()) / (fe * fe);
            for k in 0..p {
                h[(k, k)] += sigx[k];
            }
            let Some(dx) = spd_solve(h, &w1) else { break };
            let adx = m * &dx;
            let du = (&ntgu - sig12.component_mul(&dx)).component_div(&sig11);

            // largest step keeping every constraint strictly satisfied
            let mut smax: f64 = 1.0;
            for k in 0..p {
                let a = dx[k] - du[k];
                if a > 0.0 {
                    smax = smax.min(-fu1[k] / a);
                }
                let b = -dx[k] - du[k];
                if b > 0.0 {
                    smax = smax.min(-fu2[k] / b);
                }
            }
            let aq = adx.norm_squared();
            if aq > 0.0 {
                let bq = 2.0 * r.dot(&adx);
                let cq = r.norm_squared() - eps * eps;
                let disc = (bq * bq - 4.0 * aq * cq).max(0.0);
                smax = smax.min((-bq + disc.sqrt()) / (2.0 * aq));
            }
            let mut s = 0.99 * smax;

            let decrement = ntgz.dot(&dx) + ntgu.dot(&du);
            let mut accepted = false;
            for _ in 0..60 {
                let xp = &x + &dx * s;
                let up = &u + &du * s;
                let rp = &r + &adx * s;
                let fp = objective(&xp, &up, &rp, tau);
                if fp <= f - 0.01 * s * decrement {
                    x = xp;
                    u = up;
                    r = rp;
                    f = fp;
                    accepted = true;
                    break;
                }
                s *= 0.5;
            }
            if !accepted || decrement / 2.0 < 1e-12 {
                break;
            }
        }
        let gap = ncons / tau;
        if gap <= gap_target(&x, opts.rel_gap) {
            return Ok((x, total));
        }
        tau *= opts.mu;
    }
    let gap = ncons / tau;
    if gap <= 10.0 * gap_target(&x, opts.rel_gap) {
        return Ok((x, total));
    }
    Err(SolverError::NotConverged {
        iterations: total,
        gap,
        residual: (m * &x - y).norm(),
    })
}

/// Orthonormal basis of the null space of `m`.
fn null_space(m: &DMatrix<f64>) -> DMatrix<f64> {
    let p = m.ncols();
    let eig = SymmetricEigen::new(m.transpose() * m);
    let top = eig.eigenvalues.amax();
    let tol = top * 1e-10 * p as f64;
    let cols: Vec<usize> = (0..p).filter(|&k| eig.eigenvalues[k] <= tol).collect();
    DMatrix::from_fn(p, cols.len(), |i, j| eig.eigenvectors[(i, cols[j])])
}

fn equality_barrier(m: &DMatrix<f64>, xp: DVector<f64>, opts: &SolverOptions) -> Result<(DVector<f64>, usize), SolverError> {
    let z = null_space(m);
    let d = z.ncols();
    if d == 0 {
        return Ok((xp, 0));
    }
    let p = m.ncols();
    let mut w = DVector::<f64>::zeros(d);
    let mut x = xp.clone();
    let mut u = initial_u(&x);
    let ncons = (2 * p) as f64;
    let mut tau = (ncons / l1(&x).max(1e-12)).max(1.0);
    let mut total = 0;

    let objective = |x: &DVector<f64>, u: &DVector<f64>, tau: f64| -> f64 {
        match box_terms(x, u) {
            Some((fu1, fu2)) => {
                tau * u.sum()
                    - fu1.iter().map(|v| (-v).ln()).sum::<f64>()
                    - fu2.iter().map(|v| (-v).ln()).sum::<f64>()
            }
            None => f64::INFINITY,
        }
    };

    for _ in 0..opts.max_outer {
        let mut f = objective(&x, &u, tau);
        for _ in 0..opts.max_newton {
            total += 1;
            let (fu1, fu2) = box_terms(&x, &u).expect("iterate stays interior");
            let inv1 = fu1.map(|v| 1.0 / v);
            let inv2 = fu2.map(|v| 1.0 / v);
            let ntgx = &inv1 - &inv2;
            let ntgu = (&inv1 + &inv2).map(|v| -tau - v);
            let sig11 = inv1.component_mul(&inv1) + inv2.component_mul(&inv2);
            let sig12 = inv2.component_mul(&inv2) - inv1.component_mul(&inv1);
            let ratio = sig12.component_div(&sig11);
            let sigx = &sig11 - sig12.component_mul(&ratio);
            let w1 = z.transpose() * (&ntgx - ratio.component_mul(&ntgu));

            let mut zs = z.clone();
            for (k, mut row) in zs.row_iter_mut().enumerate() {
                row *= sigx[k];
            }
            let h = z.transpose() * zs;
            let Some(dw) = spd_solve(h, &w1) else { break };
            let dx = &z * &dw;
            let du = (&ntgu - sig12.component_mul(&dx)).component_div(&sig11);

            let mut smax: f64 = 1.0;
            for k in 0..p {
                let a = dx[k] - du[k];
                if a > 0.0 {
                    smax = smax.min(-fu1[k] / a);
                }
                let b = -dx[k] - du[k];
                if b > 0.0 {
                    smax = smax.min(-fu2[k] / b);
                }
            }
            let mut s = 0.99 * smax;
            let decrement = ntgx.dot(&dx) + ntgu.dot(&du);
            let mut accepted = false;
            for _ in 0..60 {
                let wp = &w + &dw * s;
                let xq = &xp + &z * &wp;
                let uq = &u + &du * s;
                let fp = objective(&xq, &uq, tau);
                if fp <= f - 0.01 * s * decrement {
                    w = wp;
                    x = xq;
                    u = uq;
                    f = fp;
                    accepted = true;
                    break;
                }
                s *= 0.5;
            }
            if !accepted || decrement / 2.0 < 1e-12 {
                break;
            }
        }
        if ncons / tau <= gap_target(&x, opts.rel_gap) {
            return Ok((x, total));
        }
        tau *= opts.mu;
    }
    let gap = ncons / tau;
    if gap <= 10.0 * gap_target(&x, opts.rel_gap) {
        return Ok((x, total));
    }
    Err(SolverError::NotConverged {
        iterations: total,
        gap,
        residual: (m * &x - m * &xp).norm(),
    })
}

fn soft(v: f64, k: f64) -> f64 {
    v.signum() * (v.abs() - k).max(0.0)
}

/// ADMM on `beta = z`, `M beta - y = w`, `||w|| <= eps`, followed by an exact
/// solve of the optimality conditions on the detected support.
fn admm(m: &DMatrix<f64>, y: &DVector<f64>, eps: f64, opts: &SolverOptions) -> Result<(DVector<f64>, usize), SolverError> {
    let (rows, p) = m.shape();
    let rho = opts.admm_rho;
    let mt = m.transpose();
    let mut k = &mt * m;
    for d in 0..p {
        k[(d, d)] += 1.0;
    }
    let chol = Cholesky::new(k).expect("I + M^T M is positive definite");
    let mut z = DVector::<f64>::zeros(p);
    let mut w = DVector::<f64>::zeros(rows);
    let mut u1 = DVector::<f64>::zeros(p);
    let mut u2 = DVector::<f64>::zeros(rows);
    let mut iters = 0;
    for it in 0..opts.admm_iterations {
        iters = it + 1;
        let rhs = (&z - &u1) + &mt * (y + &w - &u2);
        let beta = chol.solve(&rhs);
        let z_old = z.clone();
        z = (&beta + &u1).map(|v| soft(v, 1.0 / rho));
        let mb = m * &beta;
        let v = &mb - y + &u2;
        let nv = v.norm();
        let w_old = w.clone();
        w = if nv > eps { v * (eps / nv) } else { v };
        let r1 = &beta - &z;
        let r2 = &mb - y - &w;
        u1 += &r1;
        u2 += &r2;
        let primal = (r1.norm_squared() + r2.norm_squared()).sqrt();
        let dual = rho * ((&z - z_old).norm_squared() + (&w - w_old).norm_squared()).sqrt();
        if primal < 1e-12 && dual < 1e-12 {
            break;
        }
    }
    let polished = polish(m, y, eps, &z);
    Ok((polished.unwrap_or(z), iters))
}

/// Exact minimizer restricted to the support and sign pattern of `approx`,
/// when that pattern is self-consistent.
fn polish(m: &DMatrix<f64>, y: &DVector<f64>, eps: f64, approx: &DVector<f64>) -> Option<DVector<f64>> {
    let p = m.ncols();
    let big = approx.amax();
    if big == 0.0 {
        return None;
    }
    let support: Vec<usize> = (0..p).filter(|&k| approx[k].abs() > 1e-7 * big).collect();
    if support.len() > m.nrows() {
        return None;
    }
    let ms = DMatrix::from_fn(m.nrows(), support.len(), |i, j| m[(i, support[j])]);
    let signs = DVector::from_iterator(support.len(), support.iter().map(|&k| approx[k].signum()));
    let g = ms.transpose() * &ms;
    let g_chol = Cholesky::new(g)?;
    let x_ls = g_chol.solve(&(ms.transpose() * y));
    let r_ls = (&ms * &x_ls - y).norm();
    let xs = if eps == 0.0 {
        if r_ls > 1e-10 * y.norm().max(1.0) {
            return None;
        }
        x_ls
    } else {
        let gs = g_chol.solve(&signs);
        let q = signs.dot(&gs);
        if r_ls > eps || q <= 0.0 {
            return None;
        }
        let c = ((eps * eps - r_ls * r_ls) / q).sqrt();
        x_ls - gs * c
    };
    if xs.iter().zip(signs.iter()).any(|(v, s)| v * s <= 0.0) {
        return None;
    }
    let mut out = DVector::zeros(p);
    for (j, &k) in support.iter().enumerate() {
        out[k] = xs[j];
    }
    let candidate_l1 = l1(&out);
    (candidate_l1 <= l1(approx) + 1e-6 * candidate_l1.max(1.0)).then_some(out)
}
