//! Convex quadratic programs over the probability simplex.
//!
//! [`solve_qp`] starts with a primal active-set pass from the best vertex and
//! falls back to accelerated projected gradient with monotone restarts,
//! periodically handing the current iterate back to the active-set pass.
//! [`brute_force_grid`] is an exhaustive lattice search used as an
//! independent oracle for small `M`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::criteria::{QpProblem, SimplexPoint};
use crate::error::{Error, Result};
use crate::linalg;

/// Coordinates above this value count as part of the support.
pub const SUPPORT_TOL: f64 = 1e-10;
/// Largest dimension accepted by [`brute_force_grid`].
pub const BRUTE_FORCE_MAX_DIM: usize = 5;
const POLISH_EVERY: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub theta: SimplexPoint,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Stopping rule for [`solve_qp`]. `None` fields take the problem-dependent
/// defaults `tol = 1e-9 (1 + scale)` and `max_iter = 50 M + 10000`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
}

impl SolveOptions {
    pub fn resolve(&self, problem: &QpProblem) -> (f64, usize) {
        (
            self.tol.unwrap_or_else(|| default_tol(problem)),
            self.max_iter.unwrap_or(50 * problem.dim() + 10_000),
        )
    }
}

pub fn default_tol(problem: &QpProblem) -> f64 {
    1e-9 * (1.0 + problem.scale())
}

/// Euclidean projection onto the simplex by the sort-and-threshold rule.
pub fn project_simplex(v: &[f64]) -> SimplexPoint {
    SimplexPoint::renormalized(project_raw(v))
}

fn project_raw(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if s - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

/// KKT certificate for `min_{theta in simplex} q(theta)`: with `g` the
/// gradient and `lambda` its minimum over the support, the largest of
/// `|g_j - lambda|` on the support and `max(0, lambda - g_j)` off it.
pub fn kkt_residual(problem: &QpProblem, theta: &[f64]) -> f64 {
    let g = problem.gradient(theta);
    kkt_from_gradient(&g, theta)
}

fn kkt_from_gradient(g: &DVector<f64>, theta: &[f64]) -> f64 {
    let lambda = theta
        .iter()
        .zip(g.iter())
        .filter(|(t, _)| **t > SUPPORT_TOL)
        .map(|(_, g)| *g)
        .fold(f64::INFINITY, f64::min);
    if !lambda.is_finite() {
        return f64::INFINITY;
    }
    theta
        .iter()
        .zip(g.iter())
        .map(|(&t, &gj)| if t > SUPPORT_TOL { (gj - lambda).abs() } else { (lambda - gj).max(0.0) })
        .fold(0.0, f64::max)
}

/// Minimizes the problem over the simplex. Never fails on non-convergence:
/// the best iterate is returned with `converged = false`.
pub fn solve_qp(problem: &QpProblem, tol: f64, max_iter: usize) -> Result<SolveResult> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("solver tolerance must be > 0, got {tol}")));
    }
    let m = problem.dim();
    let (start, _) = best_vertex(problem);
    let mut best = SimplexPoint::vertex(m, start).into_inner();
    let mut best_val = problem.vertex_value(start);
    let mut best_kkt = kkt_residual(problem, &best);
    if best_kkt <= tol || m == 1 {
        return Ok(finish(problem, best, 0, best_kkt <= tol || m == 1));
    }

    if let Some((p, pval, pkkt)) = polish(problem, &best) {
        if pkkt <= tol && pval <= best_val + 1e-12 * (1.0 + best_val.abs()) {
            return Ok(finish(problem, p, 0, true));
        }
    }

    let top = linalg::psd_top_eigenvalue(&problem.hessian, 1e-10, 10_000);
    let mut lip = top * (1.0 + 1e-6);
    if !(lip > 0.0) {
        // Linear objective: the best vertex is optimal.
        return Ok(finish(problem, best, 0, true));
    }

    let mut x = best.clone();
    let mut x_val = best_val;
    let mut z = DVector::from_column_slice(&x);
    let mut t = 1.0_f64;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let gz = &problem.hessian * &z + &problem.lin;
        let z_val = 0.5 * z.dot(&(&problem.hessian * &z)) + problem.lin.dot(&z) + problem.constant;
        let (next, next_val) = loop {
            let step: Vec<f64> = z.iter().zip(gz.iter()).map(|(zi, gi)| zi - gi / lip).collect();
            let cand = project_raw(&step);
            let val = problem.value(&cand);
            let diff = DVector::from_column_slice(&cand) - &z;
            let model = z_val + gz.dot(&diff) + 0.5 * lip * diff.norm_squared();
            if val <= model + 1e-12 * (1.0 + model.abs()) {
                break (cand, val);
            }
            lip *= 2.0;
        };
        let stalled = if next_val > x_val {
            // Momentum overshot: restart from the last accepted point. A
            // second overshoot in a row means plain gradient steps no longer
            // make progress in floating point.
            let stalled = t == 1.0;
            t = 1.0;
            z = DVector::from_column_slice(&x);
            stalled
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            let xv = DVector::from_column_slice(&x);
            let nv = DVector::from_column_slice(&next);
            z = &nv + (&nv - &xv) * beta;
            t = t_next;
            x = next;
            x_val = next_val;
            false
        };

        let kkt = kkt_residual(problem, &x);
        if x_val < best_val || (x_val == best_val && kkt < best_kkt) {
            best = x.clone();
            best_val = x_val;
            best_kkt = kkt;
        }
        let mut polished = false;
        if stalled || iterations % POLISH_EVERY == 0 || kkt <= tol {
            if let Some((p, pval, pkkt)) = polish(problem, &x) {
                if pkkt < best_kkt && pval <= best_val + 1e-12 * (1.0 + best_val.abs()) {
                    polished = true;
                    best = p.clone();
                    best_val = pval.min(best_val);
                    best_kkt = pkkt;
                    x = p;
                    x_val = pval;
                    z = DVector::from_column_slice(&x);
                    t = 1.0;
                }
            }
        }
        if best_kkt <= tol {
            return Ok(finish(problem, best, iterations, true));
        }
        if stalled && !polished {
            break;
        }
    }
    let converged = best_kkt <= tol;
    Ok(finish(problem, best, iterations, converged))
}

/// [`solve_qp`] with the defaults of [`SolveOptions`].
pub fn solve_qp_with(problem: &QpProblem, options: &SolveOptions) -> Result<SolveResult> {
    let (tol, max_iter) = options.resolve(problem);
    solve_qp(problem, tol, max_iter)
}

fn finish(problem: &QpProblem, theta: Vec<f64>, iterations: usize, converged: bool) -> SolveResult {
    let theta = SimplexPoint::renormalized(theta);
    let objective = problem.value(theta.weights());
    let kkt_residual = kkt_residual(problem, theta.weights());
    SolveResult {
        theta,
        objective,
        kkt_residual,
        iterations,
        converged,
    }
}

/// Index and value of the best vertex; first index wins ties.
pub fn best_vertex(problem: &QpProblem) -> (usize, f64) {
    (0..problem.dim())
        .map(|j| (j, problem.vertex_value(j)))
        .fold((0, f64::INFINITY), |acc, (j, v)| if v < acc.1 { (j, v) } else { acc })
}

/// Primal active-set refinement from the feasible point `theta`.
///
/// On the current support the step solves the equality-constrained problem in
/// an orthonormal basis of `{p : sum p = 0}`. Directions of zero curvature
/// with a descent component are followed to the boundary, so rank-deficient
/// Hessians are handled. Blocking coordinates leave the support; when the step
/// vanishes the coordinate with the most negative reduced gradient enters.
fn polish(problem: &QpProblem, theta: &[f64]) -> Option<(Vec<f64>, f64, f64)> {
    let m = problem.dim();
    let mut x: Vec<f64> = theta.iter().map(|&t| if t > SUPPORT_TOL { t } else { 0.0 }).collect();
    let sum: f64 = x.iter().sum();
    if !(sum > 0.0) {
        return None;
    }
    x.iter_mut().for_each(|v| *v /= sum);
    let mut support: Vec<usize> = (0..m).filter(|&j| x[j] > 0.0).collect();
    let hscale = (0..m).map(|j| problem.hessian[(j, j)].abs()).fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
    let mut solved = false;
    for _ in 0..(4 * m + 50) {
        let g = problem.gradient(&x);
        let gscale = 1.0 + g.amax();
        let s = support.len();
        let step = if s > 1 && !solved {
            reduced_step(problem, &support, &g, hscale, gscale)
        } else {
            None
        };
        match step {
            Some((p, newton)) => {
                let mut alpha = if newton { 1.0 } else { f64::INFINITY };
                let mut block = None;
                for (a, &i) in support.iter().enumerate() {
                    if p[a] < 0.0 {
                        let r = -x[i] / p[a];
                        if r < alpha {
                            alpha = r;
                            block = Some(a);
                        }
                    }
                }
                if !alpha.is_finite() {
                    return None;
                }
                for (a, &i) in support.iter().enumerate() {
                    x[i] = (x[i] + alpha * p[a]).max(0.0);
                }
                if let Some(a) = block {
                    x[support[a]] = 0.0;
                    support.remove(a);
                }
                solved = newton && block.is_none();
                let sum: f64 = x.iter().sum();
                x.iter_mut().for_each(|v| *v /= sum);
            }
            None => {
                let lambda = support.iter().map(|&i| g[i]).sum::<f64>() / s as f64;
                let enter = (0..m)
                    .filter(|j| !support.contains(j))
                    .map(|j| (j, g[j] - lambda))
                    .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                        Some((_, bv)) if bv <= v => acc,
                        _ => Some((j, v)),
                    });
                match enter {
                    Some((j, v)) if v < -1e-13 * gscale => {
                        solved = false;
                        support.push(j);
                        support.sort_unstable();
                    }
                    _ => {
                        let val = problem.value(&x);
                        let kkt = kkt_from_gradient(&g, &x);
                        return Some((x, val, kkt));
                    }
                }
            }
        }
    }
    None
}

/// Step on `support` for the equality-constrained subproblem, or `None` when
/// it vanishes. The flag is `true` for a Newton step and `false` for a
/// zero-curvature descent direction.
fn reduced_step(
    problem: &QpProblem,
    support: &[usize],
    g: &DVector<f64>,
    hscale: f64,
    gscale: f64,
) -> Option<(DVector<f64>, bool)> {
    let s = support.len();
    let mut seed = DMatrix::<f64>::identity(s, s);
    seed.column_mut(0).fill(1.0);
    let q = seed.qr().q();
    let z = q.columns(1, s - 1).into_owned();
    let h = DMatrix::from_fn(s, s, |a, b| problem.hessian[(support[a], support[b])]);
    let gf = DVector::from_fn(s, |a, _| g[support[a]]);
    let r = linalg::symmetrize(&(z.transpose() * &h * &z));
    let rg = z.transpose() * &gf;
    let eig = r.symmetric_eigen();
    let coeff = eig.eigenvectors.transpose() * &rg;
    let eig_tol = 1e-11 * hscale;
    let g_tol = 1e-13 * gscale;
    let mut null = DVector::zeros(s - 1);
    let mut newton = DVector::zeros(s - 1);
    let mut has_null = false;
    for i in 0..s - 1 {
        let v = eig.eigenvectors.column(i);
        if eig.eigenvalues[i] > eig_tol {
            newton -= v * (coeff[i] / eig.eigenvalues[i]);
        } else if coeff[i].abs() > g_tol {
            null -= v * coeff[i];
            has_null = true;
        }
    }
    let (u, is_newton) = if has_null { (null, false) } else { (newton, true) };
    let p = &z * u;
    if p.amax() <= 1e-14 {
        None
    } else {
        Some((p, is_newton))
    }
}

/// Exhaustive search over `{theta in simplex : theta_j in resolution * Z}`
/// in lexicographic order of the integer counts; the first minimizer wins.
pub fn brute_force_grid(problem: &QpProblem, resolution: f64) -> Result<SolveResult> {
    let m = problem.dim();
    if m > BRUTE_FORCE_MAX_DIM {
        return Err(Error::TooLarge {
            what: "brute-force grid dimension",
            count: m as u128,
            cap: BRUTE_FORCE_MAX_DIM as u128,
        });
    }
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(Error::Domain(format!("grid resolution must lie in (0, 1], got {resolution}")));
    }
    let steps_f = 1.0 / resolution;
    let steps = steps_f.round() as usize;
    if (steps_f - steps as f64).abs() > 1e-9 * steps_f {
        return Err(Error::Domain(format!("1/resolution must be an integer, got {steps_f}")));
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut count = 0usize;
    for_each_composition(steps, m, &mut |counts| {
        count += 1;
        let theta: Vec<f64> = counts.iter().map(|&c| c as f64 / steps as f64).collect();
        let val = problem.value(&theta);
        if best.as_ref().is_none_or(|(_, b)| val < *b) {
            best = Some((theta, val));
        }
    });
    let (theta, _) = best.expect("the lattice contains at least one point");
    let theta = SimplexPoint::renormalized(theta);
    Ok(SolveResult {
        objective: problem.value(theta.weights()),
        kkt_residual: kkt_residual(problem, theta.weights()),
        theta,
        iterations: count,
        converged: true,
    })
}

/// Calls `visit` on every `parts`-tuple of non-negative integers summing to
/// `total`, in lexicographic order.
pub fn for_each_composition(total: usize, parts: usize, visit: &mut dyn FnMut(&[usize])) {
    fn rec(buf: &mut Vec<usize>, left: usize, parts: usize, visit: &mut dyn FnMut(&[usize])) {
        if buf.len() + 1 == parts {
            buf.push(left);
            visit(buf);
            buf.pop();
            return;
        }
        for c in 0..=left {
            buf.push(c);
            rec(buf, left - c, parts, visit);
            buf.pop();
        }
    }
    if parts == 0 {
        return;
    }
    let mut buf = Vec::with_capacity(parts);
    rec(&mut buf, total, parts, visit);
}
