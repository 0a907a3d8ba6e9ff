//! One-call aggregation procedures: Q-aggregation and its prior-weighted,
//! variance plug-in and subgaussian variants, Cp selection and minimization,
//! convex aggregation over a Maurey grid, sparsity pattern aggregation and
//! aggregation of k-regressor projectors.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::criteria::{self, ObjectiveKind, ObjectiveSpec, Prior, QpProblem, SimplexPoint};
use crate::error::{Error, Result};
use crate::estimators::{make_projection, AffineEstimator, EstimatorBank};
use crate::par::{self, Execution};
use crate::qp::{self, SolveOptions, SolveResult};

/// Default cap on the number of Maurey grid points.
pub const DEFAULT_GRID_CAP: u128 = 200_000;
/// Default cap on the number of enumerated supports.
pub const DEFAULT_SUPPORT_CAP: u128 = 100_000;

#[derive(Debug, Clone, Serialize)]
pub struct AggregateOutput {
    pub theta: SimplexPoint,
    #[serde(skip)]
    pub fitted: DVector<f64>,
    pub solve: SolveResult,
    pub objective_kind: ObjectiveKind,
    /// Violated assumptions that did not stop the computation.
    pub warnings: Vec<String>,
}

/// Minimizes `spec` over the simplex for the given bank.
///
/// Fails with [`Error::SolverNotConverged`] when the KKT residual does not
/// reach the tolerance. Inadmissible estimators (operator norm above one)
/// and, for `W_pen`, non-projector estimators only produce warnings.
pub fn aggregate(bank: &EstimatorBank, spec: &ObjectiveSpec, options: &SolveOptions) -> Result<AggregateOutput> {
    let problem = criteria::qp_reduce(bank, spec)?;
    let (tol, max_iter) = options.resolve(&problem);
    let solve = qp::solve_qp(&problem, tol, max_iter)?;
    if !solve.converged {
        return Err(Error::SolverNotConverged {
            kkt_residual: solve.kkt_residual,
            tol,
            iterations: solve.iterations,
        });
    }
    let mut warnings = Vec::new();
    let bad = bank.inadmissible();
    if !bad.is_empty() {
        warnings.push(format!(
            "estimators {bad:?} have operator norm above 1; the sharp oracle inequalities assume admissible estimators"
        ));
    }
    if spec.kind() == ObjectiveKind::WPen && !bank.all_projectors() {
        warnings.push("variance plug-in aggregation assumes orthoprojector estimators".into());
    }
    for w in &warnings {
        log::debug!("{w}");
    }
    let fitted = bank.mixture_fit(solve.theta.weights())?;
    Ok(AggregateOutput {
        theta: solve.theta.clone(),
        fitted,
        solve,
        objective_kind: spec.kind(),
        warnings,
    })
}

/// `argmin H_pen` over the simplex.
pub fn q_aggregate(bank: &EstimatorBank, sigma2: f64) -> Result<AggregateOutput> {
    aggregate(bank, &ObjectiveSpec::HPen { sigma2 }, &SolveOptions::default())
}

/// `argmin V_pen` over the simplex.
pub fn q_aggregate_prior(bank: &EstimatorBank, sigma2: f64, prior: &Prior) -> Result<AggregateOutput> {
    let spec = ObjectiveSpec::VPen {
        sigma2,
        prior: prior.clone(),
    };
    aggregate(bank, &spec, &SolveOptions::default())
}

/// `argmin W_pen` over the simplex, with an estimated noise variance.
pub fn q_aggregate_plugin_variance(bank: &EstimatorBank, sigma2_hat: f64) -> Result<AggregateOutput> {
    aggregate(bank, &ObjectiveSpec::WPen { sigma2_hat }, &SolveOptions::default())
}

/// The Q-aggregate under subgaussian noise. The estimator does not change
/// with the noise law, so this is [`q_aggregate`] with the true variance.
pub fn q_aggregate_subgaussian(bank: &EstimatorBank, sigma2: f64) -> Result<AggregateOutput> {
    q_aggregate(bank, sigma2)
}

/// Smallest index minimizing `Cp(e_j)`.
pub fn erm_cp_select(bank: &EstimatorBank, sigma2: f64) -> Result<usize> {
    let mut best = (0, f64::INFINITY);
    for j in 0..bank.len() {
        let v = criteria::cp_criterion(bank, sigma2, &SimplexPoint::vertex(bank.len(), j))?;
        if v < best.1 {
            best = (j, v);
        }
    }
    Ok(best.0)
}

/// `argmin Cp` over the whole simplex, without penalty.
pub fn cp_minimize(bank: &EstimatorBank, sigma2: f64) -> Result<AggregateOutput> {
    aggregate(bank, &ObjectiveSpec::Cp { sigma2 }, &SolveOptions::default())
}

/// Output for a bank of one estimator: weight one, nothing to solve.
fn pass_through(est: &AffineEstimator, y: &DVector<f64>, spec: &ObjectiveSpec) -> Result<AggregateOutput> {
    let fitted = est.apply(y)?;
    let tr = est.trace();
    let base = fitted.norm_squared() - 2.0 * y.dot(&fitted);
    let extra = spec.linear_terms(&[tr])?[0];
    let theta = SimplexPoint::vertex(1, 0);
    Ok(AggregateOutput {
        solve: SolveResult {
            theta: theta.clone(),
            objective: base + extra,
            kkt_residual: 0.0,
            iterations: 0,
            converged: true,
        },
        theta,
        fitted,
        objective_kind: spec.kind(),
        warnings: Vec::new(),
    })
}

/// Saturating binomial coefficient.
pub fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul(n - i) {
            Some(v) => v / (i + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// `m = floor(sqrt(n / log(1 + M / sqrt(n))))`.
pub fn maurey_m(num_estimators: usize, n: usize) -> Result<usize> {
    if num_estimators == 0 || n == 0 {
        return Err(Error::Domain("Maurey grid needs M >= 1 and n >= 1".into()));
    }
    let sn = (n as f64).sqrt();
    let m = (n as f64 / (1.0 + num_estimators as f64 / sn).ln()).sqrt().floor();
    if m < 1.0 {
        return Err(Error::Domain(format!(
            "Maurey grid is empty for M = {num_estimators}, n = {n} (needs M <= sqrt(n)(e^n - 1))"
        )));
    }
    Ok(m as usize)
}

/// The points `(1/m) sum_{q<=m} e_{j_q}` of the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaureyGrid {
    pub num_estimators: usize,
    pub m: usize,
    pub points: Vec<SimplexPoint>,
}

impl MaureyGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn maurey_grid(num_estimators: usize, n: usize, cap: u128) -> Result<MaureyGrid> {
    maurey_grid_with_m(num_estimators, maurey_m(num_estimators, n)?, cap)
}

/// Grid with an explicit `m`; there are `C(M + m - 1, m)` points.
pub fn maurey_grid_with_m(num_estimators: usize, m: usize, cap: u128) -> Result<MaureyGrid> {
    if m == 0 || num_estimators == 0 {
        return Err(Error::Domain("Maurey grid needs m >= 1 and M >= 1".into()));
    }
    let count = binomial((num_estimators + m - 1) as u128, m as u128);
    if count > cap {
        return Err(Error::TooLarge {
            what: "Maurey grid",
            count,
            cap,
        });
    }
    let mut points = Vec::with_capacity(count as usize);
    qp::for_each_composition(m, num_estimators, &mut |c| {
        points.push(SimplexPoint::renormalized(c.iter().map(|&k| k as f64 / m as f64).collect()));
    });
    Ok(MaureyGrid {
        num_estimators,
        m,
        points,
    })
}

/// `m log(2 e M / m)`, an upper bound on the log-cardinality of the grid.
pub fn grid_log_size_bound(num_estimators: usize, m: usize) -> f64 {
    m as f64 * (2.0 * std::f64::consts::E * num_estimators as f64 / m as f64).ln()
}

/// `(min over the grid) - (min over the simplex)` of a quadratic.
pub fn maurey_gap(problem: &QpProblem, grid: &MaureyGrid) -> Result<f64> {
    if problem.dim() > qp::BRUTE_FORCE_MAX_DIM {
        return Err(Error::TooLarge {
            what: "exact simplex minimum for the Maurey gap",
            count: problem.dim() as u128,
            cap: qp::BRUTE_FORCE_MAX_DIM as u128,
        });
    }
    if grid.num_estimators != problem.dim() {
        return Err(Error::DimensionMismatch {
            context: "maurey_gap: grid dimension",
            expected: problem.dim(),
            actual: grid.num_estimators,
        });
    }
    let grid_min = grid
        .points
        .iter()
        .map(|p| problem.value(p.weights()))
        .fold(f64::INFINITY, f64::min);
    let solve = qp::solve_qp_with(problem, &SolveOptions::default())?;
    if !solve.converged {
        return Err(Error::SolverNotConverged {
            kkt_residual: solve.kkt_residual,
            tol: qp::default_tol(problem),
            iterations: solve.iterations,
        });
    }
    Ok(grid_min - solve.objective)
}

/// `4 max_j Sigma_jj / m` for the quadratic `theta^T Sigma theta + ...`,
/// i.e. with `Sigma` half the QP Hessian.
pub fn maurey_bound(problem: &QpProblem, m: usize) -> f64 {
    let max_diag = (0..problem.dim()).map(|j| 0.5 * problem.hessian[(j, j)]).fold(f64::NEG_INFINITY, f64::max);
    4.0 * max_diag / m as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvexAggregate {
    pub grid_m: usize,
    pub grid_size: usize,
    /// Weights over the grid estimators.
    pub grid_output: AggregateOutput,
    /// The same aggregate expressed as weights over the original estimators.
    pub theta: SimplexPoint,
}

/// The grid estimators `mu_u = A_u y + b_u` for every grid point `u`.
pub fn grid_estimators(estimators: &Arc<[AffineEstimator]>, grid: &MaureyGrid) -> Result<Vec<AffineEstimator>> {
    grid.points
        .iter()
        .map(|u| AffineEstimator::mixture(estimators, u.weights()))
        .collect()
}

/// Q-aggregation over the Maurey grid of `estimators`.
pub fn convex_aggregate(
    estimators: &Arc<[AffineEstimator]>,
    y: &DVector<f64>,
    sigma2: f64,
    cap: u128,
) -> Result<ConvexAggregate> {
    let spec = ObjectiveSpec::HPen { sigma2 };
    if estimators.len() == 1 {
        let out = pass_through(&estimators[0], y, &spec)?;
        return Ok(ConvexAggregate {
            grid_m: 1,
            grid_size: 1,
            theta: out.theta.clone(),
            grid_output: out,
        });
    }
    let grid = maurey_grid(estimators.len(), y.len(), cap)?;
    let bank = EstimatorBank::new(grid_estimators(estimators, &grid)?, y.clone())?;
    let out = aggregate(&bank, &spec, &SolveOptions::default())?;
    Ok(ConvexAggregate {
        grid_m: grid.m,
        grid_size: grid.len(),
        theta: map_back(&grid, &out.theta),
        grid_output: out,
    })
}

/// `sum_u theta_u u`.
pub fn map_back(grid: &MaureyGrid, theta: &SimplexPoint) -> SimplexPoint {
    let mut w = vec![0.0; grid.num_estimators];
    for (u, t) in grid.points.iter().zip(theta.weights()) {
        for (wj, uj) in w.iter_mut().zip(u.weights()) {
            *wj += t * uj;
        }
    }
    SimplexPoint::renormalized(w)
}

/// Supports of size at most `k_max`, by size and then lexicographically.
pub fn enumerate_supports(p: usize, k_max: usize, cap: u128) -> Result<Vec<Vec<usize>>> {
    let k_max = k_max.min(p);
    let count: u128 = (0..=k_max).map(|k| binomial(p as u128, k as u128)).fold(0u128, u128::saturating_add);
    if count > cap {
        return Err(Error::TooLarge {
            what: "support enumeration",
            count,
            cap,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    for k in 0..=k_max {
        out.extend(subsets_of_size(p, k));
    }
    Ok(out)
}

fn subsets_of_size(p: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    if k > p {
        return out;
    }
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] < p - k + i {
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Least-squares projectors over all supports `|J| <= k_max` of a design,
/// with the prior `pi_J ∝ exp(-|J|) / C(p, |J|)` renormalized over the
/// enumerated supports.
#[derive(Debug, Clone)]
pub struct SparsitySpec {
    pub design: DMatrix<f64>,
    pub k_max: usize,
    pub khat2: f64,
    pub supports: Vec<Vec<usize>>,
    pub prior: Prior,
    pub estimators: Arc<[AffineEstimator]>,
    pub ranks: Vec<usize>,
    /// Supports where `Tr(A_J) > log(1/pi_J)`.
    pub trace_violations: Vec<usize>,
}

impl SparsitySpec {
    pub fn new(design: DMatrix<f64>, k_max: usize, khat2: f64, cap: u128, exec: Execution) -> Result<Self> {
        if !(khat2.is_finite() && khat2 >= 0.0) {
            return Err(Error::Domain(format!("khat2 must be finite and >= 0, got {khat2}")));
        }
        let p = design.ncols();
        if p == 0 {
            return Err(Error::InvalidInput("design has no columns".into()));
        }
        let supports = enumerate_supports(p, k_max, cap)?;
        let prior = Prior::from_unnormalized(
            supports
                .iter()
                .map(|j| (-(j.len() as f64)).exp() / binomial(p as u128, j.len() as u128) as f64)
                .collect(),
        )?;
        let projections = par::map_slice(exec, &supports, |cols| make_projection(&design, cols));
        let mut estimators = Vec::with_capacity(supports.len());
        let mut ranks = Vec::with_capacity(supports.len());
        for proj in projections {
            let proj = proj?;
            ranks.push(proj.rank);
            estimators.push(proj.estimator);
        }
        let neg_log = prior.neg_log();
        let trace_violations: Vec<usize> = estimators
            .iter()
            .zip(&neg_log)
            .enumerate()
            .filter(|(_, (e, l))| e.trace() > **l)
            .map(|(i, _)| i)
            .collect();
        if !trace_violations.is_empty() {
            log::warn!(
                "{} supports violate Tr(A_J) <= log(1/pi_J) under the capped enumeration",
                trace_violations.len()
            );
        }
        Ok(SparsitySpec {
            design,
            k_max: k_max.min(p),
            khat2,
            supports,
            prior,
            estimators: estimators.into(),
            ranks,
            trace_violations,
        })
    }

    pub fn objective(&self) -> ObjectiveSpec {
        ObjectiveSpec::U {
            khat2: self.khat2,
            prior: self.prior.clone(),
        }
    }
}

/// Minimizes `U` over the projector bank of `spec`.
pub fn sparsity_pattern_aggregate(spec: &SparsitySpec, y: &DVector<f64>) -> Result<AggregateOutput> {
    let bank = EstimatorBank::new(Arc::clone(&spec.estimators), y.clone())?;
    let mut out = aggregate(&bank, &spec.objective(), &SolveOptions::default())?;
    if !spec.trace_violations.is_empty() {
        out.warnings.push(format!(
            "{} supports violate Tr(A_J) <= log(1/pi_J)",
            spec.trace_violations.len()
        ));
    }
    Ok(out)
}

/// Projectors onto the spans of every `k` columns of the design.
pub fn kregressor_estimators(design: &DMatrix<f64>, k: usize, cap: u128, exec: Execution) -> Result<Vec<AffineEstimator>> {
    let p = design.ncols();
    if k == 0 || k > p {
        return Err(Error::Domain(format!("k must lie in 1..={p}, got {k}")));
    }
    let count = binomial(p as u128, k as u128);
    if count > cap {
        return Err(Error::TooLarge {
            what: "k-subset enumeration",
            count,
            cap,
        });
    }
    let subsets = subsets_of_size(p, k);
    par::map_slice(exec, &subsets, |cols| make_projection(design, cols).map(|p| p.estimator))
        .into_iter()
        .collect()
}

/// Q-aggregation of all rank-`k` column-span projectors.
pub fn kregressor_aggregate(design: &DMatrix<f64>, k: usize, y: &DVector<f64>, sigma2: f64) -> Result<AggregateOutput> {
    let estimators = kregressor_estimators(design, k, DEFAULT_SUPPORT_CAP, Execution::default())?;
    if estimators.len() == 1 {
        return pass_through(&estimators[0], y, &ObjectiveSpec::HPen { sigma2 });
    }
    q_aggregate(&EstimatorBank::new(estimators, y.clone())?, sigma2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::random;
    use crate::linalg;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bank(rng: &mut ChaCha8Rng, n: usize, m: usize) -> EstimatorBank {
        let ests: Vec<_> = (0..m).map(|_| random::admissible_estimator(rng, n, true)).collect();
        EstimatorBank::new(ests, random::gaussian_vector(rng, n, 1.5)).unwrap()
    }

    #[test]
    fn identical_estimators_return_the_common_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = random::admissible_estimator(&mut rng, 6, true);
        let bank = EstimatorBank::new(vec![e.clone(), e], random::gaussian_vector(&mut rng, 6, 1.0)).unwrap();
        let out = q_aggregate(&bank, 1.0).unwrap();
        assert!((out.fitted - bank.fit(0)).abs().max() < 1e-12);
    }

    #[test]
    fn constant_estimator_equal_to_y_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = random::gaussian_vector(&mut rng, 5, 1.0);
        let ests = vec![
            AffineEstimator::constant(random::gaussian_vector(&mut rng, 5, 1.0)).unwrap(),
            AffineEstimator::constant(y.clone()).unwrap(),
            AffineEstimator::constant(random::gaussian_vector(&mut rng, 5, 1.0)).unwrap(),
        ];
        let bank = EstimatorBank::new(ests, y).unwrap();
        let out = q_aggregate(&bank, 0.0).unwrap();
        let qp = criteria::qp_reduce(&bank, &ObjectiveSpec::HPen { sigma2: 0.0 }).unwrap();
        let grid = qp::brute_force_grid(&qp, 0.01).unwrap();
        assert_eq!(grid.theta.weights(), &[0.0, 1.0, 0.0]);
        assert!((out.theta.weights()[1] - 1.0).abs() < 1e-9);
        assert_eq!(erm_cp_select(&bank, 0.0).unwrap(), 1);
    }

    #[test]
    fn erm_tie_breaks_to_first_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random::admissible_estimator(&mut rng, 4, false);
        let bank = EstimatorBank::new(vec![e.clone(), e.clone(), e], random::gaussian_vector(&mut rng, 4, 1.0)).unwrap();
        assert_eq!(erm_cp_select(&bank, 1.0).unwrap(), 0);
    }

    #[test]
    fn uniform_prior_and_plugin_variance_match_q_aggregate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = random_bank(&mut rng, 8, 4);
        let base = q_aggregate(&bank, 0.5).unwrap();
        let prior = q_aggregate_prior(&bank, 0.5, &Prior::uniform(4)).unwrap();
        let plug = q_aggregate_plugin_variance(&bank, 0.5).unwrap();
        let shift = 46.0 * 0.5 * 4f64.ln();
        assert!((prior.solve.objective - shift - base.solve.objective).abs() < 1e-8);
        assert_eq!(plug.theta, base.theta);
        let sub = q_aggregate_subgaussian(&bank, 0.5).unwrap();
        assert_eq!(sub.theta, base.theta);
    }

    #[test]
    fn skewed_prior_concentrates_on_favoured_vertex() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = random::gaussian_vector(&mut rng, 6, 1.0);
        let ests = vec![
            AffineEstimator::scaled_identity(6, 0.5).unwrap(),
            AffineEstimator::scaled_identity(6, 0.55).unwrap(),
            AffineEstimator::scaled_identity(6, 0.45).unwrap(),
        ];
        let bank = EstimatorBank::new(ests, y).unwrap();
        let eps = 1e-6;
        let prior = Prior::new(vec![1.0 - 2.0 * eps, eps, eps]).unwrap();
        let out = q_aggregate_prior(&bank, 1.0, &prior).unwrap();
        let spec = ObjectiveSpec::VPen { sigma2: 1.0, prior };
        let grid = qp::brute_force_grid(&criteria::qp_reduce(&bank, &spec).unwrap(), 0.01).unwrap();
        assert!(out.theta.weights()[0] > 0.99);
        assert!(out.solve.objective <= grid.objective + 1e-9);
    }

    #[test]
    fn equal_trace_bank_ignores_plugin_variance() {
        let x = DMatrix::<f64>::identity(6, 6);
        let ests = kregressor_estimators(&x, 2, DEFAULT_SUPPORT_CAP, Execution::Sequential).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = EstimatorBank::new(ests, random::gaussian_vector(&mut rng, 6, 1.0)).unwrap();
        let a = q_aggregate_plugin_variance(&bank, 0.2).unwrap();
        let b = q_aggregate_plugin_variance(&bank, 3.0).unwrap();
        assert!((a.fitted - b.fitted).abs().max() < 1e-7);
    }

    #[test]
    fn cp_minimize_never_loses_on_cp() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let bank = random_bank(&mut rng, 7, 3);
            let c = cp_minimize(&bank, 0.7).unwrap();
            let h = q_aggregate(&bank, 0.7).unwrap();
            let cp_c = criteria::cp_criterion(&bank, 0.7, &c.theta).unwrap();
            let cp_h = criteria::cp_criterion(&bank, 0.7, &h.theta).unwrap();
            assert!(cp_c <= cp_h + 1e-8 * (1.0 + cp_h.abs()));
            let qp = criteria::qp_reduce(&bank, &ObjectiveSpec::Cp { sigma2: 0.7 }).unwrap();
            let grid = qp::brute_force_grid(&qp, 0.01).unwrap();
            assert!(c.solve.objective <= grid.objective + 1e-9);
        }
    }

    #[test]
    fn maurey_grid_examples() {
        let g = maurey_grid_with_m(2, 2, DEFAULT_GRID_CAP).unwrap();
        let pts: Vec<Vec<f64>> = g.points.iter().map(|p| p.weights().to_vec()).collect();
        assert_eq!(pts.len(), 3);
        for want in [vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]] {
            assert!(pts.contains(&want));
        }
        assert_eq!(maurey_grid_with_m(3, 2, DEFAULT_GRID_CAP).unwrap().len(), 6);
        assert!(matches!(maurey_grid_with_m(30, 10, 1000), Err(Error::TooLarge { .. })));
        assert_eq!(maurey_m(20, 200).unwrap(), 15);
    }

    #[test]
    fn maurey_size_bound_holds() {
        for big_m in 1..=10usize {
            for m in 1..=5usize {
                let count = binomial((big_m + m - 1) as u128, m as u128) as f64;
                assert!(count.ln() <= grid_log_size_bound(big_m, m) + 1e-12, "M={big_m} m={m}");
            }
        }
    }

    #[test]
    fn maurey_gap_cases() {
        let q = QpProblem::new(DMatrix::zeros(3, 3), DVector::from_element(3, 2.0), 1.0).unwrap();
        let grid = maurey_grid_with_m(3, 1, DEFAULT_GRID_CAP).unwrap();
        assert!(maurey_gap(&q, &grid).unwrap().abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for m in 1..=3 {
            for _ in 0..20 {
                let a = random::gaussian_matrix(&mut rng, 4, 4);
                let h = linalg::symmetrize(&(&a * a.transpose()));
                let c = random::gaussian_vector(&mut rng, 4, 1.0);
                let q = QpProblem::new(h, c, 0.0).unwrap();
                let grid = maurey_grid_with_m(4, m, DEFAULT_GRID_CAP).unwrap();
                let gap = maurey_gap(&q, &grid).unwrap();
                assert!(gap >= -1e-9);
                assert!(gap <= maurey_bound(&q, m) + 1e-8);
            }
        }
    }

    #[test]
    fn convex_aggregate_beats_original_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ests: Arc<[AffineEstimator]> = (0..3)
            .map(|_| random::admissible_estimator(&mut rng, 9, true))
            .collect::<Vec<_>>()
            .into();
        let y = random::gaussian_vector(&mut rng, 9, 1.0);
        let out = convex_aggregate(&ests, &y, 1.0, DEFAULT_GRID_CAP).unwrap();
        let bank = EstimatorBank::new(Arc::clone(&ests), y.clone()).unwrap();
        let vmin = (0..3)
            .map(|j| criteria::h_pen(&bank, 1.0, &SimplexPoint::vertex(3, j)).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!(out.grid_output.solve.objective <= vmin + 1e-9);
        let mapped = bank.mixture_fit(out.theta.weights()).unwrap();
        assert!((mapped - &out.grid_output.fitted).abs().max() < 1e-9);

        let single: Arc<[AffineEstimator]> = vec![ests[0].clone()].into();
        let one = convex_aggregate(&single, &y, 1.0, DEFAULT_GRID_CAP).unwrap();
        assert_eq!(one.theta.weights(), &[1.0]);
    }

    #[test]
    fn grid_estimators_respect_operator_norm_convexity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ests: Arc<[AffineEstimator]> = (0..3)
            .map(|_| random::admissible_estimator(&mut rng, 6, false))
            .collect::<Vec<_>>()
            .into();
        let max_norm = ests.iter().map(|e| e.operator_norm(1e-12).unwrap()).fold(0.0, f64::max);
        let grid = maurey_grid_with_m(3, 3, DEFAULT_GRID_CAP).unwrap();
        for e in grid_estimators(&ests, &grid).unwrap() {
            assert!(linalg::spectral_norm(&e.linear.to_dense()) <= max_norm + 1e-9);
        }
    }

    #[test]
    fn sparsity_prior_examples() {
        let x = DMatrix::from_element(4, 1, 1.0);
        let spec = SparsitySpec::new(x, 3, 1.0, DEFAULT_SUPPORT_CAP, Execution::Sequential).unwrap();
        assert_eq!(spec.supports, vec![vec![], vec![0]]);
        let z = 1.0 + (-1f64).exp();
        assert!((spec.prior.weights()[0] - 1.0 / z).abs() < 1e-15);
        assert!((spec.prior.weights()[1] - (-1f64).exp() / z).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random::gaussian_matrix(&mut rng, 64, 8);
        let spec = SparsitySpec::new(x, 3, 1.0, DEFAULT_SUPPORT_CAP, Execution::Sequential).unwrap();
        assert_eq!(spec.supports.len(), 1 + 8 + 28 + 56);
        assert!((spec.prior.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let singles: Vec<f64> = spec
            .supports
            .iter()
            .zip(spec.prior.weights())
            .filter(|(j, _)| j.len() == 1)
            .map(|(_, w)| *w)
            .collect();
        assert!(singles.iter().all(|w| *w == singles[0]));
        assert!(spec.trace_violations.is_empty());
    }

    #[test]
    fn sparsity_recovers_noiseless_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random::gaussian_matrix(&mut rng, 20, 4);
        let y = x.column(1) * 2.0 - x.column(3) * 1.5;
        let spec = SparsitySpec::new(x, 2, 1e-6, DEFAULT_SUPPORT_CAP, Execution::Sequential).unwrap();
        let out = sparsity_pattern_aggregate(&spec, &y).unwrap();
        assert!((&out.fitted - &y).norm() < 1e-3 * y.norm());
    }

    #[test]
    fn kregressor_cases() {
        let x = DMatrix::<f64>::identity(5, 5);
        let y = DVector::from_fn(5, |i, _| i as f64);
        let out = kregressor_aggregate(&x.columns(0, 2).into_owned(), 2, &y, 1.0).unwrap();
        assert_eq!(out.theta.weights(), &[1.0]);

        let x = DMatrix::<f64>::identity(30, 30);
        let mut f = DVector::zeros(30);
        f[0] = 5.0;
        let mut wins = 0;
        for t in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + t);
            let y = &f + random::gaussian_vector(&mut rng, 30, 0.1);
            let out = kregressor_aggregate(&x, 1, &y, 0.01).unwrap();
            let top = out
                .theta
                .weights()
                .iter()
                .enumerate()
                .fold((0, -1.0), |a, (j, w)| if *w > a.1 { (j, *w) } else { a });
            if top.0 == 0 {
                wins += 1;
            }
        }
        assert!(wins > 50);
    }

    #[test]
    fn subset_enumeration_order() {
        assert_eq!(subsets_of_size(4, 2), vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(subsets_of_size(3, 0), vec![Vec::<usize>::new()]);
        assert_eq!(binomial(10, 3), 120);
        assert_eq!(binomial(3, 5), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn objective_not_above_best_vertex(seed in any::<u64>(), m in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank = random_bank(&mut rng, 10, m);
            let sigma2 = rng.random_range(0.1..2.0);
            let out = q_aggregate(&bank, sigma2).unwrap();
            let vmin = (0..m)
                .map(|j| criteria::h_pen(&bank, sigma2, &SimplexPoint::vertex(m, j)).unwrap())
                .fold(f64::INFINITY, f64::min);
            prop_assert!(out.solve.objective <= vmin + 1e-9 * (1.0 + vmin.abs()));
            let fit = bank.mixture_fit(out.theta.weights()).unwrap();
            prop_assert!((fit - &out.fitted).abs().max() <= 1e-9);
        }

        #[test]
        fn scale_equivariance(seed in any::<u64>(), c in 0.2f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 8;
            let lin: Vec<_> = (0..3).map(|_| random::admissible_estimator(&mut rng, n, false)).collect();
            let offsets: Vec<DVector<f64>> = (0..3).map(|_| random::gaussian_vector(&mut rng, n, 1.0)).collect();
            let y = random::gaussian_vector(&mut rng, n, 1.0);
            let build = |s: f64| -> EstimatorBank {
                let ests: Vec<_> = lin.iter().zip(&offsets).map(|(e, b)| e.clone().with_offset(b * s).unwrap()).collect();
                EstimatorBank::new(ests, &y * s).unwrap()
            };
            let a = q_aggregate(&build(1.0), 0.5).unwrap();
            let b = q_aggregate(&build(c), 0.5 * c * c).unwrap();
            let scale = a.fitted.norm().max(1.0);
            prop_assert!((&a.fitted * c - &b.fitted).abs().max() <= 1e-6 * scale * c);
        }
    }
}
