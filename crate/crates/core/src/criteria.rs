//! Objectives over the simplex: Cp, the Q-aggregation penalty and the
//! penalized criteria built from it, their exact reduction to a quadratic
//! program, and the pairwise quantities that drive the oracle inequalities.
//!
//! Hot paths evaluate everything through the bank's Gram matrix. The
//! [`direct`] module recomputes the same quantities from the fitted vectors
//! and mixed estimators and exists to cross-check the fast path.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::estimators::{AffineEstimator, EstimatorBank};

/// Multiplier of the prior entropy term in `V_pen`.
pub const V_PEN_ENTROPY: f64 = 46.0;
/// Multiplier of `K^2` in the entropy term of `U`.
pub const U_ENTROPY: f64 = 32.0;

const SIMPLEX_NEG_TOL: f64 = 1e-12;
const SIMPLEX_SUM_TOL: f64 = 1e-10;

/// A point of the simplex `{theta >= 0, sum theta = 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    /// Accepts weights with entries `>= -1e-12` summing to one within
    /// `1e-10`, clips the tiny negatives and renormalizes.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("simplex point with no coordinates".into()));
        }
        if let Some(bad) = weights.iter().find(|w| !w.is_finite() || **w < -SIMPLEX_NEG_TOL) {
            return Err(Error::InvalidInput(format!("simplex weight {bad} is negative or non-finite")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::InvalidInput(format!("simplex weights sum to {sum}, not 1")));
        }
        Ok(Self::renormalized(weights))
    }

    /// Clips negatives and divides by the sum without range checks. Used by
    /// the solver on points that are feasible up to rounding.
    pub(crate) fn renormalized(mut weights: Vec<f64>) -> Self {
        for w in weights.iter_mut() {
            if *w < 0.0 {
                *w = 0.0;
            }
        }
        let sum: f64 = weights.iter().sum();
        if sum != 1.0 && sum > 0.0 {
            for w in weights.iter_mut() {
                *w /= sum;
            }
        }
        SimplexPoint(weights)
    }

    pub fn vertex(m: usize, j: usize) -> Self {
        let mut w = vec![0.0; m];
        w[j] = 1.0;
        SimplexPoint(w)
    }

    pub fn uniform(m: usize) -> Self {
        SimplexPoint(vec![1.0 / m as f64; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }
}

impl TryFrom<Vec<f64>> for SimplexPoint {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        SimplexPoint::new(v)
    }
}

impl From<SimplexPoint> for Vec<f64> {
    fn from(p: SimplexPoint) -> Self {
        p.0
    }
}

/// Prior weights `pi_j > 0` summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Prior(Vec<f64>);

impl Prior {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        if pi.is_empty() {
            return Err(Error::InvalidInput("prior with no entries".into()));
        }
        if let Some(bad) = pi.iter().find(|p| !p.is_finite() || **p <= 0.0) {
            return Err(Error::InvalidInput(format!("prior weight {bad} is not strictly positive")));
        }
        let sum: f64 = pi.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!("prior weights sum to {sum}, not 1")));
        }
        Ok(Prior(pi))
    }

    /// Normalizes positive weights.
    pub fn from_unnormalized(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::InvalidInput(format!("prior weights have sum {sum}")));
        }
        Prior::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(m: usize) -> Self {
        Prior(vec![1.0 / m as f64; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    /// `log(1/pi_j)` for every `j`.
    pub fn neg_log(&self) -> Vec<f64> {
        self.0.iter().map(|p| -p.ln()).collect()
    }

    /// Linear entropy `sum_j theta_j log(1/pi_j)`.
    pub fn linear_entropy(&self, theta: &[f64]) -> f64 {
        theta.iter().zip(&self.0).map(|(t, p)| -t * p.ln()).sum()
    }
}

impl TryFrom<Vec<f64>> for Prior {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Prior::new(v)
    }
}

impl From<Prior> for Vec<f64> {
    fn from(p: Prior) -> Self {
        p.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Cp,
    HPen,
    VPen,
    WPen,
    U,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Cp => "cp",
            ObjectiveKind::HPen => "h_pen",
            ObjectiveKind::VPen => "v_pen",
            ObjectiveKind::WPen => "w_pen",
            ObjectiveKind::U => "u",
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An objective together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    Cp { sigma2: f64 },
    HPen { sigma2: f64 },
    VPen { sigma2: f64, prior: Prior },
    WPen { sigma2_hat: f64 },
    U { khat2: f64, prior: Prior },
}

impl ObjectiveSpec {
    pub fn kind(&self) -> ObjectiveKind {
        match self {
            ObjectiveSpec::Cp { .. } => ObjectiveKind::Cp,
            ObjectiveSpec::HPen { .. } => ObjectiveKind::HPen,
            ObjectiveSpec::VPen { .. } => ObjectiveKind::VPen,
            ObjectiveSpec::WPen { .. } => ObjectiveKind::WPen,
            ObjectiveSpec::U { .. } => ObjectiveKind::U,
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        let (name, value) = match self {
            ObjectiveSpec::Cp { sigma2 } | ObjectiveSpec::HPen { sigma2 } | ObjectiveSpec::VPen { sigma2, .. } => {
                ("sigma2", *sigma2)
            }
            ObjectiveSpec::WPen { sigma2_hat } => ("sigma2_hat", *sigma2_hat),
            ObjectiveSpec::U { khat2, .. } => ("khat2", *khat2),
        };
        nonnegative(name, value)?;
        if let ObjectiveSpec::VPen { prior, .. } | ObjectiveSpec::U { prior, .. } = self {
            check_len("prior", m, prior.len())?;
        }
        Ok(())
    }

    /// Coefficients `w_j` of the part of the objective that is linear in
    /// `theta` beyond `||mu_theta||^2 - 2 y^T mu_theta`, i.e. trace and
    /// entropy terms (the penalty is handled separately).
    pub fn linear_terms(&self, traces: &[f64]) -> Result<Vec<f64>> {
        self.validate(traces.len())?;
        Ok(match self {
            ObjectiveSpec::Cp { sigma2 } | ObjectiveSpec::HPen { sigma2 } => {
                traces.iter().map(|t| 2.0 * sigma2 * t).collect()
            }
            ObjectiveSpec::VPen { sigma2, prior } => traces
                .iter()
                .zip(prior.neg_log())
                .map(|(t, l)| 2.0 * sigma2 * t + V_PEN_ENTROPY * sigma2 * l)
                .collect(),
            ObjectiveSpec::WPen { sigma2_hat } => traces.iter().map(|t| 2.0 * sigma2_hat * t).collect(),
            ObjectiveSpec::U { khat2, prior } => {
                prior.neg_log().into_iter().map(|l| U_ENTROPY * khat2 * l).collect()
            }
        })
    }

    pub fn has_penalty(&self) -> bool {
        !matches!(self, ObjectiveSpec::Cp { .. })
    }
}

fn nonnegative(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be finite and >= 0, got {value}")))
    }
}

/// `1/2 theta^T hessian theta + lin^T theta + constant` over the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub constant: f64,
}

impl QpProblem {
    pub fn new(hessian: DMatrix<f64>, lin: DVector<f64>, constant: f64) -> Result<Self> {
        let m = lin.len();
        if m == 0 {
            return Err(Error::InvalidInput("QP with no variables".into()));
        }
        check_len("qp hessian rows", m, hessian.nrows())?;
        check_len("qp hessian columns", m, hessian.ncols())?;
        if hessian.iter().chain(lin.iter()).any(|x| !x.is_finite()) || !constant.is_finite() {
            return Err(Error::InvalidInput("QP has non-finite coefficients".into()));
        }
        let scale = hessian.iter().fold(0.0_f64, |a, x| a.max(x.abs())).max(f64::MIN_POSITIVE);
        let asym = (0..m)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| (hessian[(i, j)] - hessian[(j, i)]).abs())
            .fold(0.0_f64, f64::max);
        if asym > 1e-9 * scale {
            return Err(Error::InvalidInput(format!("QP hessian is not symmetric (max gap {asym:e})")));
        }
        Ok(QpProblem {
            hessian,
            lin,
            constant,
        })
    }

    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        0.5 * t.dot(&(&self.hessian * &t)) + self.lin.dot(&t) + self.constant
    }

    pub fn gradient(&self, theta: &[f64]) -> DVector<f64> {
        let t = DVector::from_column_slice(theta);
        &self.hessian * &t + &self.lin
    }

    /// Objective at the vertex `e_j`.
    pub fn vertex_value(&self, j: usize) -> f64 {
        0.5 * self.hessian[(j, j)] + self.lin[j] + self.constant
    }

    /// Magnitude used to scale solver tolerances.
    pub fn scale(&self) -> f64 {
        let h = self.hessian.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
        let c = self.lin.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
        h.max(c)
    }
}

struct GramTerms {
    quad: f64,
    diag: f64,
    y_dot: f64,
    trace: f64,
}

fn gram_terms(bank: &EstimatorBank, theta: &SimplexPoint) -> Result<GramTerms> {
    check_len("theta", bank.len(), theta.len())?;
    let t = theta.to_dvector();
    let g = bank.gram();
    Ok(GramTerms {
        quad: t.dot(&(g * &t)),
        diag: theta.weights().iter().enumerate().map(|(j, w)| w * g[(j, j)]).sum(),
        y_dot: dot(theta.weights(), bank.y_dot_fits()),
        trace: dot(theta.weights(), bank.traces()),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `pen(theta) = sum_j theta_j ||mu_theta - mu_j||^2 = sum_j theta_j G_jj - theta^T G theta`.
pub fn penalty(bank: &EstimatorBank, theta: &SimplexPoint) -> Result<f64> {
    let t = gram_terms(bank, theta)?;
    Ok(t.diag - t.quad)
}

/// `||mu_theta||^2 - 2 y^T mu_theta + 2 sigma2 Tr(A_theta)`.
pub fn cp_criterion(bank: &EstimatorBank, sigma2: f64, theta: &SimplexPoint) -> Result<f64> {
    nonnegative("sigma2", sigma2)?;
    let t = gram_terms(bank, theta)?;
    Ok(t.quad - 2.0 * t.y_dot + 2.0 * sigma2 * t.trace)
}

/// `Cp(theta) + pen(theta) / 2`.
pub fn h_pen(bank: &EstimatorBank, sigma2: f64, theta: &SimplexPoint) -> Result<f64> {
    Ok(cp_criterion(bank, sigma2, theta)? + 0.5 * penalty(bank, theta)?)
}

/// `H_pen(theta) + 46 sigma2 sum_j theta_j log(1/pi_j)`.
pub fn v_pen(bank: &EstimatorBank, sigma2: f64, prior: &Prior, theta: &SimplexPoint) -> Result<f64> {
    check_len("prior", bank.len(), prior.len())?;
    Ok(h_pen(bank, sigma2, theta)? + V_PEN_ENTROPY * sigma2 * prior.linear_entropy(theta.weights()))
}

/// `H_pen` with the estimated variance in the trace term.
pub fn w_pen(bank: &EstimatorBank, sigma2_hat: f64, theta: &SimplexPoint) -> Result<f64> {
    nonnegative("sigma2_hat", sigma2_hat)?;
    h_pen(bank, sigma2_hat, theta)
}

/// `||mu_theta||^2 - 2 y^T mu_theta + pen(theta)/2 + 32 khat2 sum_j theta_j log(1/pi_j)`.
pub fn u_objective(bank: &EstimatorBank, khat2: f64, prior: &Prior, theta: &SimplexPoint) -> Result<f64> {
    nonnegative("khat2", khat2)?;
    check_len("prior", bank.len(), prior.len())?;
    let t = gram_terms(bank, theta)?;
    Ok(t.quad - 2.0 * t.y_dot + 0.5 * (t.diag - t.quad) + U_ENTROPY * khat2 * prior.linear_entropy(theta.weights()))
}

pub fn evaluate(bank: &EstimatorBank, spec: &ObjectiveSpec, theta: &SimplexPoint) -> Result<f64> {
    match spec {
        ObjectiveSpec::Cp { sigma2 } => cp_criterion(bank, *sigma2, theta),
        ObjectiveSpec::HPen { sigma2 } => h_pen(bank, *sigma2, theta),
        ObjectiveSpec::VPen { sigma2, prior } => v_pen(bank, *sigma2, prior, theta),
        ObjectiveSpec::WPen { sigma2_hat } => w_pen(bank, *sigma2_hat, theta),
        ObjectiveSpec::U { khat2, prior } => u_objective(bank, *khat2, prior, theta),
    }
}

/// Exact quadratic form of an objective over the simplex.
///
/// Every penalized objective has Hessian `G` and
/// `lin_j = -2 y^T mu_j + G_jj / 2 + w_j`, where `w_j` collects trace and
/// entropy terms. Cp has Hessian `2G` and no `G_jj / 2`.
pub fn qp_reduce(bank: &EstimatorBank, spec: &ObjectiveSpec) -> Result<QpProblem> {
    let w = spec.linear_terms(bank.traces())?;
    let g = bank.gram();
    let penalized = spec.has_penalty();
    let hessian = if penalized { g.clone() } else { g * 2.0 };
    let lin = DVector::from_fn(bank.len(), |j, _| {
        let pen = if penalized { 0.5 * g[(j, j)] } else { 0.0 };
        -2.0 * bank.y_dot_fits()[j] + pen + w[j]
    });
    QpProblem::new(hessian, lin, 0.0)
}

/// `Delta_jk = 2 xi^T((A_j - A_k) f + b_j - b_k) + 2(xi^T (A_j - A_k) xi - sigma2 Tr(A_j - A_k))`.
pub fn delta_jk(
    estimators: &[AffineEstimator],
    f: &DVector<f64>,
    xi: &DVector<f64>,
    sigma2: f64,
    j: usize,
    k: usize,
) -> Result<f64> {
    let n = f.len();
    check_len("delta_jk: noise", n, xi.len())?;
    let (ej, ek) = (pair_member(estimators, j, n)?, pair_member(estimators, k, n)?);
    let shift = ej.linear.apply(f) - ek.linear.apply(f) + &ej.offset - &ek.offset;
    let quad = xi.dot(&(ej.linear.apply(xi) - ek.linear.apply(xi)));
    let tr = ej.trace() - ek.trace();
    Ok(2.0 * xi.dot(&shift) + 2.0 * (quad - sigma2 * tr))
}

fn pair_member(estimators: &[AffineEstimator], j: usize, n: usize) -> Result<&AffineEstimator> {
    let est = estimators
        .get(j)
        .ok_or_else(|| Error::InvalidInput(format!("estimator index {j} out of range ({})", estimators.len())))?;
    check_len("estimator dimension", n, est.dim())?;
    Ok(est)
}

/// Per-estimator pieces from which every `Delta_jk` follows in O(1):
/// `Delta_jk = 2 (a_j - a_k) + 2 (q_j - q_k)` with `a_j = xi^T (A_j f + b_j)`
/// and `q_j = xi^T A_j xi - sigma2 Tr A_j`.
#[derive(Debug, Clone)]
pub struct DeltaTerms {
    pub a: Vec<f64>,
    pub q: Vec<f64>,
}

impl DeltaTerms {
    pub fn new(estimators: &[AffineEstimator], f: &DVector<f64>, xi: &DVector<f64>, sigma2: f64) -> Result<Self> {
        check_len("delta terms: noise", f.len(), xi.len())?;
        let mut a = Vec::with_capacity(estimators.len());
        let mut q = Vec::with_capacity(estimators.len());
        for est in estimators {
            check_len("estimator dimension", f.len(), est.dim())?;
            a.push(xi.dot(&(est.linear.apply(f) + &est.offset)));
            q.push(xi.dot(&est.linear.apply(xi)) - sigma2 * est.trace());
        }
        Ok(DeltaTerms { a, q })
    }

    pub fn delta(&self, j: usize, k: usize) -> f64 {
        2.0 * (self.a[j] - self.a[k]) + 2.0 * (self.q[j] - self.q[k])
    }
}

/// `Q_{j,k} = (2I - B^T/2) B` and `v_{j,k} = (2I - B^T)(B f + b_k - b_j)`
/// with `B = A_k - A_j`, as dense objects.
///
/// With this orientation they decompose `Delta_kj`:
/// `Delta_kj - ||mu_j - mu_k||^2 / 2 = xi^T Q xi - sigma2 Tr Q + xi^T v
///  - sigma2 ||B||_F^2 / 2 - ||B f + b_k - b_j||^2 / 2`.
pub fn decomposition_qv(
    estimators: &[AffineEstimator],
    f: &DVector<f64>,
    j: usize,
    k: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = f.len();
    let (ej, ek) = (pair_member(estimators, j, n)?, pair_member(estimators, k, n)?);
    let b = ek.linear.to_dense() - ej.linear.to_dense();
    let eye = DMatrix::<f64>::identity(n, n);
    let q = (&eye * 2.0 - b.transpose() * 0.5) * &b;
    let shift = &b * f + &ek.offset - &ej.offset;
    let v = (&eye * 2.0 - b.transpose()) * shift;
    Ok((q, v))
}

/// Right-hand side of the deterministic per-trial inequality
/// `||mu_hat - f||^2 <= min_q ||mu_q - f||^2 + max_{q,k} Z(q, k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoleBound {
    pub oracle_risk: f64,
    pub oracle_index: usize,
    /// `max_{q,k} Z(q, k)`.
    pub max_deviation: f64,
}

impl RoleBound {
    pub fn bound(&self) -> f64 {
        self.oracle_risk + self.max_deviation
    }
}

/// Per-trial bound for a minimizer of a penalized objective.
///
/// Writing the objective as `R(theta) + pen(theta)/2 - sum_j theta_j s_j`
/// with `s_j = 2 xi^T mu_j - w_j`, strong convexity at the minimizer gives
/// `Z(q, k) = s_k - s_q - ||mu_k - mu_q||^2 / 2`. For `H_pen` this is
/// `Delta_kq - ||mu_k - mu_q||^2 / 2`.
pub fn role_bound(
    bank: &EstimatorBank,
    spec: &ObjectiveSpec,
    f: &DVector<f64>,
    xi: &DVector<f64>,
) -> Result<RoleBound> {
    if !spec.has_penalty() {
        return Err(Error::InvalidInput("the per-trial bound needs a penalized objective".into()));
    }
    check_len("role bound: truth", bank.n(), f.len())?;
    check_len("role bound: noise", bank.n(), xi.len())?;
    let w = spec.linear_terms(bank.traces())?;
    let fits = bank.fits();
    let xi_dot = fits.tr_mul(xi);
    let f_dot = fits.tr_mul(f);
    let ff = f.norm_squared();
    let g = bank.gram();
    let m = bank.len();
    let s: Vec<f64> = (0..m).map(|j| 2.0 * xi_dot[j] - w[j]).collect();
    let (mut oracle_risk, mut oracle_index) = (f64::INFINITY, 0);
    for j in 0..m {
        let r = (g[(j, j)] - 2.0 * f_dot[j] + ff).max(0.0);
        if r < oracle_risk {
            oracle_risk = r;
            oracle_index = j;
        }
    }
    let mut max_deviation = f64::NEG_INFINITY;
    for q in 0..m {
        for k in 0..m {
            let z = s[k] - s[q] - 0.5 * bank.pair_dist_sq(k, q);
            max_deviation = max_deviation.max(z);
        }
    }
    Ok(RoleBound {
        oracle_risk,
        oracle_index,
        max_deviation,
    })
}

/// Reference implementations working from fitted vectors and mixed
/// estimators instead of the Gram matrix.
pub mod direct {
    use super::*;

    fn mixture(bank: &EstimatorBank, theta: &SimplexPoint) -> Result<AffineEstimator> {
        AffineEstimator::mixture(bank.estimators(), theta.weights())
    }

    pub fn penalty(bank: &EstimatorBank, theta: &SimplexPoint) -> Result<f64> {
        let mix = mixture(bank, theta)?.apply(bank.y())?;
        Ok(theta
            .weights()
            .iter()
            .enumerate()
            .map(|(j, w)| w * (&mix - bank.fit(j)).norm_squared())
            .sum())
    }

    fn fit_and_trace(bank: &EstimatorBank, theta: &SimplexPoint) -> Result<(DVector<f64>, f64)> {
        let est = mixture(bank, theta)?;
        Ok((est.apply(bank.y())?, est.trace()))
    }

    pub fn cp_criterion(bank: &EstimatorBank, sigma2: f64, theta: &SimplexPoint) -> Result<f64> {
        let (mu, tr) = fit_and_trace(bank, theta)?;
        Ok(mu.norm_squared() - 2.0 * bank.y().dot(&mu) + 2.0 * sigma2 * tr)
    }

    pub fn evaluate(bank: &EstimatorBank, spec: &ObjectiveSpec, theta: &SimplexPoint) -> Result<f64> {
        let (mu, tr) = fit_and_trace(bank, theta)?;
        let base = mu.norm_squared() - 2.0 * bank.y().dot(&mu);
        let pen = penalty(bank, theta)?;
        let ent = |prior: &Prior| -> f64 {
            theta
                .weights()
                .iter()
                .zip(prior.weights())
                .map(|(t, p)| t * (1.0 / p).ln())
                .sum()
        };
        Ok(match spec {
            ObjectiveSpec::Cp { sigma2 } => base + 2.0 * sigma2 * tr,
            ObjectiveSpec::HPen { sigma2 } => base + 2.0 * sigma2 * tr + 0.5 * pen,
            ObjectiveSpec::VPen { sigma2, prior } => {
                base + 2.0 * sigma2 * tr + 0.5 * pen + 46.0 * sigma2 * ent(prior)
            }
            ObjectiveSpec::WPen { sigma2_hat } => base + 2.0 * sigma2_hat * tr + 0.5 * pen,
            ObjectiveSpec::U { khat2, prior } => base + 0.5 * pen + 32.0 * khat2 * ent(prior),
        })
    }
}
