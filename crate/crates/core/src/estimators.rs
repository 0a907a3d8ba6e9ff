//! Affine estimators `y -> A y + b`, estimator banks and the estimator
//! families used by the aggregation procedures.
//!
//! The linear part is kept in a structured form whenever possible so that
//! banks over `n` in the thousands never materialize an `n x n` matrix:
//! diagonal filters, orthoprojectors stored through an orthonormal basis,
//! scaled identities, the zero map, and convex mixtures of other estimators.
//! [`LinearMap::Dense`] is the general fallback.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg;

/// Entrywise tolerance on `Q^T Q = I` for projector bases.
pub const PROJECTOR_ORTHONORMAL_TOL: f64 = 1e-10;
/// Slack on `||A||_op <= 1` when deciding admissibility.
pub const ADMISSIBLE_SLACK: f64 = 1e-8;
/// Relative singular-value threshold for rank decisions in [`make_projection`].
pub const RANK_REL_TOL: f64 = 1e-10;
/// Iteration cap for the power method in [`LinearMap::operator_norm`].
pub const POWER_ITERATION_CAP: usize = 10_000;
const POWER_RESTARTS: u64 = 2;
const POWER_SEED: u64 = 0x5e_ed0f_0e7a;

/// Linear part of an affine estimator.
#[derive(Debug, Clone)]
pub enum LinearMap {
    Dense(DMatrix<f64>),
    Diagonal(DVector<f64>),
    /// Orthoprojector `Q Q^T` stored through its `n x d` orthonormal basis `Q`.
    Projector(DMatrix<f64>),
    ScaledIdentity {
        n: usize,
        lambda: f64,
    },
    Zero {
        n: usize,
    },
    /// `sum_j w_j A_j` over a shared set of estimators; only the non-zero
    /// weights are stored.
    Mixture {
        components: Arc<[AffineEstimator]>,
        weights: Vec<(usize, f64)>,
    },
}

impl LinearMap {
    pub fn dim(&self) -> usize {
        match self {
            LinearMap::Dense(a) => a.nrows(),
            LinearMap::Diagonal(w) => w.len(),
            LinearMap::Projector(q) => q.nrows(),
            LinearMap::ScaledIdentity { n, .. } | LinearMap::Zero { n } => *n,
            LinearMap::Mixture { components, .. } => components[0].dim(),
        }
    }

    /// `A x`. The caller guarantees `x.len() == self.dim()`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            LinearMap::Dense(a) => a * x,
            LinearMap::Diagonal(w) => w.component_mul(x),
            LinearMap::Projector(q) => {
                let coords = q.tr_mul(x);
                q * coords
            }
            LinearMap::ScaledIdentity { lambda, .. } => x * *lambda,
            LinearMap::Zero { n } => DVector::zeros(*n),
            LinearMap::Mixture {
                components,
                weights,
            } => {
                let mut out = DVector::zeros(x.len());
                for &(j, w) in weights {
                    out.axpy(w, &components[j].linear.apply(x), 1.0);
                }
                out
            }
        }
    }

    /// `A^T x`.
    pub fn apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            LinearMap::Dense(a) => a.tr_mul(x),
            LinearMap::Mixture {
                components,
                weights,
            } => {
                let mut out = DVector::zeros(x.len());
                for &(j, w) in weights {
                    out.axpy(w, &components[j].linear.apply_transpose(x), 1.0);
                }
                out
            }
            // Every other representation is symmetric.
            _ => self.apply(x),
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            LinearMap::Dense(a) => a.trace(),
            LinearMap::Diagonal(w) => w.sum(),
            LinearMap::Projector(q) => q.ncols() as f64,
            LinearMap::ScaledIdentity { n, lambda } => *n as f64 * lambda,
            LinearMap::Zero { .. } => 0.0,
            LinearMap::Mixture {
                components,
                weights,
            } => weights
                .iter()
                .map(|&(j, w)| w * components[j].linear.trace())
                .sum(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            LinearMap::Dense(a) => a.clone(),
            LinearMap::Diagonal(w) => DMatrix::from_diagonal(w),
            LinearMap::Projector(q) => q * q.transpose(),
            LinearMap::ScaledIdentity { n, lambda } => DMatrix::identity(*n, *n) * *lambda,
            LinearMap::Zero { n } => DMatrix::zeros(*n, *n),
            LinearMap::Mixture {
                components,
                weights,
            } => {
                let n = self.dim();
                let mut out = DMatrix::zeros(n, n);
                for &(j, w) in weights {
                    out += components[j].linear.to_dense() * w;
                }
                out
            }
        }
    }

    /// Whether the map is an orthoprojector (`P = P^T = P^2`).
    pub fn is_projector(&self) -> bool {
        match self {
            LinearMap::Projector(_) | LinearMap::Zero { .. } => true,
            LinearMap::ScaledIdentity { lambda, .. } => *lambda == 0.0 || *lambda == 1.0,
            LinearMap::Diagonal(w) => w.iter().all(|&x| x == 0.0 || x == 1.0),
            LinearMap::Dense(_) | LinearMap::Mixture { .. } => {
                let p = self.to_dense();
                let sym = linalg::frobenius_sq(&(&p - p.transpose())).sqrt();
                let idem = linalg::frobenius_sq(&(&p * &p - &p)).sqrt();
                sym <= 1e-9 && idem <= 1e-9
            }
        }
    }

    /// Largest singular value, to relative tolerance `tol`.
    ///
    /// Diagonal, projector, scaled-identity and zero maps use their closed
    /// forms. Dense maps and mixtures run the power method on `A^T A` from two
    /// seeded random starts; a start that has not settled after
    /// [`POWER_ITERATION_CAP`] iterations yields [`Error::NormNotConverged`]
    /// carrying the best estimate seen.
    pub fn operator_norm(&self, tol: f64) -> Result<f64> {
        if !(tol > 0.0) {
            return Err(Error::Domain(format!("operator_norm tolerance must be > 0, got {tol}")));
        }
        match self {
            LinearMap::Diagonal(w) => Ok(w.iter().fold(0.0_f64, |m, x| m.max(x.abs()))),
            LinearMap::Projector(q) => Ok(if q.ncols() == 0 { 0.0 } else { 1.0 }),
            LinearMap::ScaledIdentity { lambda, .. } => Ok(lambda.abs()),
            LinearMap::Zero { .. } => Ok(0.0),
            LinearMap::Dense(_) | LinearMap::Mixture { .. } => self.power_norm(tol),
        }
    }

    fn power_norm(&self, tol: f64) -> Result<f64> {
        let n = self.dim();
        if n == 0 {
            return Ok(0.0);
        }
        let mut best = 0.0_f64;
        let mut failed = None;
        for restart in 0..POWER_RESTARTS {
            let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED + restart);
            let mut v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            v /= v.norm();
            let mut est = 0.0_f64;
            let mut converged = false;
            let mut iters = 0;
            while iters < POWER_ITERATION_CAP {
                iters += 1;
                let av = self.apply(&v);
                let sigma = av.norm();
                if sigma == 0.0 {
                    // v landed in the kernel; restart from a fresh direction
                    // unless the map really is zero.
                    if self.to_dense_norm_is_zero() {
                        return Ok(0.0);
                    }
                    v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                    v /= v.norm();
                    continue;
                }
                let w = self.apply_transpose(&av);
                let nw = w.norm();
                let converged_now = (sigma - est).abs() <= tol * sigma;
                est = est.max(sigma);
                if converged_now {
                    converged = true;
                    break;
                }
                if nw == 0.0 {
                    converged = true;
                    break;
                }
                v = w / nw;
            }
            best = best.max(est);
            if !converged {
                failed = Some(iters);
            }
        }
        match failed {
            Some(iterations) => Err(Error::NormNotConverged {
                best_estimate: best,
                iterations,
            }),
            None => Ok(best),
        }
    }

    fn to_dense_norm_is_zero(&self) -> bool {
        match self {
            LinearMap::Dense(a) => a.iter().all(|&x| x == 0.0),
            _ => self.to_dense().iter().all(|&x| x == 0.0),
        }
    }

    fn all_finite(&self) -> bool {
        match self {
            LinearMap::Dense(a) => a.iter().all(|x| x.is_finite()),
            LinearMap::Diagonal(w) => w.iter().all(|x| x.is_finite()),
            LinearMap::Projector(q) => q.iter().all(|x| x.is_finite()),
            LinearMap::ScaledIdentity { lambda, .. } => lambda.is_finite(),
            LinearMap::Zero { .. } => true,
            LinearMap::Mixture { weights, .. } => weights.iter().all(|(_, w)| w.is_finite()),
        }
    }
}

/// The estimator `y -> A y + b`.
#[derive(Debug, Clone)]
pub struct AffineEstimator {
    pub linear: LinearMap,
    pub offset: DVector<f64>,
}

impl AffineEstimator {
    /// Builds an estimator after checking dimensions, finiteness and, for
    /// projector bases, orthonormality of the columns.
    pub fn new(linear: LinearMap, offset: DVector<f64>) -> Result<Self> {
        let n = linear.dim();
        if let LinearMap::Dense(a) = &linear {
            check_len("dense linear part (columns)", a.nrows(), a.ncols())?;
        }
        check_len("offset", n, offset.len())?;
        if !linear.all_finite() || offset.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("estimator has non-finite entries".into()));
        }
        if let LinearMap::Projector(q) = &linear {
            let gram = q.tr_mul(q);
            let d = q.ncols();
            let worst = (0..d)
                .flat_map(|i| (0..d).map(move |j| (i, j)))
                .map(|(i, j)| (gram[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs())
                .fold(0.0_f64, f64::max);
            if worst > PROJECTOR_ORTHONORMAL_TOL {
                return Err(Error::InvalidInput(format!(
                    "projector basis is not orthonormal (max |Q^T Q - I| = {worst:e})"
                )));
            }
        }
        Ok(AffineEstimator { linear, offset })
    }

    pub fn dense(a: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        Self::new(LinearMap::Dense(a), DVector::zeros(n))
    }

    pub fn diagonal(weights: DVector<f64>) -> Result<Self> {
        let n = weights.len();
        Self::new(LinearMap::Diagonal(weights), DVector::zeros(n))
    }

    pub fn projector(basis: DMatrix<f64>) -> Result<Self> {
        let n = basis.nrows();
        Self::new(LinearMap::Projector(basis), DVector::zeros(n))
    }

    pub fn scaled_identity(n: usize, lambda: f64) -> Result<Self> {
        Self::new(LinearMap::ScaledIdentity { n, lambda }, DVector::zeros(n))
    }

    pub fn zero(n: usize) -> Self {
        AffineEstimator {
            linear: LinearMap::Zero { n },
            offset: DVector::zeros(n),
        }
    }

    /// The constant estimator `y -> b`.
    pub fn constant(b: DVector<f64>) -> Result<Self> {
        let n = b.len();
        Self::new(LinearMap::Zero { n }, b)
    }

    pub fn with_offset(self, offset: DVector<f64>) -> Result<Self> {
        Self::new(self.linear, offset)
    }

    pub fn dim(&self) -> usize {
        self.linear.dim()
    }

    /// `A y + b`.
    pub fn apply(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("apply: observation", self.dim(), y.len())?;
        let mut out = self.linear.apply(y);
        out += &self.offset;
        Ok(out)
    }

    pub fn trace(&self) -> f64 {
        self.linear.trace()
    }

    pub fn operator_norm(&self, tol: f64) -> Result<f64> {
        self.linear.operator_norm(tol)
    }

    /// `||A||_op <= 1 + 1e-8`, the assumption of the sharp oracle inequalities.
    pub fn is_admissible(&self) -> Result<bool> {
        Ok(self.operator_norm(1e-10)? <= 1.0 + ADMISSIBLE_SLACK)
    }

    /// Convex mixture `sum_j w_j (A_j, b_j)` of `components`.
    ///
    /// Mixtures of scaled identities stay scaled identities and mixtures of
    /// diagonal-like maps stay diagonal; anything else becomes a lazy
    /// [`LinearMap::Mixture`].
    pub fn mixture(components: &Arc<[AffineEstimator]>, weights: &[f64]) -> Result<Self> {
        check_len("mixture weights", components.len(), weights.len())?;
        let n = components
            .first()
            .map(|c| c.dim())
            .ok_or_else(|| Error::InvalidInput("mixture of zero estimators".into()))?;
        let active: Vec<(usize, f64)> = weights
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, w)| w != 0.0)
            .collect();
        let mut offset = DVector::zeros(n);
        for &(j, w) in &active {
            offset.axpy(w, &components[j].offset, 1.0);
        }
        let all = |pred: fn(&LinearMap) -> bool| active.iter().all(|&(j, _)| pred(&components[j].linear));
        let linear = if active.is_empty() {
            LinearMap::Zero { n }
        } else if active.len() == 1 && active[0].1 == 1.0 {
            components[active[0].0].linear.clone()
        } else if all(|l| matches!(l, LinearMap::ScaledIdentity { .. } | LinearMap::Zero { .. })) {
            let lambda = active
                .iter()
                .map(|&(j, w)| match &components[j].linear {
                    LinearMap::ScaledIdentity { lambda, .. } => w * lambda,
                    _ => 0.0,
                })
                .sum();
            LinearMap::ScaledIdentity { n, lambda }
        } else if all(|l| {
            matches!(
                l,
                LinearMap::ScaledIdentity { .. } | LinearMap::Zero { .. } | LinearMap::Diagonal(_)
            )
        }) {
            let mut diag = DVector::zeros(n);
            for &(j, w) in &active {
                match &components[j].linear {
                    LinearMap::ScaledIdentity { lambda, .. } => diag.add_scalar_mut(w * lambda),
                    LinearMap::Diagonal(d) => diag.axpy(w, d, 1.0),
                    _ => {}
                }
            }
            LinearMap::Diagonal(diag)
        } else {
            LinearMap::Mixture {
                components: Arc::clone(components),
                weights: active,
            }
        };
        Self::new(linear, offset)
    }
}

/// `M >= 2` estimators evaluated on one observation vector, with the fits,
/// their Gram matrix and the traces of the linear parts cached.
#[derive(Debug, Clone)]
pub struct EstimatorBank {
    estimators: Arc<[AffineEstimator]>,
    y: DVector<f64>,
    fits: DMatrix<f64>,
    gram: DMatrix<f64>,
    traces: Vec<f64>,
    y_dot_fits: Vec<f64>,
    meta: Arc<BankMeta>,
}

/// Observation-independent facts about a bank, computed on first use and
/// shared by every bank built from the same estimators.
#[derive(Debug, Default)]
struct BankMeta {
    operator_norms: OnceLock<Vec<f64>>,
    all_projectors: OnceLock<bool>,
}

impl EstimatorBank {
    pub fn new(estimators: impl Into<Arc<[AffineEstimator]>>, y: DVector<f64>) -> Result<Self> {
        Self::with_meta(estimators.into(), y, Arc::default())
    }

    fn with_meta(estimators: Arc<[AffineEstimator]>, y: DVector<f64>, meta: Arc<BankMeta>) -> Result<Self> {
        let m = estimators.len();
        if m < 2 {
            return Err(Error::InvalidInput(format!(
                "an estimator bank needs at least 2 estimators, got {m}"
            )));
        }
        let n = y.len();
        for est in estimators.iter() {
            check_len("bank: estimator dimension", n, est.dim())?;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("observation has non-finite entries".into()));
        }
        let mut fits = DMatrix::zeros(n, m);
        for (j, est) in estimators.iter().enumerate() {
            fits.set_column(j, &est.apply(&y)?);
        }
        let mut gram = fits.tr_mul(&fits);
        for j in 0..m {
            for k in 0..j {
                gram[(j, k)] = gram[(k, j)];
            }
        }
        let traces = estimators.iter().map(|e| e.trace()).collect();
        let y_dot_fits = (0..m).map(|j| fits.column(j).dot(&y)).collect();
        Ok(EstimatorBank {
            estimators,
            y,
            fits,
            gram,
            traces,
            y_dot_fits,
            meta,
        })
    }

    /// Same estimators, new observation.
    pub fn with_observation(&self, y: DVector<f64>) -> Result<Self> {
        Self::with_meta(Arc::clone(&self.estimators), y, Arc::clone(&self.meta))
    }

    /// Operator norms of the linear parts, `NaN` where the power method did
    /// not settle.
    pub fn operator_norms(&self) -> &[f64] {
        self.meta.operator_norms.get_or_init(|| {
            self.estimators
                .iter()
                .map(|e| e.operator_norm(1e-10).unwrap_or(f64::NAN))
                .collect()
        })
    }

    /// Indices of estimators whose operator norm exceeds `1 + 1e-8` or could
    /// not be certified.
    pub fn inadmissible(&self) -> Vec<usize> {
        self.operator_norms()
            .iter()
            .enumerate()
            .filter(|(_, n)| !(**n <= 1.0 + ADMISSIBLE_SLACK))
            .map(|(j, _)| j)
            .collect()
    }

    pub fn all_projectors(&self) -> bool {
        *self
            .meta
            .all_projectors
            .get_or_init(|| self.estimators.iter().all(|e| e.linear.is_projector()))
    }

    pub fn len(&self) -> usize {
        self.estimators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimators.is_empty()
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn estimators(&self) -> &Arc<[AffineEstimator]> {
        &self.estimators
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// `n x M` matrix whose column `j` is `mu_j = A_j y + b_j`.
    pub fn fits(&self) -> &DMatrix<f64> {
        &self.fits
    }

    pub fn fit(&self, j: usize) -> DVector<f64> {
        self.fits.column(j).into_owned()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn traces(&self) -> &[f64] {
        &self.traces
    }

    /// `y^T mu_j` for every `j`.
    pub fn y_dot_fits(&self) -> &[f64] {
        &self.y_dot_fits
    }

    /// `mu_theta = sum_j theta_j mu_j`.
    pub fn mixture_fit(&self, theta: &[f64]) -> Result<DVector<f64>> {
        check_len("mixture_fit: weights", self.len(), theta.len())?;
        Ok(&self.fits * DVector::from_column_slice(theta))
    }

    /// `||mu_j - mu_k||^2` from the Gram matrix.
    pub fn pair_dist_sq(&self, j: usize, k: usize) -> f64 {
        (self.gram[(j, j)] + self.gram[(k, k)] - 2.0 * self.gram[(j, k)]).max(0.0)
    }
}

/// Outcome of [`make_projection`].
#[derive(Debug, Clone)]
pub struct Projection {
    pub estimator: AffineEstimator,
    /// Numerical rank of the selected columns.
    pub rank: usize,
    /// Set when the rank is smaller than the number of selected columns.
    pub rank_deficient: bool,
}

/// Orthoprojector onto the span of the columns `cols` of the `n x p` design.
///
/// Rank is decided by singular values above `1e-10` times the largest one; a
/// rank-deficient selection still yields the projector onto the actual span,
/// with [`Projection::rank_deficient`] set. An empty selection gives the zero
/// map.
pub fn make_projection(design: &DMatrix<f64>, cols: &[usize]) -> Result<Projection> {
    let n = design.nrows();
    if cols.is_empty() {
        return Ok(Projection {
            estimator: AffineEstimator::zero(n),
            rank: 0,
            rank_deficient: false,
        });
    }
    if let Some(&bad) = cols.iter().find(|&&c| c >= design.ncols()) {
        return Err(Error::InvalidInput(format!(
            "column index {bad} out of range for a design with {} columns",
            design.ncols()
        )));
    }
    let sub = design.select_columns(cols);
    let svd = sub.svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::InvalidInput("SVD failed to produce left singular vectors".into()))?;
    let smax = svd.singular_values.iter().fold(0.0_f64, |m, &s| m.max(s));
    let kept: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|&(_, &s)| smax > 0.0 && s > RANK_REL_TOL * smax)
        .map(|(i, _)| i)
        .collect();
    let rank = kept.len();
    let estimator = if rank == 0 {
        AffineEstimator::zero(n)
    } else {
        AffineEstimator::projector(u.select_columns(&kept))?
    };
    Ok(Projection {
        estimator,
        rank,
        rank_deficient: rank < cols.len(),
    })
}

/// Geometric smoothness grid `beta_j = (1 + 1/(log n log log n))^(j-1)` of
/// size `ceil(120 log n (log log n)^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessGrid {
    pub n: usize,
    pub betas: Vec<f64>,
}

impl SmoothnessGrid {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Grid ratio `1 + 1/(log n log log n)`.
    pub fn ratio(&self) -> f64 {
        smoothness_ratio(self.n)
    }
}

fn smoothness_ratio(n: usize) -> f64 {
    let ln = (n as f64).ln();
    1.0 + 1.0 / (ln * ln.ln())
}

/// Grid size `ceil(120 log n (log log n)^2)`.
pub fn smoothness_grid_size(n: usize) -> usize {
    let ln = (n as f64).ln();
    let lln = ln.ln();
    (120.0 * ln * lln * lln).ceil() as usize
}

pub fn smoothness_grid(n: usize) -> Result<SmoothnessGrid> {
    if n < 3 {
        return Err(Error::Domain(format!("smoothness grid needs n >= 3, got {n}")));
    }
    let m = smoothness_grid_size(n);
    let ratio = smoothness_ratio(n);
    let mut betas = Vec::with_capacity(m);
    let mut beta = 1.0;
    for _ in 0..m {
        betas.push(beta);
        beta *= ratio;
    }
    Ok(SmoothnessGrid { n, betas })
}

/// An ordered family of diagonal filters indexed by smoothness `beta`.
/// Implementations must return weights in `[0, 1]` so that `||A_beta||_op <= 1`.
pub trait FilterFamily: Sync {
    fn weights(&self, beta: f64, n: usize) -> DVector<f64>;
}

/// `l_i(beta) = max(0, 1 - (i / n^(1/(2 beta + 1)))^beta)` for `i = 1..n`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MonotoneFilter;

impl FilterFamily for MonotoneFilter {
    fn weights(&self, beta: f64, n: usize) -> DVector<f64> {
        let cutoff = (n as f64).powf(1.0 / (2.0 * beta + 1.0));
        DVector::from_fn(n, |i, _| (1.0 - ((i + 1) as f64 / cutoff).powf(beta)).max(0.0))
    }
}

/// Diagonal estimators `A_{beta_j}` for every grid point.
pub fn smoothness_bank(grid: &SmoothnessGrid, family: &dyn FilterFamily) -> Result<Vec<AffineEstimator>> {
    grid.betas
        .iter()
        .map(|&b| AffineEstimator::diagonal(family.weights(b, grid.n)))
        .collect()
}

/// Difference-based noise variance estimate
/// `(1 / (2n - 2)) sum_{i<n} (y_{i+1} - y_i)^2`.
pub fn difference_variance(y: &[f64]) -> Result<f64> {
    let n = y.len();
    if n < 2 {
        return Err(Error::Domain(format!(
            "difference variance needs at least 2 observations, got {n}"
        )));
    }
    let ss: f64 = y.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    Ok(ss / (2.0 * n as f64 - 2.0))
}

/// Random instances used by tests, benches and the CLI's random bank generator.
pub mod random {
    use super::*;

    pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
        DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    /// Dense map rescaled to a random operator norm in `(0, 1]`.
    pub fn admissible_dense<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
        let a = gaussian_matrix(rng, n, n);
        let norm = linalg::spectral_norm(&a);
        let target: f64 = rng.random_range(0.1..=1.0);
        a * (target / norm)
    }

    /// Orthonormal `n x rank` basis of a uniformly random subspace.
    pub fn orthonormal_basis<R: Rng + ?Sized>(rng: &mut R, n: usize, rank: usize) -> DMatrix<f64> {
        if rank == 0 {
            return DMatrix::zeros(n, 0);
        }
        let g = gaussian_matrix(rng, n, rank);
        g.qr().q()
    }

    /// A random admissible estimator of a randomly chosen representation.
    pub fn admissible_estimator<R: Rng + ?Sized>(rng: &mut R, n: usize, with_offset: bool) -> AffineEstimator {
        let linear = match rng.random_range(0..4) {
            0 => LinearMap::Dense(admissible_dense(rng, n)),
            1 => LinearMap::Diagonal(DVector::from_fn(n, |_, _| rng.random_range(0.0..=1.0))),
            2 => {
                let rank = rng.random_range(0..=n);
                LinearMap::Projector(orthonormal_basis(rng, n, rank))
            }
            _ => LinearMap::ScaledIdentity {
                n,
                lambda: rng.random_range(0.0..=1.0),
            },
        };
        let offset = if with_offset {
            gaussian_vector(rng, n, 1.0)
        } else {
            DVector::zeros(n)
        };
        AffineEstimator::new(linear, offset).expect("random estimator is valid")
    }
}
