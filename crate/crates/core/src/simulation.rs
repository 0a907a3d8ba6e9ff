//! Monte Carlo harness: seeded noise, independent trials of an aggregation
//! procedure, and empirical checks of tail bounds, expectation identities and
//! concentration inequalities.
//!
//! Trial `t` draws its noise from `ChaCha8Rng::seed_from_u64(base_seed + t)`;
//! Gaussian coordinates use the ziggurat sampler of `rand_distr`. Parallel
//! and sequential runs therefore produce identical records.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::criteria::{self, ObjectiveKind, ObjectiveSpec, SimplexPoint};
use crate::error::{check_len, Error, Result};
use crate::estimators::{difference_variance, AffineEstimator, EstimatorBank};
use crate::linalg;
use crate::par::{self, Execution};
use crate::procedures;
use crate::qp::SolveOptions;

pub const TRIALS_SCHEMA: &str = "affagg.trials/1";
pub const TAIL_SCHEMA: &str = "affagg.tail/1";
/// Two-sided 95% normal quantile used for Wilson bounds.
pub const WILSON_Z: f64 = 1.959964;
pub const MIN_TAIL_RECORDS: usize = 100;
pub const MIN_CHAOS_TRIALS: usize = 10_000;
/// Multiple of the solver tolerance allowed on the per-trial bound.
pub const ROLE_TOL_FACTOR: f64 = 10.0;
/// Weight of `sigma^2 log(1/pi_j)` in the prior-weighted oracle.
pub const PRIOR_ORACLE_FACTOR: f64 = 2.0 * criteria::V_PEN_ENTROPY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Rademacher,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    /// Standard deviation of each coordinate.
    pub sigma: f64,
    /// `sigma_bar` (or `K`) used by subgaussian bound formulas.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgaussian_bound: Option<f64>,
}

impl NoiseModel {
    pub fn new(kind: NoiseKind, sigma: f64) -> Result<Self> {
        let model = NoiseModel {
            kind,
            sigma,
            subgaussian_bound: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::new(NoiseKind::Gaussian, sigma)
    }

    pub fn with_subgaussian_bound(mut self, bound: f64) -> Result<Self> {
        self.subgaussian_bound = Some(bound);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Domain(format!("noise sigma must be finite and > 0, got {}", self.sigma)));
        }
        if let Some(b) = self.subgaussian_bound {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::Domain(format!("subgaussian bound must be finite and > 0, got {b}")));
            }
        }
        Ok(())
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }

    /// The configured bound, or the coordinate-wise Hoeffding value: `sigma`
    /// for Gaussian and Rademacher noise, the half-width `sigma sqrt(3)` for
    /// uniform noise.
    pub fn sigma_bar(&self) -> f64 {
        self.subgaussian_bound.unwrap_or(match self.kind {
            NoiseKind::Gaussian | NoiseKind::Rademacher => self.sigma,
            NoiseKind::Uniform => self.sigma * 3f64.sqrt(),
        })
    }
}

pub fn gen_noise(model: &NoiseModel, n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = model.sigma;
    match model.kind {
        NoiseKind::Gaussian => DVector::from_iterator(n, (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal))),
        NoiseKind::Rademacher => DVector::from_iterator(n, (0..n).map(|_| if rng.random::<bool>() { s } else { -s })),
        NoiseKind::Uniform => {
            let a = s * 3f64.sqrt();
            DVector::from_iterator(n, (0..n).map(|_| rng.random_range(-a..a)))
        }
    }
}

fn trial_seed(base_seed: u64, t: usize) -> u64 {
    base_seed.wrapping_add(t as u64)
}

/// How the plug-in variance of `W_pen` is obtained on each trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum VarianceEstimate {
    Value { sigma2_hat: f64 },
    /// `sigma2_hat = ratio * sigma^2`.
    Ratio { ratio: f64 },
    /// [`difference_variance`] of the observation.
    Difference,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectivePlan {
    Fixed(ObjectiveSpec),
    PluginVariance(VarianceEstimate),
}

impl ObjectivePlan {
    pub fn kind(&self) -> ObjectiveKind {
        match self {
            ObjectivePlan::Fixed(s) => s.kind(),
            ObjectivePlan::PluginVariance(_) => ObjectiveKind::WPen,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialSetup {
    bank: EstimatorBank,
    pub truth: DVector<f64>,
    pub noise: NoiseModel,
    pub plan: ObjectivePlan,
}

impl TrialSetup {
    pub fn new(
        estimators: impl Into<Arc<[AffineEstimator]>>,
        truth: DVector<f64>,
        noise: NoiseModel,
        plan: ObjectivePlan,
    ) -> Result<Self> {
        noise.validate()?;
        let bank = EstimatorBank::new(estimators, truth.clone())?;
        Ok(TrialSetup {
            bank,
            truth,
            noise,
            plan,
        })
    }

    /// Setup for plain Q-aggregation with the true noise variance.
    pub fn q_aggregation(
        estimators: impl Into<Arc<[AffineEstimator]>>,
        truth: DVector<f64>,
        noise: NoiseModel,
    ) -> Result<Self> {
        let sigma2 = noise.variance();
        Self::new(estimators, truth, noise, ObjectivePlan::Fixed(ObjectiveSpec::HPen { sigma2 }))
    }

    pub fn estimators(&self) -> &Arc<[AffineEstimator]> {
        self.bank.estimators()
    }

    pub fn n(&self) -> usize {
        self.bank.n()
    }

    pub fn num_estimators(&self) -> usize {
        self.bank.len()
    }

    /// Noise-free risks `||A_j f + b_j - f||^2`.
    pub fn bias_risks(&self) -> Vec<f64> {
        (0..self.bank.len())
            .map(|j| linalg::dist_sq(&self.bank.fit(j), &self.truth))
            .collect()
    }

    fn resolve_spec(&self, y: &DVector<f64>) -> Result<(ObjectiveSpec, f64)> {
        Ok(match &self.plan {
            ObjectivePlan::Fixed(spec) => (spec.clone(), f64::NAN),
            ObjectivePlan::PluginVariance(est) => {
                let s2 = match *est {
                    VarianceEstimate::Value { sigma2_hat } => sigma2_hat,
                    VarianceEstimate::Ratio { ratio } => ratio * self.noise.variance(),
                    VarianceEstimate::Difference => difference_variance(y.as_slice())?,
                };
                (ObjectiveSpec::WPen { sigma2_hat: s2 }, s2)
            }
        })
    }

    /// Runs one trial with noise drawn from `seed`.
    pub fn run_one(&self, trial: usize, seed: u64, options: &SolveOptions) -> TrialRecord {
        let xi = gen_noise(&self.noise, self.n(), seed);
        let mut rec = TrialRecord::blank(trial, seed);
        if let Err(e) = self.fill(&mut rec, &xi, options) {
            rec.error = Some(e.to_string());
        }
        rec
    }

    fn fill(&self, rec: &mut TrialRecord, xi: &DVector<f64>, options: &SolveOptions) -> Result<()> {
        let y = &self.truth + xi;
        let bank = self.bank.with_observation(y.clone())?;
        let (spec, s2) = self.resolve_spec(&y)?;
        rec.sigma2_hat = s2;
        let out = procedures::aggregate(&bank, &spec, options)?;
        let problem = criteria::qp_reduce(&bank, &spec)?;
        let (tol, _) = options.resolve(&problem);
        rec.aggregate_risk = linalg::dist_sq(&out.fitted, &self.truth);
        rec.kkt_residual = out.solve.kkt_residual;
        rec.solver_tol = tol;
        rec.objective = out.solve.objective;
        if spec.has_penalty() {
            let rb = criteria::role_bound(&bank, &spec, &self.truth, xi)?;
            rec.oracle_risk = rb.oracle_risk;
            rec.oracle_index = rb.oracle_index;
            rec.role_bound = rb.bound();
            rec.role_slack = rb.bound() + ROLE_TOL_FACTOR * tol - rec.aggregate_risk;
            if let ObjectiveSpec::VPen { sigma2, prior } = &spec {
                let best = (0..bank.len())
                    .map(|j| linalg::dist_sq(&bank.fit(j), &self.truth) + PRIOR_ORACLE_FACTOR * sigma2 * -prior.weights()[j].ln())
                    .fold(f64::INFINITY, f64::min);
                rec.prior_excess = rec.aggregate_risk - best;
            }
        } else {
            let (j, r) = (0..bank.len())
                .map(|j| linalg::dist_sq(&bank.fit(j), &self.truth))
                .enumerate()
                .fold((0, f64::INFINITY), |a, (j, r)| if r < a.1 { (j, r) } else { a });
            rec.oracle_risk = r;
            rec.oracle_index = j;
        }
        rec.excess_risk = rec.aggregate_risk - rec.oracle_risk;
        Ok(())
    }
}

/// One Monte Carlo trial. Numeric fields are NaN when they do not apply or
/// when the trial failed; `error` then holds the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub aggregate_risk: f64,
    pub oracle_risk: f64,
    pub excess_risk: f64,
    pub oracle_index: usize,
    pub role_bound: f64,
    /// `role_bound + 10 tol - aggregate_risk`; negative means a violation.
    pub role_slack: f64,
    pub kkt_residual: f64,
    pub solver_tol: f64,
    pub objective: f64,
    pub sigma2_hat: f64,
    /// `aggregate_risk - min_j (||mu_j - f||^2 + 92 sigma^2 log(1/pi_j))`
    /// for prior-weighted aggregation.
    pub prior_excess: f64,
    pub error: Option<String>,
}

impl TrialRecord {
    fn blank(trial: usize, seed: u64) -> Self {
        TrialRecord {
            trial,
            seed,
            aggregate_risk: f64::NAN,
            oracle_risk: f64::NAN,
            excess_risk: f64::NAN,
            oracle_index: 0,
            role_bound: f64::NAN,
            role_slack: f64::NAN,
            kkt_residual: f64::NAN,
            solver_tol: f64::NAN,
            objective: f64::NAN,
            sigma2_hat: f64::NAN,
            prior_excess: f64::NAN,
            error: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    /// Whether the per-trial bound holds; `None` when it was not computed.
    pub fn role_holds(&self) -> Option<bool> {
        if !self.is_ok() || self.role_slack.is_nan() {
            None
        } else {
            Some(self.role_slack >= 0.0)
        }
    }
}

pub fn run_trials(
    setup: &TrialSetup,
    trials: usize,
    base_seed: u64,
    exec: Execution,
    options: &SolveOptions,
) -> Vec<TrialRecord> {
    par::map_indexed(exec, trials, |t| setup.run_one(t, trial_seed(base_seed, t), options))
}

pub fn excess_risks(records: &[TrialRecord]) -> Vec<f64> {
    records.iter().map(|r| r.excess_risk).collect()
}

/// Upper end of the Wilson score interval for `successes` out of `n`.
pub fn wilson_upper(successes: usize, n: usize, z: f64) -> f64 {
    if n == 0 || successes >= n {
        return 1.0;
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let centre = p + z2 / (2.0 * nf);
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((centre + half) / (1.0 + z2 / nf)).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailLevel {
    pub x: f64,
    pub bound: f64,
    pub exceedances: usize,
    pub trials: usize,
    pub empirical_exceed: f64,
    pub theoretical: f64,
    pub wilson_upper: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailCheckReport {
    pub levels: Vec<TailLevel>,
}

impl TailCheckReport {
    pub fn pass(&self) -> bool {
        self.levels.iter().all(|l| l.pass)
    }
}

/// Compares the exceedance frequency of `bound(x)` by `samples` with
/// `tail_prob(x)` through the Wilson 95% upper bound. NaN samples (failed
/// trials) count as exceedances. A level passes when
/// `wilson_upper <= tail_prob(x) (1 + slack)`.
pub fn tail_check(
    samples: &[f64],
    bound: impl Fn(f64) -> f64,
    x_levels: &[f64],
    tail_prob: impl Fn(f64) -> f64,
    slack: f64,
) -> Result<TailCheckReport> {
    if samples.len() < MIN_TAIL_RECORDS {
        return Err(Error::InvalidInput(format!(
            "tail check needs at least {MIN_TAIL_RECORDS} samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len();
    let levels = x_levels
        .iter()
        .map(|&x| {
            let b = bound(x);
            let k = samples.iter().filter(|&&v| !(v <= b)).count();
            let theoretical = tail_prob(x);
            let wu = wilson_upper(k, n, WILSON_Z);
            TailLevel {
                x,
                bound: b,
                exceedances: k,
                trials: n,
                empirical_exceed: k as f64 / n as f64,
                theoretical,
                wilson_upper: wu,
                pass: wu <= theoretical * (1.0 + slack),
            }
        })
        .collect();
    Ok(TailCheckReport { levels })
}

/// Mean, spread and order statistics of the finite entries of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub non_finite: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub std_err: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        let count = v.len();
        let non_finite = values.len() - count;
        if count == 0 {
            return Summary {
                count,
                non_finite,
                mean: f64::NAN,
                std_dev: f64::NAN,
                std_err: f64::NAN,
                median: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
            };
        }
        let mean = v.iter().sum::<f64>() / count as f64;
        let var = if count > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64
        } else {
            0.0
        };
        v.sort_by(f64::total_cmp);
        let median = if count % 2 == 1 {
            v[count / 2]
        } else {
            0.5 * (v[count / 2 - 1] + v[count / 2])
        };
        Summary {
            count,
            non_finite,
            mean,
            std_dev: var.sqrt(),
            std_err: (var / count as f64).sqrt(),
            median,
            min: v[0],
            max: v[count - 1],
        }
    }

    /// One-sided upper confidence bound `mean + z * std_err`.
    pub fn mean_upper(&self, z: f64) -> f64 {
        self.mean + z * self.std_err
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub trials: usize,
    pub mean: f64,
    pub std_err: f64,
    pub closed_form: f64,
    pub z: f64,
}

impl IdentityReport {
    pub fn pass(&self, max_abs_z: f64) -> bool {
        self.z.abs() <= max_abs_z
    }
}

fn z_score(mean: f64, std_err: f64, target: f64) -> f64 {
    let gap = mean - target;
    let scale = 1e-12 * (1.0 + target.abs());
    if gap.abs() <= scale {
        0.0
    } else if std_err > 0.0 {
        gap / std_err
    } else {
        f64::INFINITY.copysign(gap)
    }
}

/// Monte Carlo mean of `||mu_j - mu_k||^2 / 2` against
/// `||(A_j - A_k) f + b_j - b_k||^2 / 2 + sigma^2 ||A_j - A_k||_F^2 / 2`.
pub fn expectation_identity_check(
    est_j: &AffineEstimator,
    est_k: &AffineEstimator,
    f: &DVector<f64>,
    model: &NoiseModel,
    trials: usize,
    base_seed: u64,
    exec: Execution,
) -> Result<IdentityReport> {
    model.validate()?;
    let n = f.len();
    check_len("identity check: estimator j", n, est_j.dim())?;
    check_len("identity check: estimator k", n, est_k.dim())?;
    if trials < 2 {
        return Err(Error::InvalidInput(format!("identity check needs at least 2 trials, got {trials}")));
    }
    let diff = est_j.linear.to_dense() - est_k.linear.to_dense();
    let mean_gap = &diff * f + &est_j.offset - &est_k.offset;
    let closed_form = 0.5 * mean_gap.norm_squared() + 0.5 * model.variance() * linalg::frobenius_sq(&diff);
    let values = par::map_indexed(exec, trials, |t| {
        let xi = gen_noise(model, n, trial_seed(base_seed, t));
        0.5 * (&mean_gap + &diff * xi).norm_squared()
    });
    let s = Summary::of(&values);
    Ok(IdentityReport {
        trials,
        mean: s.mean,
        std_err: s.std_err,
        closed_form,
        z: z_score(s.mean, s.std_err, closed_form),
    })
}

/// Deviation inequality used for a quadratic form `xi^T B xi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum ChaosForm {
    /// `xi^T B xi - sigma^2 Tr B > 2 sigma^2 ||B||_F sqrt(x) + 2 sigma^2 ||B||_op x`.
    Gaussian,
    /// `xi^T B xi - sigma^2 Tr B > 2 sigma sigma_bar ||B||_F sqrt(x) + 2 sigma_bar^2 ||B||_op x`.
    Hanson { sigma_bar: f64 },
    /// `xi^T B xi > K^2 (||B||_* + 2 ||B||_F sqrt(x) + 2 ||B||_op x)`.
    Hsu { k: f64 },
}

impl ChaosForm {
    /// Gaussian form for Gaussian noise, otherwise the Hanson form with
    /// `sigma_bar = 2 sigma` unless the model configures its own bound.
    pub fn default_for(model: &NoiseModel) -> ChaosForm {
        match (model.kind, model.subgaussian_bound) {
            (NoiseKind::Gaussian, _) => ChaosForm::Gaussian,
            (_, Some(b)) => ChaosForm::Hanson { sigma_bar: b },
            (_, None) => ChaosForm::Hanson {
                sigma_bar: 2.0 * model.sigma,
            },
        }
    }
}

/// Norms of a matrix used by the chaos bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
struct MatrixNorms {
    trace: f64,
    frobenius: f64,
    operator: f64,
    nuclear: f64,
}

impl MatrixNorms {
    fn of(b: &DMatrix<f64>) -> Self {
        let sv = linalg::singular_values(b);
        MatrixNorms {
            trace: b.trace(),
            frobenius: linalg::frobenius_sq(b).sqrt(),
            operator: sv.first().copied().unwrap_or(0.0),
            nuclear: sv.iter().sum(),
        }
    }
}

pub fn chaos_tail_check(
    b: &DMatrix<f64>,
    model: &NoiseModel,
    form: ChaosForm,
    trials: usize,
    base_seed: u64,
    x_levels: &[f64],
    exec: Execution,
) -> Result<TailCheckReport> {
    model.validate()?;
    if !b.is_square() {
        return Err(Error::DimensionMismatch {
            context: "chaos check: matrix columns",
            expected: b.nrows(),
            actual: b.ncols(),
        });
    }
    if trials < MIN_CHAOS_TRIALS {
        return Err(Error::InvalidInput(format!(
            "chaos check needs at least {MIN_CHAOS_TRIALS} trials, got {trials}"
        )));
    }
    let norms = MatrixNorms::of(b);
    let s2 = model.variance();
    let sigma = model.sigma;
    let centre = match form {
        ChaosForm::Hsu { .. } => 0.0,
        _ => s2 * norms.trace,
    };
    let stats = par::map_indexed(exec, trials, |t| {
        let xi = gen_noise(model, b.nrows(), trial_seed(base_seed, t));
        xi.dot(&(b * &xi)) - centre
    });
    let bound = |x: f64| match form {
        ChaosForm::Gaussian => 2.0 * s2 * norms.frobenius * x.sqrt() + 2.0 * s2 * norms.operator * x,
        ChaosForm::Hanson { sigma_bar } => {
            2.0 * sigma * sigma_bar * norms.frobenius * x.sqrt() + 2.0 * sigma_bar * sigma_bar * norms.operator * x
        }
        ChaosForm::Hsu { k } => k * k * (norms.nuclear + 2.0 * norms.frobenius * x.sqrt() + 2.0 * norms.operator * x),
    };
    tail_check(&stats, bound, x_levels, |x| (-x).exp(), 0.0)
}

/// `P(v^T xi > sigma_bar ||v|| sqrt(2x)) <= exp(-x)`.
pub fn linear_tail_check(
    v: &DVector<f64>,
    model: &NoiseModel,
    trials: usize,
    base_seed: u64,
    x_levels: &[f64],
    exec: Execution,
) -> Result<TailCheckReport> {
    model.validate()?;
    let sb = model.sigma_bar();
    let vn = v.norm();
    let stats = par::map_indexed(exec, trials, |t| {
        v.dot(&gen_noise(model, v.len(), trial_seed(base_seed, t)))
    });
    tail_check(&stats, |x| sb * vn * (2.0 * x).sqrt(), x_levels, |x| (-x).exp(), 0.0)
}

fn random_simplex_point(rng: &mut ChaCha8Rng, m: usize) -> SimplexPoint {
    let w: Vec<f64> = (0..m).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = w.iter().sum();
    SimplexPoint::renormalized(w.into_iter().map(|x| x / s).collect())
}

/// Largest relative residual of the exact second-order expansion
/// `F(theta) = F(theta0) + grad F(theta0)^T (theta - theta0) + c ||mu_theta - mu_theta0||^2`
/// over random pairs, with `c = 1/2` for penalized objectives and `c = 1`
/// for Cp. `F` is evaluated from the Gram matrix and the gradient from the
/// QP reduction.
pub fn strong_convexity_probe(spec: &ObjectiveSpec, bank: &EstimatorBank, trials: usize, seed: u64) -> Result<f64> {
    let problem = criteria::qp_reduce(bank, spec)?;
    let c = if spec.has_penalty() { 0.5 } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = bank.len();
    let mut worst = 0.0_f64;
    for t in 0..trials {
        let (theta, theta0) = match t {
            0 => {
                let p = random_simplex_point(&mut rng, m);
                (p.clone(), p)
            }
            1 => (SimplexPoint::vertex(m, 0), SimplexPoint::vertex(m, m - 1)),
            _ => (random_simplex_point(&mut rng, m), random_simplex_point(&mut rng, m)),
        };
        let f = criteria::evaluate(bank, spec, &theta)?;
        let f0 = criteria::evaluate(bank, spec, &theta0)?;
        let grad = problem.gradient(theta0.weights());
        let step: f64 = theta.weights().iter().zip(theta0.weights()).zip(grad.iter()).map(|((a, b), g)| (a - b) * g).sum();
        let gap = linalg::dist_sq(&bank.mixture_fit(theta.weights())?, &bank.mixture_fit(theta0.weights())?);
        let residual = f - f0 - step - c * gap;
        let scale = 1.0 + f.abs() + f0.abs() + step.abs() + c * gap;
        worst = worst.max(residual.abs() / scale);
    }
    Ok(worst)
}

pub fn write_trials_csv<W: Write>(records: &[TrialRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials_csv<R: std::io::Read>(input: R) -> Result<Vec<TrialRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub check: String,
    pub x: f64,
    pub bound: f64,
    pub exceedances: usize,
    pub trials: usize,
    pub empirical_exceed: f64,
    pub theoretical: f64,
    pub wilson_upper: f64,
    pub pass: bool,
}

pub fn tail_rows(check: &str, report: &TailCheckReport) -> Vec<TailRow> {
    report
        .levels
        .iter()
        .map(|l| TailRow {
            check: check.to_string(),
            x: l.x,
            bound: l.bound,
            exceedances: l.exceedances,
            trials: l.trials,
            empirical_exceed: l.empirical_exceed,
            theoretical: l.theoretical,
            wilson_upper: l.wilson_upper,
            pass: l.pass,
        })
        .collect()
}

pub fn write_tail_csv<W: Write>(rows: &[TailRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::random;
    use proptest::prelude::*;

    fn gauss() -> NoiseModel {
        NoiseModel::gaussian(1.0).unwrap()
    }

    #[test]
    fn noise_is_deterministic() {
        for kind in [NoiseKind::Gaussian, NoiseKind::Rademacher, NoiseKind::Uniform] {
            let m = NoiseModel::new(kind, 0.7).unwrap();
            assert_eq!(gen_noise(&m, 50, 9), gen_noise(&m, 50, 9));
            assert_ne!(gen_noise(&m, 50, 9), gen_noise(&m, 50, 10));
        }
    }

    #[test]
    fn rademacher_takes_two_values() {
        let m = NoiseModel::new(NoiseKind::Rademacher, 0.3).unwrap();
        let v = gen_noise(&m, 1000, 1);
        assert!(v.iter().all(|&x| x == 0.3 || x == -0.3));
        assert!(v.iter().any(|&x| x > 0.0) && v.iter().any(|&x| x < 0.0));
    }

    #[test]
    fn noise_variance_matches_sigma() {
        for kind in [NoiseKind::Gaussian, NoiseKind::Uniform] {
            let m = NoiseModel::new(kind, 1.7).unwrap();
            let v = gen_noise(&m, 1_000_000, 2);
            let mean = v.mean();
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            assert!((var / m.variance() - 1.0).abs() < 0.01, "{kind:?}: {var}");
        }
        let u = NoiseModel::new(NoiseKind::Uniform, 1.0).unwrap();
        let a = 3f64.sqrt();
        assert!(gen_noise(&u, 10_000, 3).iter().all(|x| x.abs() <= a));
    }

    #[test]
    fn invalid_noise_rejected() {
        assert!(NoiseModel::gaussian(0.0).is_err());
        assert!(NoiseModel::gaussian(f64::NAN).is_err());
        assert!(gauss().with_subgaussian_bound(-1.0).is_err());
        assert_eq!(NoiseModel::new(NoiseKind::Uniform, 2.0).unwrap().sigma_bar(), 2.0 * 3f64.sqrt());
    }

    fn small_setup(seed: u64) -> TrialSetup {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ests: Vec<_> = (0..4).map(|_| random::admissible_estimator(&mut rng, 10, true)).collect();
        let f = random::gaussian_vector(&mut rng, 10, 2.0);
        TrialSetup::q_aggregation(ests, f, gauss()).unwrap()
    }

    #[test]
    fn zero_trials_is_empty() {
        let s = small_setup(1);
        assert!(run_trials(&s, 0, 5, Execution::Sequential, &SolveOptions::default()).is_empty());
    }

    #[test]
    fn replay_and_parallel_match_sequential() {
        let s = small_setup(2);
        let opts = SolveOptions::default();
        let a = run_trials(&s, 40, 77, Execution::Sequential, &opts);
        let b = run_trials(&s, 40, 77, Execution::Parallel, &opts);
        let c = run_trials(&s, 40, 77, Execution::Sequential, &opts);
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        assert_eq!(format!("{a:?}"), format!("{c:?}"));
        assert!(a.iter().all(|r| r.is_ok() && r.role_holds() == Some(true)));
        assert_eq!(a[3].seed, 80);
    }

    #[test]
    fn identical_estimators_have_no_excess() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random::admissible_estimator(&mut rng, 8, true);
        let f = random::gaussian_vector(&mut rng, 8, 1.0);
        let s = TrialSetup::q_aggregation(vec![e.clone(), e.clone(), e], f, gauss()).unwrap();
        for r in run_trials(&s, 30, 0, Execution::Parallel, &SolveOptions::default()) {
            assert!(r.excess_risk.abs() <= 10.0 * r.solver_tol, "{}", r.excess_risk);
        }
    }

    #[test]
    fn equal_trace_bank_ignores_sigma() {
        let x = DMatrix::<f64>::identity(12, 12);
        let ests = procedures::kregressor_estimators(&x, 1, 1000, Execution::Sequential).unwrap();
        let mut f = DVector::zeros(12);
        f[2] = 3.0;
        let mk = |s2: f64| {
            TrialSetup::new(ests.clone(), f.clone(), gauss(), ObjectivePlan::Fixed(ObjectiveSpec::HPen { sigma2: s2 }))
                .unwrap()
        };
        let opts = SolveOptions::default();
        let a = run_trials(&mk(1.0), 20, 4, Execution::Sequential, &opts);
        let b = run_trials(&mk(5.0), 20, 4, Execution::Sequential, &opts);
        for (ra, rb) in a.iter().zip(&b) {
            assert!((ra.excess_risk - rb.excess_risk).abs() < 1e-6 * (1.0 + ra.aggregate_risk));
        }
    }

    #[test]
    fn plugin_variance_records_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ests: Vec<_> = (1..=3)
            .map(|r| AffineEstimator::projector(random::orthonormal_basis(&mut rng, 10, r)).unwrap())
            .collect();
        let f = random::gaussian_vector(&mut rng, 10, 1.0);
        let opts = SolveOptions::default();
        let ratio = TrialSetup::new(
            ests.clone(),
            f.clone(),
            gauss(),
            ObjectivePlan::PluginVariance(VarianceEstimate::Ratio { ratio: 1.1 }),
        )
        .unwrap();
        let r = &run_trials(&ratio, 1, 0, Execution::Sequential, &opts)[0];
        assert_eq!(r.sigma2_hat, 1.1);
        let diff = TrialSetup::new(ests, f, gauss(), ObjectivePlan::PluginVariance(VarianceEstimate::Difference)).unwrap();
        let r = &run_trials(&diff, 1, 0, Execution::Sequential, &opts)[0];
        let y = &diff.truth + gen_noise(&diff.noise, 10, 0);
        assert_eq!(r.sigma2_hat, difference_variance(y.as_slice()).unwrap());
    }

    #[test]
    fn uniform_prior_excess_shifts_by_log_m() {
        let mut s = small_setup(10);
        s.plan = ObjectivePlan::Fixed(ObjectiveSpec::VPen {
            sigma2: 1.0,
            prior: criteria::Prior::uniform(4),
        });
        for r in run_trials(&s, 5, 0, Execution::Sequential, &SolveOptions::default()) {
            let want = r.excess_risk - PRIOR_ORACLE_FACTOR * 4f64.ln();
            assert!((r.prior_excess - want).abs() < 1e-9 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn cp_trials_skip_role_bound() {
        let mut s = small_setup(6);
        s.plan = ObjectivePlan::Fixed(ObjectiveSpec::Cp { sigma2: 1.0 });
        let r = &run_trials(&s, 1, 0, Execution::Sequential, &SolveOptions::default())[0];
        assert!(r.is_ok());
        assert!(r.role_bound.is_nan());
        assert_eq!(r.role_holds(), None);
    }

    #[test]
    fn failed_trials_are_recorded() {
        let mut s = small_setup(7);
        s.plan = ObjectivePlan::PluginVariance(VarianceEstimate::Value { sigma2_hat: -1.0 });
        let recs = run_trials(&s, 3, 0, Execution::Sequential, &SolveOptions::default());
        assert!(recs.iter().all(|r| r.error.is_some() && r.excess_risk.is_nan()));
        let values: Vec<f64> = (0..200).map(|i| if i < 3 { f64::NAN } else { 0.0 }).collect();
        let rep = tail_check(&values, |_| 1.0, &[1.0], |_| 1.0, 0.0).unwrap();
        assert_eq!(rep.levels[0].exceedances, 3);
    }

    #[test]
    fn tail_check_extremes() {
        let v = vec![1.0; 200];
        let pass = tail_check(&v, |_| f64::INFINITY, &[1.0, 2.0], |x| 2.0 * (-x).exp(), 0.0).unwrap();
        assert!(pass.pass());
        assert!(pass.levels.iter().all(|l| l.exceedances == 0));
        let fail = tail_check(&v, |_| f64::NEG_INFINITY, &[1.0], |x| 2.0 * (-x).exp(), 0.0).unwrap();
        assert_eq!(fail.levels[0].empirical_exceed, 1.0);
        assert!(!fail.pass());
        assert!(tail_check(&v[..99], |_| 0.0, &[1.0], |_| 1.0, 0.0).is_err());
    }

    #[test]
    fn wilson_reference_values() {
        assert!((wilson_upper(0, 100, WILSON_Z) - 0.036994).abs() < 1e-5);
        assert!((wilson_upper(5, 100, WILSON_Z) - 0.111752).abs() < 1e-5);
        assert_eq!(wilson_upper(10, 10, WILSON_Z), 1.0);
    }

    proptest! {
        #[test]
        fn wilson_monotone_in_trials(k in 0usize..50, extra in 0usize..200, c in 2usize..20) {
            let n = k + extra + 1;
            prop_assert!(wilson_upper(c * k, c * n, WILSON_Z) <= wilson_upper(k, n, WILSON_Z) + 1e-15);
            prop_assert!(wilson_upper(k, n, WILSON_Z) >= k as f64 / n as f64);
        }

        #[test]
        fn probe_is_exact(seed in any::<u64>(), m in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ests: Vec<_> = (0..m).map(|_| random::admissible_estimator(&mut rng, 7, true)).collect();
            let bank = EstimatorBank::new(ests, random::gaussian_vector(&mut rng, 7, 1.0)).unwrap();
            for spec in [ObjectiveSpec::HPen { sigma2: 0.8 }, ObjectiveSpec::Cp { sigma2: 0.8 }] {
                prop_assert!(strong_convexity_probe(&spec, &bank, 50, seed).unwrap() <= 1e-9);
            }
        }
    }

    #[test]
    fn identity_check_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = random::admissible_estimator(&mut rng, 6, true);
        let f = random::gaussian_vector(&mut rng, 6, 1.0);
        let same = expectation_identity_check(&e, &e, &f, &gauss(), 100, 0, Execution::Sequential).unwrap();
        assert_eq!((same.mean, same.closed_form, same.z), (0.0, 0.0, 0.0));

        let n = 20;
        let m = NoiseModel::gaussian(1.5).unwrap();
        let i = AffineEstimator::scaled_identity(n, 1.0).unwrap();
        let z = AffineEstimator::zero(n);
        let rep = expectation_identity_check(&i, &z, &DVector::zeros(n), &m, 20_000, 1, Execution::Parallel).unwrap();
        assert!((rep.closed_form - 0.5 * 2.25 * n as f64).abs() < 1e-12);
        assert!(rep.pass(4.0), "z = {}", rep.z);
    }

    #[test]
    fn chaos_and_linear_cases() {
        let x = [1.0, 2.0];
        let zero = chaos_tail_check(&DMatrix::zeros(5, 5), &gauss(), ChaosForm::Gaussian, 10_000, 0, &x, Execution::Parallel).unwrap();
        assert!(zero.pass() && zero.levels.iter().all(|l| l.exceedances == 0));
        let id = chaos_tail_check(&DMatrix::identity(10, 10), &gauss(), ChaosForm::Gaussian, 20_000, 1, &[1.0], Execution::Parallel).unwrap();
        assert!(id.pass());
        assert!(chaos_tail_check(&DMatrix::identity(3, 3), &gauss(), ChaosForm::Gaussian, 10, 0, &x, Execution::Parallel).is_err());

        let lin0 = linear_tail_check(&DVector::zeros(4), &gauss(), 1000, 0, &x, Execution::Parallel).unwrap();
        assert!(lin0.levels.iter().all(|l| l.exceedances == 0));
        let mut e1 = DVector::zeros(4);
        e1[0] = 1.0;
        assert!(linear_tail_check(&e1, &gauss(), 20_000, 2, &[2.0], Execution::Parallel).unwrap().pass());
        let rad = NoiseModel::new(NoiseKind::Rademacher, 1.0).unwrap();
        let v = DVector::from_element(9, 1.0);
        assert!(linear_tail_check(&v, &rad, 20_000, 3, &x, Execution::Parallel).unwrap().pass());
        assert_eq!(ChaosForm::default_for(&rad), ChaosForm::Hanson { sigma_bar: 2.0 });
    }

    #[test]
    fn csv_round_trip() {
        let s = small_setup(9);
        let recs = run_trials(&s, 5, 3, Execution::Sequential, &SolveOptions::default());
        let mut buf = Vec::new();
        write_trials_csv(&recs, &mut buf).unwrap();
        let back = read_trials_csv(buf.as_slice()).unwrap();
        assert_eq!(format!("{back:?}"), format!("{recs:?}"));
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("trial,seed,aggregate_risk"));
    }
}
