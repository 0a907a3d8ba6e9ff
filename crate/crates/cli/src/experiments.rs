use std::f64::consts::E;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use affagg::criteria::{self, ObjectiveSpec, QpProblem, SimplexPoint};
use affagg::estimators::{make_projection, random, AffineEstimator, EstimatorBank};
use affagg::linalg;
use affagg::par::Execution;
use affagg::procedures::{self, SparsitySpec};
use affagg::qp::{self, SolveOptions};
use affagg::simulation::{
    self, chaos_tail_check, expectation_identity_check, gen_noise, linear_tail_check, tail_check, tail_rows,
    ChaosForm, NoiseKind, ObjectivePlan, Summary, TailCheckReport, TailRow, TrialRecord, TrialSetup, WILSON_Z,
};
use anyhow::{bail, Context, Result};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Experiment, ExperimentConfig, ObjectiveChoice};

/// A failure caused by the configuration rather than by the computation.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(Invalid(format!("{:#}", e.into())))
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &str, pass: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.to_string(),
        pass,
        detail: detail.into(),
    }
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub outputs: Vec<String>,
    pub summary: Value,
}

pub struct Ctx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub seed: u64,
    pub out_dir: &'a Path,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn writer(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("cannot create {}", p.display()))?))
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

pub fn run(exp: Experiment, ctx: &Ctx) -> Result<Outcome> {
    match exp {
        Experiment::Aggregate => aggregate(ctx),
        Experiment::Simulate | Experiment::Adapt | Experiment::Subgaussian | Experiment::Prior => q_trials(exp, ctx),
        Experiment::TailCheck => tail_check_exp(ctx),
        Experiment::IdentityCheck => identity_check(ctx),
        Experiment::ExpectationCheck => expectation_check(ctx),
        Experiment::MaureyCheck => maurey_check(ctx),
        Experiment::Sparsity => sparsity(ctx),
        Experiment::Convex => convex(ctx),
        Experiment::Kregressor => kregressor(ctx),
    }
}

fn observation(ctx: &Ctx, f: &DVector<f64>) -> Result<DVector<f64>> {
    match &ctx.cfg.observation {
        Some(p) => {
            let y = affagg::io::read_vector_csv(p).map_err(invalid)?;
            if y.len() != ctx.cfg.n {
                return Err(invalid(anyhow::anyhow!("observation has length {} but n = {}", y.len(), ctx.cfg.n)));
            }
            Ok(y)
        }
        None => Ok(f + gen_noise(&ctx.cfg.noise, f.len(), ctx.seed)),
    }
}

fn aggregate(ctx: &Ctx) -> Result<Outcome> {
    let cfg = ctx.cfg;
    let ests = cfg.estimators().map_err(invalid)?;
    let m = ests.len();
    let f = if cfg.observation.is_some() { None } else { Some(cfg.truth().map_err(invalid)?) };
    let y = observation(ctx, f.as_ref().unwrap_or(&DVector::zeros(cfg.n)))?;
    let bank = EstimatorBank::new(ests, y).map_err(invalid)?;
    let sigma2 = cfg.sigma2();
    let spec = match cfg.objective {
        ObjectiveChoice::HPen => ObjectiveSpec::HPen { sigma2 },
        ObjectiveChoice::VPen => ObjectiveSpec::VPen {
            sigma2,
            prior: cfg.prior(m).map_err(invalid)?,
        },
        ObjectiveChoice::WPen => ObjectiveSpec::WPen { sigma2_hat: sigma2 },
        ObjectiveChoice::Cp | ObjectiveChoice::Erm => ObjectiveSpec::Cp { sigma2 },
    };
    let (theta, fitted, solve, warnings) = if cfg.objective == ObjectiveChoice::Erm {
        let j = procedures::erm_cp_select(&bank, sigma2)?;
        (SimplexPoint::vertex(m, j), bank.fit(j), None, Vec::new())
    } else {
        let out = procedures::aggregate(&bank, &spec, &SolveOptions::default())?;
        (out.theta, out.fitted, Some(out.solve), out.warnings)
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    let risk = f.as_ref().map(|f| linalg::dist_sq(&fitted, f));
    let result = json!({
        "objective": spec.kind().name(),
        "theta": theta.weights(),
        "fitted": fitted.as_slice(),
        "solve": solve,
        "risk": risk,
        "warnings": warnings,
    });
    serde_json::to_writer_pretty(ctx.writer(&cfg.outputs.result_json)?, &result)?;
    let converged = solve.as_ref().is_none_or(|s| s.converged);
    Ok(Outcome {
        checks: vec![check("solver converged", converged, format!("{m} estimators, n = {}", cfg.n))],
        outputs: vec![cfg.outputs.result_json.clone()],
        summary: json!({ "risk": risk, "support": theta.weights().iter().filter(|w| **w > qp::SUPPORT_TOL).count() }),
    })
}

fn write_trials(ctx: &Ctx, records: &[TrialRecord]) -> Result<()> {
    simulation::write_trials_csv(records, ctx.writer(&ctx.cfg.outputs.trials_csv)?)?;
    Ok(())
}

fn write_tail(ctx: &Ctx, rows: &[TailRow]) -> Result<()> {
    simulation::write_tail_csv(rows, ctx.writer(&ctx.cfg.outputs.tail_csv)?)?;
    Ok(())
}

fn run_setup(ctx: &Ctx, setup: &TrialSetup) -> Vec<TrialRecord> {
    simulation::run_trials(setup, ctx.cfg.trials, ctx.seed, Execution::Parallel, &SolveOptions::default())
}

fn failed_check(records: &[TrialRecord]) -> Check {
    let failed: Vec<&TrialRecord> = records.iter().filter(|r| !r.is_ok()).collect();
    let detail = match failed.first() {
        None => format!("{} trials", records.len()),
        Some(r) => format!(
            "{}/{} trials failed, first at trial {}: {}",
            failed.len(),
            records.len(),
            r.trial,
            r.error.as_deref().unwrap_or("")
        ),
    };
    check("all trials solved", failed.is_empty(), detail)
}

fn role_check(records: &[TrialRecord]) -> Check {
    let held = records.iter().filter(|r| r.role_holds() == Some(true)).count();
    let min_slack = records.iter().map(|r| r.role_slack).fold(f64::INFINITY, f64::min);
    check(
        "per-trial deterministic bound",
        held == records.len(),
        format!("{held}/{} trials, min slack {min_slack:.3e}", records.len()),
    )
}

fn tail_detail(rep: &TailCheckReport) -> String {
    rep.levels
        .iter()
        .map(|l| format!("x={}: {}/{} over {:.3} (wilson {:.2e} vs {:.2e})", l.x, l.exceedances, l.trials, l.bound, l.wilson_upper, l.theoretical))
        .collect::<Vec<_>>()
        .join("; ")
}

fn tail(
    ctx: &Ctx,
    name: &str,
    samples: &[f64],
    bound: impl Fn(f64) -> f64,
    tail_prob: impl Fn(f64) -> f64,
) -> Result<(Check, Vec<TailRow>)> {
    let rep = tail_check(samples, bound, &ctx.cfg.x_levels, tail_prob, ctx.cfg.tail_slack).map_err(invalid)?;
    Ok((check(name, rep.pass(), tail_detail(&rep)), tail_rows(name, &rep)))
}

fn q_trials(exp: Experiment, ctx: &Ctx) -> Result<Outcome> {
    let cfg = ctx.cfg;
    let ests = cfg.estimators().map_err(invalid)?;
    let f = cfg.truth().map_err(invalid)?;
    let m = ests.len();
    let plan = match exp {
        Experiment::Prior => ObjectivePlan::Fixed(ObjectiveSpec::VPen {
            sigma2: cfg.sigma2(),
            prior: cfg.prior(m).map_err(invalid)?,
        }),
        _ => cfg.plan(m).map_err(invalid)?,
    };
    let setup = TrialSetup::new(ests, f, cfg.noise, plan).map_err(invalid)?;
    let records = run_setup(ctx, &setup);
    write_trials(ctx, &records)?;

    let s2 = cfg.sigma2();
    let log_m = (m as f64).ln();
    let excess = simulation::excess_risks(&records);
    let two_exp = |x: f64| 2.0 * (-x).exp();
    let mut checks = vec![failed_check(&records)];
    if records.iter().any(|r| r.role_holds().is_some()) {
        checks.push(role_check(&records));
    }
    let (tail_chk, rows) = match exp {
        Experiment::Simulate => {
            if cfg.noise.kind != NoiseKind::Gaussian {
                log::warn!("simulate compares against the Gaussian bound under {:?} noise", cfg.noise.kind);
            }
            let s = Summary::of(&excess);
            let limit = 92.0 * s2 * (E * m as f64).ln();
            let upper = s.mean_upper(WILSON_Z);
            checks.push(check(
                "expectation bound",
                upper <= limit && s.non_finite == 0,
                format!("mean excess {:.4} (upper 95% {upper:.4}) <= {limit:.3}", s.mean),
            ));
            tail(ctx, "tail bound", &excess, |x| 46.0 * s2 * (2.0 * log_m + x), two_exp)?
        }
        Experiment::Adapt => tail(ctx, "variance plug-in tail bound", &excess, |x| 64.0 * s2 * (x + 2.0 * log_m), two_exp)?,
        Experiment::Subgaussian => {
            let sb = cfg.noise.subgaussian_bound.unwrap_or(2.0 * cfg.noise.sigma);
            tail(ctx, "subgaussian tail bound", &excess, |x| 46.0 * sb * sb * (2.0 * log_m + x), two_exp)?
        }
        Experiment::Prior => {
            let prior_excess: Vec<f64> = records.iter().map(|r| r.prior_excess).collect();
            tail(ctx, "prior tail bound", &prior_excess, |x| 46.0 * s2 * x, two_exp)?
        }
        _ => unreachable!(),
    };
    checks.push(tail_chk);
    write_tail(ctx, &rows)?;
    Ok(Outcome {
        checks,
        outputs: vec![cfg.outputs.trials_csv.clone(), cfg.outputs.tail_csv.clone()],
        summary: json!({ "num_estimators": m, "excess_risk": Summary::of(&excess) }),
    })
}

fn sparsity(ctx: &Ctx) -> Result<Outcome> {
    let cfg = ctx.cfg;
    let x = cfg.design().map_err(invalid)?;
    let f = cfg.truth().map_err(invalid)?;
    let p = x.ncols();
    let k2 = cfg.sigma2();
    if cfg.noise.kind != NoiseKind::Gaussian {
        log::warn!("sparsity takes K^2 = sigma^2, which is only a variance proxy for Gaussian noise");
    }
    let khat2 = cfg.khat2.unwrap_or(k2);
    let spec = SparsitySpec::new(x.clone(), cfg.k_max, khat2, cfg.support_cap as u128, Execution::Parallel)
        .map_err(invalid)?;
    if !spec.trace_violations.is_empty() {
        log::warn!("{} supports have rank above the support size", spec.trace_violations.len());
    }
    // Minimizing over all supports needs 2^p projections; past the cap only
    // supports of size <= k_max enter, which can only raise the bound.
    let full = p < 64 && (1u128 << p) <= cfg.support_cap as u128;
    let supports = if full { procedures::enumerate_supports(p, p, u128::MAX)? } else { spec.supports.clone() };
    let rhs0 = supports
        .iter()
        .map(|j| -> Result<f64> {
            let proj = make_projection(&x, j)?.estimator;
            let bias = linalg::dist_sq(&proj.apply(&f)?, &f);
            let s = j.len() as f64;
            Ok(bias + (64.0 * khat2 + 4.0 * k2) * (0.5 + 2.0 * s * (E * p as f64 / s.max(1.0)).ln()))
        })
        .try_fold(f64::INFINITY, |acc, r| r.map(|v| acc.min(v)))?;
    let delta = if khat2 >= k2 { 0.0 } else { 1.0 };
    let setup = TrialSetup::new(Arc::clone(&spec.estimators), f, cfg.noise, ObjectivePlan::Fixed(spec.objective()))
        .map_err(invalid)?;
    let records = run_setup(ctx, &setup);
    write_trials(ctx, &records)?;
    let risks: Vec<f64> = records.iter().map(|r| r.aggregate_risk).collect();
    let (tail_chk, rows) = tail(
        ctx,
        "sparsity oracle inequality",
        &risks,
        |x| rhs0 + 31.0 * k2 * x,
        |x| (3.0 * (-x).exp() + delta).min(1.0),
    )?;
    write_tail(ctx, &rows)?;
    Ok(Outcome {
        checks: vec![failed_check(&records), role_check(&records), tail_chk],
        outputs: vec![cfg.outputs.trials_csv.clone(), cfg.outputs.tail_csv.clone()],
        summary: json!({
            "supports": spec.supports.len(),
            "oracle_over_all_supports": full,
            "oracle_term": rhs0,
            "risk": Summary::of(&risks),
        }),
    })
}

fn kregressor(ctx: &Ctx) -> Result<Outcome> {
    let cfg = ctx.cfg;
    let x = cfg.design().map_err(invalid)?;
    let f = cfg.truth().map_err(invalid)?;
    let p = x.ncols();
    let k = cfg.k;
    if k == 0 || k > p {
        return Err(invalid(anyhow::anyhow!("config field `k`: must lie in 1..={p}")));
    }
    let ests = procedures::kregressor_estimators(&x, k, cfg.support_cap as u128, Execution::Parallel).map_err(invalid)?;
    let m = ests.len();
    let setup = TrialSetup::q_aggregation(ests, f, cfg.noise).map_err(invalid)?;
    let best_bias = setup.bias_risks().into_iter().fold(f64::INFINITY, f64::min);
    let records = run_setup(ctx, &setup);
    write_trials(ctx, &records)?;
    let excess: Vec<f64> = records.iter().map(|r| r.aggregate_risk - best_bias).collect();
    let s2 = cfg.sigma2();
    let complexity = k as f64 * (E * p as f64 / k as f64).ln();
    let (tail_chk, rows) = tail(
        ctx,
        "k-regressor bound",
        &excess,
        |x| 92.0 * s2 * (complexity + x),
        |x| 2.0 * (-x).exp(),
    )?;
    write_tail(ctx, &rows)?;
    Ok(Outcome {
        checks: vec![failed_check(&records), role_check(&records), tail_chk],
        outputs: vec![cfg.outputs.trials_csv.clone(), cfg.outputs.tail_csv.clone()],
        summary: json!({ "num_estimators": m, "best_bias": best_bias, "excess_risk": Summary::of(&excess) }),
    })
}

fn convex(ctx: &Ctx) -> Result<Outcome> {
    let cfg = ctx.cfg;
    let ests: Arc<[AffineEstimator]> = cfg.estimators().map_err(invalid)?.into();
    let f = cfg.truth().map_err(invalid)?;
    let y = observation(ctx, &f)?;
    let sigma2 = cfg.sigma2();
    let out = procedures::convex_aggregate(&ests, &y, sigma2, cfg.grid_cap as u128).map_err(|e| match e {
        affagg::Error::InvalidInput(_) => invalid(e),
        e => e.into(),
    })?;
    let risk = linalg::dist_sq(&out.grid_output.fitted, &f);

    // Best convex combination of the noisy fits, for reference.
    let bank = EstimatorBank::new(Arc::clone(&ests), y)?;
    let fits = bank.fits();
    let lin = fits.tr_mul(&f) * -2.0;
    let oracle_qp = QpProblem::new(bank.gram() * 2.0, lin, f.norm_squared())?;
    let oracle = qp::solve_qp_with(&oracle_qp, &SolveOptions::default())?;
    let result = json!({
        "grid_m": out.grid_m,
        "grid_size": out.grid_size,
        "theta": out.theta.weights(),
        "risk": risk,
        "convex_oracle_risk": oracle.objective,
        "solve": out.grid_output.solve,
        "fitted": out.grid_output.fitted.as_slice(),
    });
    serde_json::to_writer_pretty(ctx.writer(&cfg.outputs.result_json)?, &result)?;
    Ok(Outcome {
        checks: vec![check(
            "solver converged",
            out.grid_output.solve.converged,
            format!("grid m = {}, {} grid points", out.grid_m, out.grid_size),
        )],
        outputs: vec![cfg.outputs.result_json.clone()],
        summary: json!({ "risk": risk, "convex_oracle_risk": oracle.objective, "grid_size": out.grid_size }),
    })
}

fn random_pair(rng: &mut ChaCha8Rng, n: usize) -> (AffineEstimator, AffineEstimator) {
    (random::admissible_estimator(rng, n, false), random::admissible_estimator(rng, n, false))
}

fn tail_check_exp(ctx: &Ctx) -> Result<Outcome> {
    let cfg = ctx.cfg;
    if cfg.trials < simulation::MIN_CHAOS_TRIALS {
        return Err(invalid(anyhow::anyhow!(
            "config field `trials`: the chaos check needs at least {}",
            simulation::MIN_CHAOS_TRIALS
        )));
    }
    let mut rng = ctx.rng();
    let form = ChaosForm::default_for(&cfg.noise);
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for i in 0..cfg.instances {
        let (ej, ek) = random_pair(&mut rng, cfg.n);
        let b = (ek.linear.to_dense() - ej.linear.to_dense()) * 2.0;
        let v = random::gaussian_vector(&mut rng, cfg.n, 1.0);
        let seed = ctx.seed.wrapping_add(1_000_003 * (2 * i as u64 + 1));
        let chaos = chaos_tail_check(&b, &cfg.noise, form, cfg.trials, seed, &cfg.x_levels, Execution::Parallel)?;
        let lin = linear_tail_check(&v, &cfg.noise, cfg.trials, seed.wrapping_add(1_000_003), &cfg.x_levels, Execution::Parallel)?;
        let name = format!("chaos {i}");
        checks.push(check(&name, chaos.pass(), tail_detail(&chaos)));
        rows.extend(tail_rows(&name, &chaos));
        let name = format!("linear {i}");
        checks.push(check(&name, lin.pass(), tail_detail(&lin)));
        rows.extend(tail_rows(&name, &lin));
        if cfg.noise.kind != NoiseKind::Gaussian {
            let hsu = ChaosForm::Hsu { k: cfg.noise.sigma_bar() };
            let psd = &b * b.transpose();
            let rep = chaos_tail_check(&psd, &cfg.noise, hsu, cfg.trials, seed.wrapping_add(2_000_006), &cfg.x_levels, Execution::Parallel)?;
            let name = format!("hsu {i}");
            checks.push(check(&name, rep.pass(), tail_detail(&rep)));
            rows.extend(tail_rows(&name, &rep));
        }
    }
    write_tail(ctx, &rows)?;
    Ok(Outcome {
        checks,
        outputs: vec![cfg.outputs.tail_csv.clone()],
        summary: json!({ "form": form }),
    })
}

fn expectation_check(ctx: &Ctx) -> Result<Outcome> {
    let cfg = ctx.cfg;
    if cfg.trials < 2 {
        return Err(invalid(anyhow::anyhow!("config field `trials`: needs at least 2")));
    }
    let mut rng = ctx.rng();
    let mut checks = Vec::new();
    let mut reports = Vec::new();
    for i in 0..cfg.instances {
        let a = random::admissible_estimator(&mut rng, cfg.n, true);
        let b = random::admissible_estimator(&mut rng, cfg.n, true);
        let f = random::gaussian_vector(&mut rng, cfg.n, 1.0);
        let seed = ctx.seed.wrapping_add(1_000_003 * (i as u64 + 1));
        let rep = expectation_identity_check(&a, &b, &f, &cfg.noise, cfg.trials, seed, Execution::Parallel)?;
        checks.push(check(
            &format!("pair {i}"),
            rep.pass(4.0),
            format!("mean {:.5} vs closed form {:.5}, z = {:.3}", rep.mean, rep.closed_form, rep.z),
        ));
        reports.push(rep);
    }
    Ok(Outcome {
        checks,
        outputs: Vec::new(),
        summary: json!({ "pairs": reports }),
    })
}

#[derive(Serialize)]
struct IdentityRow {
    instance: usize,
    n: usize,
    m: usize,
    bias_variance: f64,
    taylor: f64,
    quadratic_linear: f64,
    delta_decomposition: f64,
}

fn rel(residual: f64, scale: f64) -> f64 {
    residual.abs() / (1.0 + scale.abs())
}

fn random_theta(rng: &mut ChaCha8Rng, m: usize) -> Result<SimplexPoint> {
    let w: Vec<f64> = (0..m).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = w.iter().sum();
    Ok(SimplexPoint::new(w.into_iter().map(|x| x / s).collect())?)
}

fn identity_check(ctx: &Ctx) -> Result<Outcome> {
    let cfg = ctx.cfg;
    let mut rng = ctx.rng();
    let sigma2 = cfg.sigma2();
    let mut rows = Vec::with_capacity(cfg.instances);
    for instance in 0..cfg.instances {
        let m = rng.random_range(2..=10);
        let n = cfg.n;
        let ests: Vec<_> = (0..m).map(|_| random::admissible_estimator(&mut rng, n, true)).collect();
        let f = random::gaussian_vector(&mut rng, n, 2.0);
        let xi = gen_noise(&cfg.noise, n, rng.random());
        let bank = EstimatorBank::new(ests, &f + &xi)?;
        let theta = random_theta(&mut rng, m)?;
        let mix = bank.mixture_fit(theta.weights())?;
        let pen = criteria::penalty(&bank, &theta)?;

        let g = random::gaussian_vector(&mut rng, n, 3.0);
        let lhs: f64 = (0..m).map(|k| theta.weights()[k] * linalg::dist_sq(&bank.fit(k), &g)).sum();
        let bias_variance = rel(lhs - linalg::dist_sq(&mix, &g) - pen, lhs);

        let k = rng.random_range(0..m);
        let lhs = pen + linalg::dist_sq(&mix, &bank.fit(k));
        let rhs: f64 = (0..m).map(|j| theta.weights()[j] * linalg::dist_sq(&bank.fit(j), &bank.fit(k))).sum();
        let quadratic_linear = rel(lhs - rhs, rhs);

        let mut taylor = 0.0_f64;
        for spec in [
            ObjectiveSpec::HPen { sigma2 },
            ObjectiveSpec::VPen {
                sigma2,
                prior: criteria::Prior::from_unnormalized((0..m).map(|j| 1.0 + j as f64).collect())?,
            },
            ObjectiveSpec::WPen { sigma2_hat: sigma2 },
            ObjectiveSpec::Cp { sigma2 },
        ] {
            taylor = taylor.max(simulation::strong_convexity_probe(&spec, &bank, 3, rng.random())?);
        }

        let ests = bank.estimators();
        let (j, k) = (rng.random_range(0..m), rng.random_range(0..m));
        let (q, v) = criteria::decomposition_qv(ests, &f, j, k)?;
        let b = ests[k].linear.to_dense() - ests[j].linear.to_dense();
        let shift = &b * &f + &ests[k].offset - &ests[j].offset;
        let dist = bank.pair_dist_sq(j, k);
        let lhs = criteria::delta_jk(ests, &f, &xi, sigma2, k, j)? - 0.5 * dist;
        let quad = xi.dot(&(&q * &xi));
        let rhs = quad - sigma2 * q.trace() + xi.dot(&v) - 0.5 * sigma2 * linalg::frobenius_sq(&b) - 0.5 * shift.norm_squared();
        let scale = dist + quad.abs() + xi.norm_squared() * 4.0 + shift.norm_squared() + v.norm() * xi.norm();
        let delta_decomposition = rel(lhs - rhs, scale);

        rows.push(IdentityRow {
            instance,
            n,
            m,
            bias_variance,
            taylor,
            quadratic_linear,
            delta_decomposition,
        });
    }
    let mut w = csv::Writer::from_writer(ctx.writer(&cfg.outputs.table_csv)?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let worst = |sel: fn(&IdentityRow) -> f64| rows.iter().map(sel).fold(0.0, f64::max);
    let checks = [
        ("bias-variance decomposition", worst(|r| r.bias_variance)),
        ("exact Taylor expansion", worst(|r| r.taylor)),
        ("quadratic-to-linear identity", worst(|r| r.quadratic_linear)),
        ("Delta decomposition", worst(|r| r.delta_decomposition)),
    ]
    .into_iter()
    .map(|(name, v)| check(name, v <= 1e-9, format!("max relative residual {v:.2e} over {} banks", rows.len())))
    .collect();
    Ok(Outcome {
        checks,
        outputs: vec![cfg.outputs.table_csv.clone()],
        summary: Value::Null,
    })
}

#[derive(Serialize)]
struct MaureyRow {
    instance: usize,
    m: usize,
    grid_size: usize,
    gap: f64,
    bound: f64,
}

fn maurey_check(ctx: &Ctx) -> Result<Outcome> {
    let cfg = ctx.cfg;
    let dim = cfg.maurey.dim;
    let mut rng = ctx.rng();
    let grids = cfg
        .maurey
        .m_values
        .iter()
        .map(|&m| procedures::maurey_grid_with_m(dim, m, cfg.grid_cap as u128))
        .collect::<affagg::Result<Vec<_>>>()
        .map_err(invalid)?;
    let mut rows = Vec::new();
    for instance in 0..cfg.maurey.quadratics {
        let cols = rng.random_range(1..=dim + 2);
        let a = random::gaussian_matrix(&mut rng, dim, cols);
        let sigma = linalg::symmetrize(&(&a * a.transpose()));
        let problem = QpProblem::new(sigma * 2.0, random::gaussian_vector(&mut rng, dim, 2.0), 0.0)?;
        for grid in &grids {
            rows.push(MaureyRow {
                instance,
                m: grid.m,
                grid_size: grid.len(),
                gap: procedures::maurey_gap(&problem, grid)?,
                bound: procedures::maurey_bound(&problem, grid.m),
            });
        }
    }
    let mut w = csv::Writer::from_writer(ctx.writer(&cfg.outputs.table_csv)?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let violations = rows.iter().filter(|r| r.gap > r.bound + 1e-8).count();
    let worst = rows.iter().map(|r| r.gap - r.bound).fold(f64::NEG_INFINITY, f64::max);
    Ok(Outcome {
        checks: vec![check(
            "grid gap within bound",
            violations == 0,
            format!("{} checks, {violations} violations, max gap - bound = {worst:.3e}", rows.len()),
        )],
        outputs: vec![cfg.outputs.table_csv.clone()],
        summary: Value::Null,
    })
}

pub fn ensure_out_dir(dir: &Path) -> Result<()> {
    if dir.exists() && !dir.is_dir() {
        bail!("output path {} is not a directory", dir.display());
    }
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}
