use std::sync::Arc;

use affagg::criteria::{ObjectiveSpec, Prior};
use affagg::estimators::{
    random, smoothness_bank, smoothness_grid, AffineEstimator, EstimatorBank, MonotoneFilter,
};
use affagg::par::Execution;
use affagg::procedures::{self, SparsitySpec, DEFAULT_GRID_CAP, DEFAULT_SUPPORT_CAP};
use affagg::qp::SolveOptions;
use affagg::simulation::{self, gen_noise, NoiseModel, ObjectivePlan, TrialSetup, VarianceEstimate};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn smoothness_bank_with_difference_variance() {
    let n = 200;
    let grid = smoothness_grid(n).unwrap();
    let ests = smoothness_bank(&grid, &MonotoneFilter).unwrap();
    let f = DVector::from_fn(n, |i, _| 3.0 / (1.0 + i as f64));
    let model = NoiseModel::gaussian(0.5).unwrap();
    let y = &f + gen_noise(&model, n, 3);
    let bank = EstimatorBank::new(ests, y.clone()).unwrap();
    let s2 = affagg::estimators::difference_variance(y.as_slice()).unwrap();
    let out = procedures::q_aggregate_plugin_variance(&bank, s2).unwrap();
    assert!(out.solve.converged);
    assert!(out.warnings.iter().any(|w| w.contains("orthoprojector")));
    let risk = (&out.fitted - &f).norm_squared();
    let raw = (&y - &f).norm_squared();
    assert!(risk < raw);
}

#[test]
fn every_procedure_runs_on_one_bank() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 16;
    let ests: Arc<[AffineEstimator]> = (0..4)
        .map(|_| random::admissible_estimator(&mut rng, n, true))
        .collect::<Vec<_>>()
        .into();
    let y = random::gaussian_vector(&mut rng, n, 1.0);
    let bank = EstimatorBank::new(Arc::clone(&ests), y.clone()).unwrap();
    let outs = [
        procedures::q_aggregate(&bank, 1.0).unwrap(),
        procedures::q_aggregate_prior(&bank, 1.0, &Prior::uniform(4)).unwrap(),
        procedures::q_aggregate_plugin_variance(&bank, 1.0).unwrap(),
        procedures::q_aggregate_subgaussian(&bank, 1.0).unwrap(),
        procedures::cp_minimize(&bank, 1.0).unwrap(),
    ];
    for out in &outs {
        assert!(out.solve.converged);
        assert!((out.theta.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(out.fitted.len(), n);
    }
    assert!(procedures::erm_cp_select(&bank, 1.0).unwrap() < 4);
    let convex = procedures::convex_aggregate(&ests, &y, 1.0, DEFAULT_GRID_CAP).unwrap();
    assert_eq!(convex.theta.len(), 4);
    assert_eq!(convex.grid_size, convex.grid_output.theta.len());
}

#[test]
fn sparsity_trials_record_u_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random::gaussian_matrix(&mut rng, 24, 5);
    let spec = SparsitySpec::new(x.clone(), 2, 1.0, DEFAULT_SUPPORT_CAP, Execution::Parallel).unwrap();
    let f = x.column(0) * 2.0;
    let setup = TrialSetup::new(
        Arc::clone(&spec.estimators),
        f,
        NoiseModel::gaussian(1.0).unwrap(),
        ObjectivePlan::Fixed(spec.objective()),
    )
    .unwrap();
    let recs = simulation::run_trials(&setup, 20, 1, Execution::Parallel, &SolveOptions::default());
    assert!(recs.iter().all(|r| r.role_holds() == Some(true)));
}

#[test]
fn plugin_variance_trials_hold_per_trial_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random::gaussian_matrix(&mut rng, 40, 6);
    let ests: Vec<_> = (1..=6)
        .map(|k| affagg::estimators::make_projection(&x, &(0..k).collect::<Vec<_>>()).unwrap().estimator)
        .collect();
    let f = x.column(0) + x.column(3) * 0.5;
    let setup = TrialSetup::new(
        ests,
        f,
        NoiseModel::gaussian(1.0).unwrap(),
        ObjectivePlan::PluginVariance(VarianceEstimate::Difference),
    )
    .unwrap();
    let recs = simulation::run_trials(&setup, 50, 2, Execution::Parallel, &SolveOptions::default());
    assert!(recs.iter().all(|r| r.role_holds() == Some(true)));
    assert!(recs.iter().all(|r| r.sigma2_hat > 0.0));
}

#[test]
fn objective_spec_json_shape() {
    let spec = ObjectiveSpec::VPen {
        sigma2: 0.5,
        prior: Prior::uniform(2),
    };
    let text = serde_json::to_string(&spec).unwrap();
    assert_eq!(text, r#"{"kind":"v_pen","sigma2":0.5,"prior":[0.5,0.5]}"#);
    let back: ObjectiveSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, spec);
    assert!(serde_json::from_str::<ObjectiveSpec>(r#"{"kind":"v_pen","sigma2":0.5,"prior":[0.7,0.7]}"#).is_err());
}

#[test]
fn kregressor_and_dense_identity_agree() {
    let x = DMatrix::<f64>::identity(8, 8);
    let y = DVector::from_fn(8, |i, _| if i == 2 { 5.0 } else { 0.1 * i as f64 });
    let out = procedures::kregressor_aggregate(&x, 1, &y, 0.5).unwrap();
    assert!(out.theta.weights()[2] > 0.9);
}
