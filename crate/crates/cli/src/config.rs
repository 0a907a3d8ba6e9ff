use std::path::{Path, PathBuf};

use affagg::criteria::Prior;
use affagg::estimators::{make_projection, random, smoothness_bank, smoothness_grid, AffineEstimator, MonotoneFilter};
use affagg::io::{read_matrix_csv, read_vector_csv};
use affagg::par::Execution;
use affagg::procedures;
use affagg::simulation::{NoiseKind, NoiseModel, ObjectivePlan, VarianceEstimate};
use affagg::ObjectiveSpec;
use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Aggregate,
    Simulate,
    Adapt,
    Subgaussian,
    Prior,
    TailCheck,
    IdentityCheck,
    ExpectationCheck,
    MaureyCheck,
    Sparsity,
    Convex,
    Kregressor,
}

impl Experiment {
    pub const ALL: [Experiment; 12] = [
        Experiment::Aggregate,
        Experiment::Simulate,
        Experiment::Adapt,
        Experiment::Subgaussian,
        Experiment::Prior,
        Experiment::TailCheck,
        Experiment::IdentityCheck,
        Experiment::ExpectationCheck,
        Experiment::MaureyCheck,
        Experiment::Sparsity,
        Experiment::Convex,
        Experiment::Kregressor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Aggregate => "aggregate",
            Experiment::Simulate => "simulate",
            Experiment::Adapt => "adapt",
            Experiment::Subgaussian => "subgaussian",
            Experiment::Prior => "prior",
            Experiment::TailCheck => "tail-check",
            Experiment::IdentityCheck => "identity-check",
            Experiment::ExpectationCheck => "expectation-check",
            Experiment::MaureyCheck => "maurey-check",
            Experiment::Sparsity => "sparsity",
            Experiment::Convex => "convex",
            Experiment::Kregressor => "kregressor",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Experiment::Aggregate => "aggregate one observation with a chosen criterion",
            Experiment::Simulate => "Monte Carlo tail, mean and per-trial checks of Q-aggregation under Gaussian noise",
            Experiment::Adapt => "Q-aggregation of orthoprojectors with a plug-in noise variance",
            Experiment::Subgaussian => "Q-aggregation under Rademacher or uniform noise",
            Experiment::Prior => "prior-weighted Q-aggregation against the prior-penalized oracle",
            Experiment::TailCheck => "chaos and linear deviation bounds on random estimator pairs",
            Experiment::IdentityCheck => "exact algebraic identities of the criteria on random banks",
            Experiment::ExpectationCheck => "Monte Carlo mean of half the squared distance between two estimators",
            Experiment::MaureyCheck => "grid minimum versus simplex minimum of random quadratics",
            Experiment::Sparsity => "sparsity pattern aggregation of least-squares projectors",
            Experiment::Convex => "convex aggregation through Q-aggregation over the Maurey grid",
            Experiment::Kregressor => "Q-aggregation of all k-column least-squares projectors",
        }
    }

    pub fn verifies(self) -> &'static str {
        match self {
            Experiment::Aggregate => "plumbing",
            Experiment::Simulate => "Gaussian sharp oracle inequality (deviation and expectation)",
            Experiment::Adapt => "oracle inequality with estimated variance",
            Experiment::Subgaussian => "subgaussian oracle inequality",
            Experiment::Prior => "oracle inequality with prior weights",
            Experiment::TailCheck => "Gaussian chaos and Hoeffding-type concentration lemmas",
            Experiment::IdentityCheck => "bias-variance decomposition and exact Taylor expansion",
            Experiment::ExpectationCheck => "expected pairwise distance identity",
            Experiment::MaureyCheck => "Maurey approximation lemma",
            Experiment::Sparsity => "sparsity oracle inequality",
            Experiment::Convex => "convex aggregation over the Maurey grid",
            Experiment::Kregressor => "k-regressors oracle inequality",
        }
    }

    pub fn from_name(name: &str) -> Option<Experiment> {
        Experiment::ALL.into_iter().find(|e| e.name() == name)
    }

    pub fn runs_trials(self) -> bool {
        !matches!(self, Experiment::Aggregate | Experiment::Convex | Experiment::MaureyCheck | Experiment::IdentityCheck)
    }
}

pub fn list_experiments() -> String {
    let width = Experiment::ALL.iter().map(|e| e.name().len()).max().unwrap_or(0);
    Experiment::ALL
        .iter()
        .map(|e| format!("{:width$}  {} [{}]\n", e.name(), e.description(), e.verifies()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BankSpec {
    /// `lambda_j` evenly spaced from `min` to `max`.
    ScaledIdentity { count: usize, min: f64, max: f64 },
    /// Projectors onto the first `j` design columns, `j = 1..=count`.
    NestedProjectors { count: usize },
    /// Projectors onto every `k` design columns.
    Kregressors { k: usize },
    Smoothness,
    Random { count: usize, with_offset: bool, seed: u64 },
    /// Dense `n x n` matrices, with optional offset vectors.
    Files {
        matrices: Vec<PathBuf>,
        #[serde(default)]
        offsets: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignSpec {
    /// First `p` columns of the `n x n` identity.
    Identity { p: usize },
    Gaussian { p: usize, seed: u64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthSpec {
    Zero,
    /// `amplitude` on the first `k` coordinates.
    Spike { k: usize, amplitude: f64 },
    /// `f_i = amplitude (i + 1)^(-rate)`.
    SmoothDecay { amplitude: f64, rate: f64 },
    /// `f_i = rms sqrt(2) cos(2 pi frequency i / n)`, so `||f||^2 / n = rms^2`.
    Cosine { frequency: usize, rms: f64 },
    /// `f = X beta` with `beta` given as `[column, value]` pairs.
    Sparse { coefficients: Vec<(usize, f64)> },
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum VariancePolicy {
    Known,
    Plugin { sigma2_hat: f64 },
    Ratio { ratio: f64 },
    Difference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    Uniform,
    Weights { weights: Vec<f64> },
    /// `pi_j ∝ ratio^j`.
    Geometric { ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveChoice {
    HPen,
    VPen,
    WPen,
    Cp,
    Erm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaureySpec {
    pub dim: usize,
    pub m_values: Vec<usize>,
    pub quadratics: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    pub trials_csv: String,
    pub tail_csv: String,
    pub table_csv: String,
    pub result_json: String,
    pub report_json: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub bank: BankSpec,
    pub design: DesignSpec,
    pub truth: TruthSpec,
    pub noise: NoiseModel,
    pub variance: VariancePolicy,
    pub prior: PriorSpec,
    pub objective: ObjectiveChoice,
    pub trials: usize,
    pub seed: Option<u64>,
    pub x_levels: Vec<f64>,
    pub tail_slack: f64,
    pub k: usize,
    pub k_max: usize,
    pub khat2: Option<f64>,
    pub grid_cap: u64,
    pub support_cap: u64,
    /// Random instances for the check experiments.
    pub instances: usize,
    pub maurey: MaureySpec,
    /// Observation vector for `aggregate`; drawn from truth and noise if absent.
    pub observation: Option<PathBuf>,
    pub outputs: Outputs,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n: 200,
            bank: BankSpec::ScaledIdentity {
                count: 20,
                min: 0.05,
                max: 1.0,
            },
            design: DesignSpec::Gaussian { p: 8, seed: 1 },
            truth: TruthSpec::Cosine { frequency: 3, rms: 1.0 },
            noise: NoiseModel {
                kind: NoiseKind::Gaussian,
                sigma: 1.0,
                subgaussian_bound: None,
            },
            variance: VariancePolicy::Known,
            prior: PriorSpec::Uniform,
            objective: ObjectiveChoice::HPen,
            trials: 1000,
            seed: None,
            x_levels: vec![1.0, 2.0, 3.0],
            tail_slack: 0.0,
            k: 1,
            k_max: 3,
            khat2: None,
            grid_cap: procedures::DEFAULT_GRID_CAP as u64,
            support_cap: procedures::DEFAULT_SUPPORT_CAP as u64,
            instances: 5,
            maurey: MaureySpec {
                dim: 4,
                m_values: vec![1, 2, 3],
                quadratics: 200,
            },
            observation: None,
            outputs: Outputs {
                trials_csv: "trials.csv".into(),
                tail_csv: "tail.csv".into(),
                table_csv: "table.csv".into(),
                result_json: "result.json".into(),
                report_json: "report.json".into(),
            },
        }
    }
}

fn preset(exp: Experiment) -> Value {
    match exp {
        Experiment::Aggregate => json!({ "trials": 1 }),
        Experiment::Simulate => json!({ "trials": 5000 }),
        Experiment::Adapt => json!({
            "n": 100,
            "bank": { "kind": "nested_projectors", "count": 10 },
            "design": { "kind": "gaussian", "p": 10, "seed": 1 },
            "truth": { "kind": "smooth_decay", "amplitude": 5.0, "rate": 1.0 },
            "variance": { "policy": "ratio", "ratio": 1.1 },
            "trials": 3000,
            "x_levels": [1.0, 2.0]
        }),
        Experiment::Subgaussian => json!({
            "noise": { "kind": "rademacher", "sigma": 1.0 },
            "trials": 5000,
            "x_levels": [1.0, 2.0]
        }),
        Experiment::Prior => json!({
            "prior": { "kind": "geometric", "ratio": 0.8 },
            "objective": "v_pen",
            "trials": 2000,
            "x_levels": [1.0, 2.0]
        }),
        Experiment::TailCheck => json!({ "n": 20, "trials": 100000, "x_levels": [1.0, 2.0, 4.0] }),
        Experiment::IdentityCheck => json!({ "n": 30, "trials": 1, "instances": 200 }),
        Experiment::ExpectationCheck => json!({ "n": 15, "trials": 100000, "instances": 1 }),
        Experiment::MaureyCheck => json!({ "trials": 1 }),
        Experiment::Sparsity => json!({
            "n": 64,
            "design": { "kind": "gaussian", "p": 8, "seed": 1 },
            "truth": { "kind": "sparse", "coefficients": [[1, 1.5], [5, -1.0]] },
            "trials": 1000,
            "x_levels": [1.0, 2.0]
        }),
        Experiment::Convex => json!({
            "n": 100,
            "bank": { "kind": "random", "count": 3, "with_offset": false, "seed": 1 },
            "trials": 1
        }),
        Experiment::Kregressor => json!({
            "n": 30,
            "design": { "kind": "identity", "p": 30 },
            "truth": { "kind": "spike", "k": 1, "amplitude": 4.0 },
            "trials": 2000,
            "x_levels": [1.0, 2.0]
        }),
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    // A tagged section with a different tag is replaced, not merged.
                    Some(slot) if !tag_changes(slot, &v) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn tag_changes(old: &Value, new: &Value) -> bool {
    ["kind", "policy"]
        .iter()
        .any(|t| matches!((old.get(t), new.get(t)), (Some(a), Some(b)) if a != b))
}

/// Applies `a.b.c=value`; the value is parsed as JSON when possible and kept
/// as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not of the form key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override {assignment:?} has an empty key");
    }
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("override {path}: {k} is not inside an object"))?;
        node = obj.entry(k.to_string()).or_insert_with(|| json!({}));
    }
    let last = keys[keys.len() - 1];
    let obj = node
        .as_object_mut()
        .with_context(|| format!("override {path}: parent of {last} is not an object"))?;
    let mut patch = serde_json::Map::new();
    patch.insert(last.to_string(), value);
    let mut wrapper = Value::Object(std::mem::take(obj));
    merge(&mut wrapper, Value::Object(patch));
    if let Value::Object(m) = wrapper {
        *obj = m;
    }
    Ok(())
}

/// Resolves defaults, the experiment preset, the config file and overrides,
/// in that order.
pub fn load(exp: Experiment, path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut root = serde_json::to_value(ExperimentConfig::default())?;
    merge(&mut root, preset(exp));
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let file: Value =
            serde_json::from_str(&text).with_context(|| format!("config {} is not valid JSON", path.display()))?;
        if !file.is_object() {
            bail!("config {} must be a JSON object", path.display());
        }
        merge(&mut root, file);
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg: ExperimentConfig =
        serde_path_to_error::deserialize(root).map_err(|e| anyhow::anyhow!("config field `{}`: {}", e.path(), e.inner()))?;
    cfg.validate(exp)?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self, exp: Experiment) -> Result<()> {
        if self.n == 0 {
            bail!("config field `n`: must be positive");
        }
        if self.trials == 0 {
            bail!("config field `trials`: must be positive");
        }
        self.noise.validate().context("config field `noise`")?;
        if exp.runs_trials() && self.x_levels.is_empty() {
            bail!("config field `x_levels`: needs at least one level");
        }
        if let Some(x) = self.x_levels.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            bail!("config field `x_levels`: levels must be finite and > 0, got {x}");
        }
        if !(self.tail_slack.is_finite() && self.tail_slack >= 0.0) {
            bail!("config field `tail_slack`: must be finite and >= 0");
        }
        if let Some(k2) = self.khat2 {
            if !(k2.is_finite() && k2 >= 0.0) {
                bail!("config field `khat2`: must be finite and >= 0");
            }
        }
        if self.instances == 0 {
            bail!("config field `instances`: must be positive");
        }
        match &self.bank {
            BankSpec::ScaledIdentity { count, min, max } => {
                if *count == 0 {
                    bail!("config field `bank.count`: must be positive");
                }
                if !(min.is_finite() && max.is_finite()) {
                    bail!("config field `bank`: min and max must be finite");
                }
            }
            BankSpec::NestedProjectors { count } | BankSpec::Random { count, .. } if *count == 0 => {
                bail!("config field `bank.count`: must be positive");
            }
            BankSpec::Files { matrices, offsets } => {
                if matrices.is_empty() {
                    bail!("config field `bank.matrices`: needs at least one file");
                }
                if !offsets.is_empty() && offsets.len() != matrices.len() {
                    bail!("config field `bank.offsets`: needs one file per matrix");
                }
                for p in matrices.iter().chain(offsets) {
                    if !p.exists() {
                        bail!("config field `bank`: file {} does not exist", p.display());
                    }
                }
            }
            _ => {}
        }
        if let DesignSpec::File { path } = &self.design {
            if !path.exists() {
                bail!("config field `design.path`: file {} does not exist", path.display());
            }
        }
        if let TruthSpec::File { path } = &self.truth {
            if !path.exists() {
                bail!("config field `truth.path`: file {} does not exist", path.display());
            }
        }
        if let Some(p) = &self.observation {
            if !p.exists() {
                bail!("config field `observation`: file {} does not exist", p.display());
            }
        }
        if exp == Experiment::MaureyCheck {
            if self.maurey.dim == 0 || self.maurey.dim > affagg::qp::BRUTE_FORCE_MAX_DIM {
                bail!(
                    "config field `maurey.dim`: must lie in 1..={}",
                    affagg::qp::BRUTE_FORCE_MAX_DIM
                );
            }
            if self.maurey.m_values.contains(&0) || self.maurey.m_values.is_empty() {
                bail!("config field `maurey.m_values`: entries must be positive");
            }
        }
        Ok(())
    }

    pub fn sigma2(&self) -> f64 {
        self.noise.variance()
    }

    pub fn design(&self) -> Result<DMatrix<f64>> {
        let x = match &self.design {
            DesignSpec::Identity { p } => {
                if *p == 0 || *p > self.n {
                    bail!("config field `design.p`: must lie in 1..={}", self.n);
                }
                DMatrix::from_fn(self.n, *p, |i, j| if i == j { 1.0 } else { 0.0 })
            }
            DesignSpec::Gaussian { p, seed } => {
                if *p == 0 {
                    bail!("config field `design.p`: must be positive");
                }
                random::gaussian_matrix(&mut ChaCha8Rng::seed_from_u64(*seed), self.n, *p)
            }
            DesignSpec::File { path } => read_matrix_csv(path)?,
        };
        if x.nrows() != self.n {
            bail!("design has {} rows but n = {}", x.nrows(), self.n);
        }
        Ok(x)
    }

    pub fn truth(&self) -> Result<DVector<f64>> {
        let n = self.n;
        let f = match &self.truth {
            TruthSpec::Zero => DVector::zeros(n),
            TruthSpec::Spike { k, amplitude } => DVector::from_fn(n, |i, _| if i < *k { *amplitude } else { 0.0 }),
            TruthSpec::SmoothDecay { amplitude, rate } => {
                DVector::from_fn(n, |i, _| amplitude * (i as f64 + 1.0).powf(-rate))
            }
            TruthSpec::Cosine { frequency, rms } => DVector::from_fn(n, |i, _| {
                rms * 2f64.sqrt() * (2.0 * std::f64::consts::PI * *frequency as f64 * i as f64 / n as f64).cos()
            }),
            TruthSpec::Sparse { coefficients } => {
                let x = self.design()?;
                let mut beta = DVector::zeros(x.ncols());
                for &(j, v) in coefficients {
                    if j >= x.ncols() {
                        bail!("config field `truth.coefficients`: column {j} out of range for {} columns", x.ncols());
                    }
                    beta[j] = v;
                }
                x * beta
            }
            TruthSpec::File { path } => read_vector_csv(path)?,
        };
        if f.len() != n {
            bail!("truth has length {} but n = {n}", f.len());
        }
        if f.iter().any(|v| !v.is_finite()) {
            bail!("truth has non-finite entries");
        }
        Ok(f)
    }

    pub fn estimators(&self) -> Result<Vec<AffineEstimator>> {
        let n = self.n;
        Ok(match &self.bank {
            BankSpec::ScaledIdentity { count, min, max } => (0..*count)
                .map(|j| {
                    let t = if *count == 1 { 0.0 } else { j as f64 / (*count - 1) as f64 };
                    AffineEstimator::scaled_identity(n, min + (max - min) * t)
                })
                .collect::<affagg::Result<_>>()?,
            BankSpec::NestedProjectors { count } => {
                let x = self.design()?;
                if *count > x.ncols() {
                    bail!("config field `bank.count`: {count} exceeds the {} design columns", x.ncols());
                }
                (1..=*count)
                    .map(|j| make_projection(&x, &(0..j).collect::<Vec<_>>()).map(|p| p.estimator))
                    .collect::<affagg::Result<_>>()?
            }
            BankSpec::Kregressors { k } => {
                procedures::kregressor_estimators(&self.design()?, *k, self.support_cap as u128, Execution::Parallel)?
            }
            BankSpec::Smoothness => smoothness_bank(&smoothness_grid(n)?, &MonotoneFilter)?,
            BankSpec::Random {
                count,
                with_offset,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..*count).map(|_| random::admissible_estimator(&mut rng, n, *with_offset)).collect()
            }
            BankSpec::Files { matrices, offsets } => {
                let mut out = Vec::with_capacity(matrices.len());
                for (i, p) in matrices.iter().enumerate() {
                    let a = read_matrix_csv(p).with_context(|| format!("reading {}", p.display()))?;
                    let b = match offsets.get(i) {
                        Some(q) => read_vector_csv(q).with_context(|| format!("reading {}", q.display()))?,
                        None => DVector::zeros(n),
                    };
                    out.push(
                        AffineEstimator::new(affagg::LinearMap::Dense(a), b)
                            .with_context(|| format!("estimator from {}", p.display()))?,
                    );
                }
                out
            }
        })
    }

    pub fn prior(&self, m: usize) -> Result<Prior> {
        Ok(match &self.prior {
            PriorSpec::Uniform => Prior::uniform(m),
            PriorSpec::Weights { weights } => {
                if weights.len() != m {
                    bail!("config field `prior.weights`: expected {m} weights, got {}", weights.len());
                }
                Prior::from_unnormalized(weights.clone())?
            }
            PriorSpec::Geometric { ratio } => {
                if !(ratio.is_finite() && *ratio > 0.0) {
                    bail!("config field `prior.ratio`: must be finite and > 0");
                }
                Prior::from_unnormalized((0..m).map(|j| ratio.powi(j as i32)).collect())?
            }
        })
    }

    /// Objective used on each trial of the Q-aggregation experiments.
    pub fn plan(&self, m: usize) -> Result<ObjectivePlan> {
        let sigma2 = self.sigma2();
        Ok(match self.variance {
            VariancePolicy::Known => match self.objective {
                ObjectiveChoice::HPen | ObjectiveChoice::Erm => ObjectivePlan::Fixed(ObjectiveSpec::HPen { sigma2 }),
                ObjectiveChoice::VPen => ObjectivePlan::Fixed(ObjectiveSpec::VPen {
                    sigma2,
                    prior: self.prior(m)?,
                }),
                ObjectiveChoice::WPen => ObjectivePlan::Fixed(ObjectiveSpec::WPen { sigma2_hat: sigma2 }),
                ObjectiveChoice::Cp => ObjectivePlan::Fixed(ObjectiveSpec::Cp { sigma2 }),
            },
            VariancePolicy::Plugin { sigma2_hat } => {
                ObjectivePlan::PluginVariance(VarianceEstimate::Value { sigma2_hat })
            }
            VariancePolicy::Ratio { ratio } => ObjectivePlan::PluginVariance(VarianceEstimate::Ratio { ratio }),
            VariancePolicy::Difference => ObjectivePlan::PluginVariance(VarianceEstimate::Difference),
        })
    }
}
