//! Off-policy learning loops.
//!
//! Policies start at zero weights (uniform) and follow the gradient of an
//! off-policy value estimate upward with Adam. The learning rate decays as
//! `lr / (1 + decay_rate * epoch)`. Training only ever reads the fixed logged
//! dataset; the value oracle is consulted once per epoch for reporting.

use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::estimators::{self, BaselineMode};
use crate::policy::{GradientVector, LinearSoftmaxPolicy, LoggedDataset, LoggedInteraction};
use crate::rng::{self, purpose};
use crate::simulator::{self, EnvironmentConfig, TestSetOracle};

/// Mini-batch size, or the whole dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Full,
    Rows(usize),
}

impl fmt::Display for BatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchSize::Full => write!(f, "full"),
            BatchSize::Rows(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for BatchSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BatchSize::Full => s.serialize_str("full"),
            BatchSize::Rows(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Rows(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Rows(0) => Err(serde::de::Error::custom("batch_size must be >= 1")),
            Raw::Rows(n) => Ok(BatchSize::Rows(n as usize)),
            Raw::Word(w) if w == "full" => Ok(BatchSize::Full),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "batch_size must be a positive integer or \"full\", got \"{w}\""
            ))),
        }
    }
}

fn default_learning_rate() -> f64 {
    0.01
}
fn default_decay_rate() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_epochs() -> usize {
    500
}
fn default_batch_size() -> BatchSize {
    BatchSize::Rows(1024)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Inverse-time decay per epoch.
    #[serde(default = "default_decay_rate")]
    pub decay_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: BatchSize,
    /// Seed of the mini-batch shuffling stream. Set from the top-level seed
    /// in configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_learning_rate(),
            decay_rate: default_decay_rate(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("optimizer.learning_rate must be finite and >= 0".into()));
        }
        if !(self.decay_rate >= 0.0 && self.decay_rate.is_finite()) {
            return Err(Error::Config("optimizer.decay_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer.beta1/beta2 must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("optimizer.epsilon must be > 0".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("optimizer.epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate / (1.0 + self.decay_rate * epoch as f64)
    }
}

/// Adam state for gradient *ascent*.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    steps: i32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(num_parameters: usize, config: &OptimizerConfig) -> Self {
        Self {
            first_moment: vec![0.0; num_parameters],
            second_moment: vec![0.0; num_parameters],
            steps: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        }
    }

    /// One bias-corrected step moving `params` along `+gradient`.
    pub fn step(&mut self, params: &mut [f64], gradient: &[f64], learning_rate: f64) -> Result<()> {
        if params.len() != self.first_moment.len() || gradient.len() != params.len() {
            return Err(Error::contract("adam_step", "parameter/gradient shape mismatch"));
        }
        if let Some(bad) = gradient.iter().find(|g| !g.is_finite()) {
            return Err(Error::numeric("adam_step", format!("non-finite gradient entry {bad}")));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(gradient)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p += learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Scores a policy during training; never used to compute gradients.
pub trait ValueOracle: Sync {
    fn policy_value(&self, policy: &LinearSoftmaxPolicy) -> f64;
}

impl ValueOracle for TestSetOracle {
    fn policy_value(&self, policy: &LinearSoftmaxPolicy) -> f64 {
        self.value(policy)
    }
}

impl<F> ValueOracle for F
where
    F: Fn(&LinearSoftmaxPolicy) -> f64 + Sync,
{
    fn policy_value(&self, policy: &LinearSoftmaxPolicy) -> f64 {
        self(policy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Oracle value of the policy after this epoch's updates.
    pub test_value: f64,
    /// Mean over the epoch's batches of the summed per-component gradient
    /// sample variance. `None` for SNIPS, whose gradient has no per-row terms.
    pub grad_variance: Option<f64>,
    /// Mean baseline over the epoch's batches.
    pub beta_used: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub mode: BaselineMode,
    pub records: Vec<EpochRecord>,
    pub policy: LinearSoftmaxPolicy,
}

impl TrainingReport {
    pub fn final_value(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.test_value)
    }
}

fn check_dataset(op: &'static str, dataset: &LoggedDataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::contract(op, "empty dataset"));
    }
    Ok(())
}

struct BatchUpdate {
    gradient: GradientVector,
    grad_variance: Option<f64>,
    beta: Option<f64>,
}

fn additive_update(rows: &[LoggedInteraction], policy: &LinearSoftmaxPolicy, mode: &BaselineMode) -> Result<BatchUpdate> {
    let beta = estimators::resolve_baseline(rows, policy, mode)?.beta;
    let gradient = estimators::beta_ips_gradient(rows, policy, beta)?;
    let grad_variance = if rows.len() >= 2 {
        Some(estimators::gradient_sample_variance(rows, policy, beta)?)
    } else {
        None
    };
    Ok(BatchUpdate {
        gradient,
        grad_variance,
        beta: Some(beta),
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Full-batch training. Supported modes: `Zero`, `FixedLambda`,
/// `GradOptimal`, `EstimatorOptimal` (closed-form `beta` recomputed on the
/// full dataset every epoch, then held constant for the gradient) and
/// `SelfNormalized`.
pub fn train_full_batch<O: ValueOracle + ?Sized>(
    dataset: &LoggedDataset,
    mode: &BaselineMode,
    config: &OptimizerConfig,
    oracle: &O,
) -> Result<TrainingReport> {
    config.validate()?;
    check_dataset("train_full_batch", dataset)?;
    if let BaselineMode::DoublyRobust(_) = mode {
        return Err(Error::Config(format!(
            "train_full_batch: `{mode}` is not a training objective; use lambda-ips=<c> for a constant reward model"
        )));
    }
    let rows = dataset.interactions();
    let mut policy = LinearSoftmaxPolicy::zeros(dataset.num_actions(), dataset.context_dim());
    let mut adam = Adam::new(policy.weights().len(), config);
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let update = match mode {
            BaselineMode::SelfNormalized => BatchUpdate {
                gradient: estimators::snips_gradient(rows, &policy)?,
                grad_variance: None,
                beta: None,
            },
            additive => additive_update(rows, &policy, additive)?,
        };
        adam.step(policy.weights_mut(), update.gradient.as_slice(), config.learning_rate_at(epoch))?;
        records.push(EpochRecord {
            epoch: epoch + 1,
            test_value: oracle.policy_value(&policy),
            grad_variance: update.grad_variance,
            beta_used: update.beta,
        });
    }
    Ok(TrainingReport {
        mode: mode.clone(),
        records,
        policy,
    })
}

/// Contiguous batch boundaries; a tail shorter than 2 rows joins the previous batch.
pub fn batch_ranges(n: usize, batch_size: BatchSize) -> Vec<std::ops::Range<usize>> {
    let size = match batch_size {
        BatchSize::Full => n,
        BatchSize::Rows(b) => b.max(1),
    };
    let mut ranges: Vec<_> = (0..n).step_by(size.max(1)).map(|s| s..(s + size).min(n)).collect();
    if ranges.len() >= 2 && ranges.last().is_some_and(|r| r.len() < 2) {
        let tail = ranges.pop().unwrap();
        ranges.last_mut().unwrap().end = tail.end;
    }
    ranges
}

/// Mini-batch training. Supported modes: `Zero` (IPS), `FixedLambda`
/// (BanditNet) and `GradOptimal` (closed-form `beta` recomputed on every batch).
/// Rows are reshuffled each epoch from the optimizer's seed.
pub fn train_mini_batch<O: ValueOracle + ?Sized>(
    dataset: &LoggedDataset,
    mode: &BaselineMode,
    config: &OptimizerConfig,
    oracle: &O,
) -> Result<TrainingReport> {
    config.validate()?;
    check_dataset("train_mini_batch", dataset)?;
    match mode {
        BaselineMode::Zero | BaselineMode::FixedLambda(_) | BaselineMode::GradOptimal => {}
        BaselineMode::SelfNormalized | BaselineMode::EstimatorOptimal => {
            return Err(Error::Config(format!(
                "train_mini_batch: `{mode}` is a ratio of dataset-wide sums and no longer decomposes over \
                 mini-batches; use batch_size = \"full\""
            )))
        }
        BaselineMode::DoublyRobust(_) => {
            return Err(Error::Config(format!(
                "train_mini_batch: `{mode}` is not a training objective; use lambda-ips=<c> for a constant reward model"
            )))
        }
    }
    let mut rows: Vec<LoggedInteraction> = dataset.interactions().to_vec();
    let ranges = batch_ranges(rows.len(), config.batch_size);
    let mut shuffle_rng = rng::stream(config.seed, purpose::SHUFFLE);
    let mut policy = LinearSoftmaxPolicy::zeros(dataset.num_actions(), dataset.context_dim());
    let mut adam = Adam::new(policy.weights().len(), config);
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        rows.shuffle(&mut shuffle_rng);
        let lr = config.learning_rate_at(epoch);
        let mut variances = Vec::with_capacity(ranges.len());
        let mut betas = Vec::with_capacity(ranges.len());
        for range in &ranges {
            let batch = &rows[range.clone()];
            let update = additive_update(batch, &policy, mode)?;
            variances.extend(update.grad_variance);
            betas.extend(update.beta);
            adam.step(policy.weights_mut(), update.gradient.as_slice(), lr)?;
        }
        records.push(EpochRecord {
            epoch: epoch + 1,
            test_value: oracle.policy_value(&policy),
            grad_variance: mean(&variances),
            beta_used: mean(&betas),
        });
    }
    Ok(TrainingReport {
        mode: mode.clone(),
        records,
        policy,
    })
}

/// Share of the logged rows held out for selecting lambda.
pub const SWEEP_VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRun {
    pub lambda: f64,
    /// SNIPS estimate of the trained policy on the held-out rows.
    pub validation_value: f64,
    pub report: TrainingReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub best_lambda: f64,
    pub runs: Vec<LambdaRun>,
}

/// BanditNet's lambda search: trains `FixedLambda(l)` mini-batch runs on the
/// leading rows, scores each final policy by SNIPS on the trailing
/// [`SWEEP_VALIDATION_FRACTION`] of rows, and returns the best lambda
/// (earliest grid point on ties).
pub fn lambda_sweep<O: ValueOracle + ?Sized>(
    dataset: &LoggedDataset,
    lambdas: &[f64],
    config: &OptimizerConfig,
    oracle: &O,
) -> Result<SweepResult> {
    if lambdas.is_empty() {
        return Err(Error::Config("lambda_sweep: empty lambda grid".into()));
    }
    if let Some(bad) = lambdas.iter().find(|l| !l.is_finite()) {
        return Err(Error::Config(format!("lambda_sweep: non-finite lambda {bad}")));
    }
    let (train, validation) = dataset.split_tail(SWEEP_VALIDATION_FRACTION);
    if train.is_empty() || validation.is_empty() {
        return Err(Error::contract(
            "lambda_sweep",
            "dataset too small to hold out a validation split",
        ));
    }
    let runs = lambdas
        .par_iter()
        .map(|&lambda| {
            let report = train_mini_batch(&train, &BaselineMode::FixedLambda(lambda), config, oracle)?;
            let validation_value = estimators::snips_value(validation.interactions(), &report.policy)?.value;
            Ok(LambdaRun {
                lambda,
                validation_value,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = runs
        .iter()
        .fold(None::<&LambdaRun>, |best, run| match best {
            Some(b) if b.validation_value >= run.validation_value => Some(b),
            _ => Some(run),
        })
        .expect("nonempty grid");
    Ok(SweepResult {
        best_lambda: best.lambda,
        runs,
    })
}

/// Trains with [`train_full_batch`] when the batch size is `full` and with
/// [`train_mini_batch`] otherwise.
pub fn train<O: ValueOracle + ?Sized>(
    dataset: &LoggedDataset,
    mode: &BaselineMode,
    config: &OptimizerConfig,
    oracle: &O,
) -> Result<TrainingReport> {
    match config.batch_size {
        BatchSize::Full => train_full_batch(dataset, mode, config, oracle),
        BatchSize::Rows(_) => train_mini_batch(dataset, mode, config, oracle),
    }
}

/// Rejects estimator and batch-size combinations that cannot be trained,
/// before any work is done.
pub fn check_trainable(mode: &BaselineMode, batch_size: BatchSize) -> Result<()> {
    match (mode, batch_size) {
        (BaselineMode::DoublyRobust(_), _) => Err(Error::Config(format!(
            "training: `{mode}` is not a training objective; use lambda-ips=<c> for a constant reward model"
        ))),
        (BaselineMode::SelfNormalized | BaselineMode::EstimatorOptimal, BatchSize::Rows(b)) => {
            Err(Error::Config(format!(
                "training: `{mode}` with batch_size = {b}: the estimator is a ratio of dataset-wide sums and \
                 no longer decomposes over mini-batches; use batch_size = \"full\""
            )))
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingExperimentConfig {
    pub estimators: Vec<BaselineMode>,
    /// Independent runs on one environment; run `r` draws its logged data
    /// and mini-batch order from seed `seed + r`.
    pub runs: usize,
    /// Size of the fixed test-context sample that scores each epoch.
    pub test_contexts: usize,
}

impl Default for TrainingExperimentConfig {
    fn default() -> Self {
        Self {
            estimators: vec![BaselineMode::Zero, BaselineMode::GradOptimal],
            runs: 8,
            test_contexts: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub seed: u64,
    pub report: TrainingReport,
}

/// Builds the environment (from `environment.seed`), the logged data of
/// `data_seed` and the environment's test oracle.
pub fn training_setup(
    environment: &EnvironmentConfig,
    data_seed: u64,
    test_contexts: usize,
) -> Result<(LoggedDataset, TestSetOracle)> {
    environment.validate()?;
    let env = simulator::generate_environment(environment)?;
    let data = simulator::simulate_logged(
        &env,
        environment.inverse_temperature,
        environment.dataset_size,
        &mut rng::stream(data_seed, purpose::LOGGED_DATA),
    );
    let oracle = TestSetOracle::new(
        &env,
        test_contexts,
        &mut rng::stream(environment.seed, purpose::TEST_CONTEXTS),
    )?;
    Ok((data, oracle))
}

/// Trains every estimator on every run. Results are ordered by run, then by
/// estimator in config order.
pub fn run_training_experiment(
    environment: &EnvironmentConfig,
    optimizer: &OptimizerConfig,
    experiment: &TrainingExperimentConfig,
    seed: u64,
) -> Result<Vec<TrainingRun>> {
    environment.validate()?;
    optimizer.validate()?;
    if experiment.runs < 1 || experiment.test_contexts < 1 || experiment.estimators.is_empty() {
        return Err(Error::Config(
            "training.runs, training.test_contexts and training.estimators must be nonempty".into(),
        ));
    }
    for mode in &experiment.estimators {
        check_trainable(mode, optimizer.batch_size)?;
    }
    let seeds: Vec<u64> = (0..experiment.runs as u64).map(|r| seed.wrapping_add(r)).collect();
    let per_run = seeds
        .par_iter()
        .map(|&seed| {
            let (data, oracle) = training_setup(environment, seed, experiment.test_contexts)?;
            let cfg = OptimizerConfig {
                seed,
                ..optimizer.clone()
            };
            experiment
                .estimators
                .par_iter()
                .map(|mode| {
                    Ok(TrainingRun {
                        seed,
                        report: train(&data, mode, &cfg, &oracle)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_run.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_environment, generate_logged_dataset, EnvironmentConfig};

    fn setup(n: usize, seed: u64) -> (LoggedDataset, TestSetOracle) {
        let cfg = EnvironmentConfig {
            context_dim: 3,
            num_actions: 4,
            inverse_temperature: 1.0,
            dataset_size: n,
            seed,
        };
        let env = generate_environment(&cfg).unwrap();
        let data = generate_logged_dataset(&env, &cfg).unwrap();
        let oracle = TestSetOracle::new(&env, 2000, &mut rng::stream(seed, purpose::TEST_CONTEXTS)).unwrap();
        (data, oracle)
    }

    fn optimizer(epochs: usize, batch: BatchSize) -> OptimizerConfig {
        OptimizerConfig {
            epochs,
            batch_size: batch,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut adam = Adam::new(1, &OptimizerConfig::default());
        let mut p = [1.0];
        adam.step(&mut p, &[0.5], 0.1).unwrap();
        assert!((p[0] - 1.1).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut adam = Adam::new(2, &OptimizerConfig::default());
        let mut p = [0.3, -0.7];
        for _ in 0..100 {
            adam.step(&mut p, &[0.0, 0.0], 0.1).unwrap();
        }
        assert_eq!(p, [0.3, -0.7]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut adam = Adam::new(1, &OptimizerConfig::default());
        let mut p = [0.0];
        assert!(matches!(adam.step(&mut p, &[f64::NAN], 0.1), Err(Error::Numeric { .. })));
    }

    #[test]
    fn learning_rate_decays_inverse_time() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            decay_rate: 0.01,
            ..OptimizerConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 0.1);
        assert!((cfg.learning_rate_at(100) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn batch_ranges_merge_short_tail() {
        assert_eq!(batch_ranges(10, BatchSize::Rows(4)), vec![0..4, 4..8, 8..10]);
        assert_eq!(batch_ranges(9, BatchSize::Rows(4)), vec![0..4, 4..9]);
        assert_eq!(batch_ranges(5, BatchSize::Full), vec![0..5]);
        assert_eq!(batch_ranges(5, BatchSize::Rows(64)), vec![0..5]);
    }

    #[test]
    fn zero_learning_rate_gives_flat_curve() {
        let (data, oracle) = setup(300, 1);
        let cfg = OptimizerConfig {
            learning_rate: 0.0,
            ..optimizer(5, BatchSize::Full)
        };
        let report = train_full_batch(&data, &BaselineMode::Zero, &cfg, &oracle).unwrap();
        let first = report.records[0].test_value;
        assert!(report.records.iter().all(|r| r.test_value == first));
        assert_eq!(report.records.len(), 5);
    }

    #[test]
    fn lambda_zero_matches_ips_exactly() {
        let (data, oracle) = setup(700, 2);
        let cfg = optimizer(4, BatchSize::Rows(128));
        let ips = train_mini_batch(&data, &BaselineMode::Zero, &cfg, &oracle).unwrap();
        let lam = train_mini_batch(&data, &BaselineMode::FixedLambda(0.0), &cfg, &oracle).unwrap();
        assert_eq!(ips.records, lam.records);
        assert_eq!(ips.policy, lam.policy);
    }

    #[test]
    fn single_batch_uses_full_dataset_baseline() {
        let (data, oracle) = setup(300, 3);
        let cfg = OptimizerConfig {
            learning_rate: 0.0,
            ..optimizer(1, BatchSize::Rows(10_000))
        };
        let report = train_mini_batch(&data, &BaselineMode::GradOptimal, &cfg, &oracle).unwrap();
        let uniform = LinearSoftmaxPolicy::zeros(4, 3);
        let full = estimators::beta_grad_optimal(data.interactions(), &uniform).unwrap();
        assert!((report.records[0].beta_used.unwrap() - full).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let (data, oracle) = setup(600, 4);
        let cfg = optimizer(3, BatchSize::Rows(100));
        let a = train_mini_batch(&data, &BaselineMode::GradOptimal, &cfg, &oracle).unwrap();
        let b = train_mini_batch(&data, &BaselineMode::GradOptimal, &cfg, &oracle).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn snips_and_estimator_optimal_are_full_batch_only() {
        let (data, oracle) = setup(100, 5);
        let cfg = optimizer(1, BatchSize::Rows(32));
        for mode in [BaselineMode::SelfNormalized, BaselineMode::EstimatorOptimal] {
            assert!(matches!(
                train_mini_batch(&data, &mode, &cfg, &oracle),
                Err(Error::Config(_))
            ));
        }
        let snips = train_full_batch(&data, &BaselineMode::SelfNormalized, &cfg, &oracle).unwrap();
        assert!(snips.records.iter().all(|r| r.grad_variance.is_none()));
    }

    #[test]
    fn optimal_baseline_never_loses_to_tested_lambdas_per_batch() {
        let (data, _) = setup(2048, 6);
        let mut r = rng::stream(6, 1);
        let w: Vec<f64> = (0..12).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        let policy = LinearSoftmaxPolicy::from_weights(4, 3, w).unwrap();
        for batch in data.interactions().chunks(256) {
            let n = batch.len() as f64;
            let rewards: Vec<f64> = batch.iter().map(|r| r.reward).collect();
            let scores = estimators::gradient_scores(batch, &policy).unwrap();
            let beta = estimators::beta_grad_optimal(batch, &policy).unwrap();
            let best_second_moment = estimators::gradient_variance_objective(&scores, &rewards, beta);
            let best = estimators::gradient_sample_variance(batch, &policy, beta).unwrap();
            let mean_reward = rewards.iter().sum::<f64>() / n;
            for lambda in [0.0, mean_reward, 0.25, 1.0] {
                assert!(best_second_moment <= estimators::gradient_variance_objective(&scores, &rewards, lambda) + 1e-12);
                // The sampled variance subtracts the squared mean gradient, so
                // it can exceed the competitor's by at most that amount.
                let mean_grad = estimators::beta_ips_gradient(batch, &policy, lambda).unwrap();
                let slack = n / (n - 1.0) * mean_grad.norm_squared();
                let other = estimators::gradient_sample_variance(batch, &policy, lambda).unwrap();
                assert!(best <= other + slack + 1e-9);
            }
        }
    }

    #[test]
    fn sweep_with_single_zero_lambda_is_ips_training() {
        let (data, oracle) = setup(500, 7);
        let cfg = optimizer(3, BatchSize::Rows(64));
        let sweep = lambda_sweep(&data, &[0.0], &cfg, &oracle).unwrap();
        let (train, _) = data.split_tail(SWEEP_VALIDATION_FRACTION);
        let ips = train_mini_batch(&train, &BaselineMode::Zero, &cfg, &oracle).unwrap();
        assert_eq!(sweep.best_lambda, 0.0);
        assert_eq!(sweep.runs[0].report.records, ips.records);
    }

    #[test]
    fn sweep_on_constant_rewards_has_zero_variance_at_matching_lambda() {
        let (data, oracle) = setup(400, 8);
        let rows = data
            .interactions()
            .iter()
            .map(|r| LoggedInteraction { reward: 0.6, ..r.clone() })
            .collect();
        let constant = LoggedDataset::new(3, 4, rows).unwrap();
        let cfg = optimizer(2, BatchSize::Rows(64));
        let sweep = lambda_sweep(&constant, &[0.0, 0.6], &cfg, &oracle).unwrap();
        let run = sweep.runs.iter().find(|r| r.lambda == 0.6).unwrap();
        assert!(run.report.records.iter().all(|r| r.grad_variance == Some(0.0)));
        let zero = sweep.runs.iter().find(|r| r.lambda == 0.0).unwrap();
        assert!(zero.report.records.iter().all(|r| r.grad_variance.unwrap() > 0.0));
    }

    #[test]
    fn sweep_selection_dominates_lambda_zero() {
        let (data, oracle) = setup(3000, 9);
        let cfg = optimizer(5, BatchSize::Rows(256));
        let mean = data.mean_reward();
        let sweep = lambda_sweep(&data, &[0.0, 0.5 * mean, mean], &cfg, &oracle).unwrap();
        let best = sweep.runs.iter().find(|r| r.lambda == sweep.best_lambda).unwrap();
        let zero = sweep.runs.iter().find(|r| r.lambda == 0.0).unwrap();
        assert!(best.validation_value >= zero.validation_value);
    }

    #[test]
    fn batch_size_config_parses_full_and_integers() {
        #[derive(Deserialize)]
        struct W {
            b: BatchSize,
        }
        assert_eq!(toml::from_str::<W>("b = \"full\"").unwrap().b, BatchSize::Full);
        assert_eq!(toml::from_str::<W>("b = 1024").unwrap().b, BatchSize::Rows(1024));
        assert!(toml::from_str::<W>("b = 0").is_err());
        assert!(toml::from_str::<W>("b = \"half\"").is_err());
    }
}
