//! Replicated off-policy evaluation experiments.
//!
//! For every `(K, tau)` cell the harness builds an environment, trains one
//! fixed target policy on logged data, computes its true value once with a
//! large Monte-Carlo sample, and then, for each dataset size, draws
//! independent logged datasets and applies every estimator to each of them.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{self, BaselineMode, EstimateBreakdown};
use crate::learning::{self, BatchSize, OptimizerConfig};
use crate::policy::{LinearSoftmaxPolicy, LoggedDataset, LoggedInteraction, Policy};
use crate::rng::{self, purpose, stream_key};
use crate::simulator::{self, Environment, EnvironmentConfig, LoggingPolicy};

fn default_target_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        epochs: 20,
        batch_size: BatchSize::Rows(1024),
        ..OptimizerConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpeExperimentConfig {
    pub action_space_sizes: Vec<usize>,
    pub inverse_temperatures: Vec<f64>,
    pub dataset_sizes: Vec<usize>,
    pub replications: usize,
    pub estimators: Vec<BaselineMode>,
    pub context_dim: usize,
    /// Fresh contexts used for each target policy's true value.
    pub true_value_contexts: usize,
    /// Rows logged to train the target policy of each cell.
    pub target_training_size: usize,
    pub target_optimizer: OptimizerConfig,
    /// Set from the top-level seed in configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for OpeExperimentConfig {
    fn default() -> Self {
        Self {
            action_space_sizes: vec![10, 100],
            inverse_temperatures: vec![-5.0, -1.0, 1.0, 5.0],
            dataset_sizes: vec![100, 1_000, 10_000],
            replications: 100,
            estimators: vec![
                BaselineMode::Zero,
                BaselineMode::SelfNormalized,
                BaselineMode::DoublyRobust(estimators::RewardModel::Tabular {
                    action_values: Vec::new(),
                }),
                BaselineMode::EstimatorOptimal,
            ],
            context_dim: 5,
            true_value_contexts: 1_000_000,
            target_training_size: 10_000,
            target_optimizer: default_target_optimizer(),
            seed: 0,
        }
    }
}

impl OpeExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(Error::Config("ope.replications must be >= 2".into()));
        }
        if self.action_space_sizes.is_empty() || self.action_space_sizes.iter().any(|&k| k < 2) {
            return Err(Error::Config("ope.action_space_sizes must be nonempty with every K >= 2".into()));
        }
        if self.inverse_temperatures.is_empty() || self.inverse_temperatures.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("ope.inverse_temperatures must be nonempty and finite".into()));
        }
        if self.dataset_sizes.is_empty() || self.dataset_sizes.contains(&0) {
            return Err(Error::Config("ope.dataset_sizes must be nonempty and positive".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("ope.estimators must be nonempty".into()));
        }
        if self.context_dim < 1 || self.true_value_contexts < 1 || self.target_training_size < 1 {
            return Err(Error::Config(
                "ope.context_dim, true_value_contexts and target_training_size must be >= 1".into(),
            ));
        }
        // Zero epochs is allowed here and yields the uniform target.
        OptimizerConfig {
            epochs: self.target_optimizer.epochs.max(1),
            ..self.target_optimizer.clone()
        }
        .validate()
    }

    pub fn cell_count(&self) -> usize {
        self.action_space_sizes.len() * self.inverse_temperatures.len() * self.dataset_sizes.len()
    }
}

/// Summary of one estimator over the replications of one `(K, tau, n)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpeResultRow {
    pub estimator: String,
    pub k_actions: usize,
    pub inv_temperature: f64,
    pub n_logged: usize,
    /// Mean of `(estimate - true_value)^2`.
    pub mse: f64,
    pub bias_squared: f64,
    /// Sample variance across replications (divisor `R - 1`).
    pub variance: f64,
    pub mean_estimate: f64,
    pub true_value: f64,
    pub replications: usize,
    /// Replications in which a closed-form baseline was degenerate and fell back to `beta = 0`.
    pub fallbacks: usize,
}

/// MSE, squared bias and sample variance of replicated estimates.
/// `mse == bias_squared + variance * (R - 1) / R` up to rounding.
pub fn summarize(estimates: &[f64], true_value: f64) -> Result<(f64, f64, f64, f64)> {
    let variance = estimators::estimator_sample_variance(estimates)?;
    let r = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / r;
    let mse = estimates.iter().map(|v| (v - true_value) * (v - true_value)).sum::<f64>() / r;
    let bias = mean - true_value;
    Ok((mse, bias * bias, variance, mean))
}

pub fn relative_absolute_error(estimate: f64, reference_value: f64) -> Result<f64> {
    if reference_value == 0.0 || !reference_value.is_finite() {
        return Err(Error::contract(
            "relative_absolute_error",
            format!("reference value must be finite and nonzero, got {reference_value}"),
        ));
    }
    Ok((estimate - reference_value).abs() / reference_value.abs())
}

/// A policy that can be the target of an evaluation experiment.
pub trait EvaluationTarget: Policy + Sync {
    fn estimate(&self, rows: &[LoggedInteraction], mode: &BaselineMode) -> Result<EstimateBreakdown>;
}

impl EvaluationTarget for LinearSoftmaxPolicy {
    fn estimate(&self, rows: &[LoggedInteraction], mode: &BaselineMode) -> Result<EstimateBreakdown> {
        estimators::estimate(rows, self, mode)
    }
}

impl EvaluationTarget for LoggingPolicy<'_> {
    fn estimate(&self, rows: &[LoggedInteraction], mode: &BaselineMode) -> Result<EstimateBreakdown> {
        estimators::estimate_value(rows, self, mode)
    }
}

/// Trains the fixed evaluation target: mini-batch IPS from zero weights.
pub fn train_target_policy(dataset: &LoggedDataset, config: &OptimizerConfig) -> Result<LinearSoftmaxPolicy> {
    if dataset.is_empty() {
        return Err(Error::contract("train_target_policy", "empty dataset"));
    }
    if config.epochs == 0 {
        return Ok(LinearSoftmaxPolicy::zeros(dataset.num_actions(), dataset.context_dim()));
    }
    let unscored = |_: &LinearSoftmaxPolicy| f64::NAN;
    Ok(learning::train_mini_batch(dataset, &BaselineMode::Zero, config, &unscored)?.policy)
}

/// Replicates estimation for one `(env, tau, target)` over every dataset size.
/// Replication `i` at size `n` always sees the same logged data, whatever the
/// thread count or evaluation order.
#[allow(clippy::too_many_arguments)]
pub fn replicate_cell<T: EvaluationTarget + ?Sized>(
    env: &Environment,
    inverse_temperature: f64,
    target: &T,
    true_value: f64,
    dataset_sizes: &[usize],
    replications: usize,
    modes: &[BaselineMode],
    seed: u64,
) -> Result<Vec<OpeResultRow>> {
    let k = env.num_actions() as u64;
    let tau_bits = inverse_temperature.to_bits();
    let mut rows = Vec::with_capacity(dataset_sizes.len() * modes.len());
    for &n in dataset_sizes {
        // replications x estimators
        let per_rep = (0..replications)
            .into_par_iter()
            .map(|rep| {
                let key = stream_key(&[purpose::REPLICATION, k, tau_bits, n as u64, rep as u64]);
                let data = simulator::simulate_logged(env, inverse_temperature, n, &mut rng::stream(seed, key));
                modes
                    .iter()
                    .map(|mode| target.estimate(data.interactions(), mode).map(|b| (b.value, b.fell_back)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for (m, mode) in modes.iter().enumerate() {
            let values: Vec<f64> = per_rep.iter().map(|r| r[m].0).collect();
            let fallbacks = per_rep.iter().filter(|r| r[m].1).count();
            let (mse, bias_squared, variance, mean_estimate) = summarize(&values, true_value)?;
            rows.push(OpeResultRow {
                estimator: mode.to_string(),
                k_actions: env.num_actions(),
                inv_temperature: inverse_temperature,
                n_logged: n,
                mse,
                bias_squared,
                variance,
                mean_estimate,
                true_value,
                replications,
                fallbacks,
            });
        }
    }
    Ok(rows)
}

/// Environment of a grid column: depends on `(seed, K)` only, so every
/// temperature in a column shares one reward surface.
pub fn cell_environment(config: &OpeExperimentConfig, num_actions: usize) -> Result<Environment> {
    simulator::generate_environment(&EnvironmentConfig {
        context_dim: config.context_dim,
        num_actions,
        inverse_temperature: 0.0,
        dataset_size: 1,
        seed: stream_key(&[config.seed, num_actions as u64]),
    })
}

/// Target policy and its true value for one `(K, tau)` cell.
pub fn cell_target(config: &OpeExperimentConfig, env: &Environment, inverse_temperature: f64) -> Result<(LinearSoftmaxPolicy, f64)> {
    let k = env.num_actions() as u64;
    let tau_bits = inverse_temperature.to_bits();
    let mut train_rng = rng::stream(config.seed, stream_key(&[purpose::TARGET_TRAINING, k, tau_bits]));
    let train = simulator::simulate_logged(env, inverse_temperature, config.target_training_size, &mut train_rng);
    let target = train_target_policy(&train, &config.target_optimizer)?;
    let mut value_rng = rng::stream(config.seed, stream_key(&[purpose::TRUE_VALUE, k, tau_bits]));
    let true_value = simulator::true_policy_value(env, &target, config.true_value_contexts, &mut value_rng)?;
    Ok((target, true_value))
}

/// Runs the full `(K, tau, n)` grid. Rows are ordered by `K`, then `tau`,
/// then `n`, then estimator, in config order.
pub fn run_ope_experiment(config: &OpeExperimentConfig) -> Result<Vec<OpeResultRow>> {
    config.validate()?;
    let cells: Vec<(usize, f64)> = config
        .action_space_sizes
        .iter()
        .flat_map(|&k| config.inverse_temperatures.iter().map(move |&t| (k, t)))
        .collect();
    let per_cell = cells
        .par_iter()
        .map(|&(k, tau)| {
            let env = cell_environment(config, k)?;
            let (target, true_value) = cell_target(config, &env, tau)?;
            replicate_cell(
                &env,
                tau,
                &target,
                true_value,
                &config.dataset_sizes,
                config.replications,
                &config.estimators,
                config.seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_cell.into_iter().flatten().collect())
}

/// One estimator applied to a logged file.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedFileEstimate {
    pub estimator: String,
    pub value: f64,
    pub relative_absolute_error: f64,
    pub beta_used: Option<f64>,
}

/// Applies each estimator to a logged CSV file and scores it against an
/// externally supplied on-policy reference value.
pub fn evaluate_on_logged_file(
    path: &Path,
    policy: &LinearSoftmaxPolicy,
    modes: &[BaselineMode],
    reference_value: f64,
) -> Result<Vec<LoggedFileEstimate>> {
    let data = crate::io::read_dataset(path)?;
    evaluate_on_dataset(&data, policy, modes, reference_value)
}

pub fn evaluate_on_dataset(
    data: &LoggedDataset,
    policy: &LinearSoftmaxPolicy,
    modes: &[BaselineMode],
    reference_value: f64,
) -> Result<Vec<LoggedFileEstimate>> {
    if data.context_dim() != policy.context_dim() || data.num_actions() > policy.num_actions() {
        return Err(Error::contract(
            "evaluate_on_logged_file",
            format!(
                "logged data has d = {} and actions up to {}, policy is {}x{}",
                data.context_dim(),
                data.num_actions(),
                policy.num_actions(),
                policy.context_dim()
            ),
        ));
    }
    let data = data.clone().with_num_actions(policy.num_actions())?;
    modes
        .iter()
        .map(|mode| {
            let b = estimators::estimate(data.interactions(), policy, mode)?;
            Ok(LoggedFileEstimate {
                estimator: mode.to_string(),
                value: b.value,
                relative_absolute_error: relative_absolute_error(b.value, reference_value)?,
                beta_used: b.beta_used,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> OpeExperimentConfig {
        OpeExperimentConfig {
            action_space_sizes: vec![4],
            inverse_temperatures: vec![1.0],
            dataset_sizes: vec![50, 200],
            replications: 20,
            context_dim: 3,
            true_value_contexts: 20_000,
            target_training_size: 2_000,
            target_optimizer: OptimizerConfig {
                epochs: 3,
                batch_size: BatchSize::Rows(256),
                ..OptimizerConfig::default()
            },
            seed: 5,
            ..OpeExperimentConfig::default()
        }
    }

    #[test]
    fn relative_error_examples() {
        assert!((relative_absolute_error(0.11, 0.10).unwrap() - 0.1).abs() < 1e-12);
        assert!((relative_absolute_error(0.09, 0.10).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(relative_absolute_error(0.3, 0.3).unwrap(), 0.0);
        assert!(relative_absolute_error(0.3, 0.0).is_err());
    }

    #[test]
    fn zero_epochs_give_uniform_target() {
        let cfg = small_config();
        let env = cell_environment(&cfg, 4).unwrap();
        let data = simulator::simulate_logged(&env, 1.0, 100, &mut rng::stream(1, 1));
        let opt = OptimizerConfig { epochs: 0, ..OptimizerConfig::default() };
        assert_eq!(train_target_policy(&data, &opt).unwrap(), LinearSoftmaxPolicy::zeros(4, 3));
    }

    #[test]
    fn trained_targets_beat_uniform() {
        for seed in 0..10 {
            let cfg = OpeExperimentConfig {
                seed,
                target_training_size: 5_000,
                target_optimizer: default_target_optimizer(),
                ..small_config()
            };
            let env = cell_environment(&cfg, 10).unwrap();
            let (target, value) = cell_target(&cfg, &env, 1.0).unwrap();
            let uniform = LinearSoftmaxPolicy::zeros(10, 3);
            let flat = simulator::true_policy_value(&env, &uniform, cfg.true_value_contexts, &mut rng::stream(seed, 1)).unwrap();
            assert!(value >= flat, "seed {seed}: {value} < {flat}");
            assert_ne!(target, uniform);
        }
    }

    #[test]
    fn experiment_rows_satisfy_mse_decomposition() {
        let cfg = small_config();
        let rows = run_ope_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), cfg.cell_count() * cfg.estimators.len());
        for row in &rows {
            let r = row.replications as f64;
            let rebuilt = row.bias_squared + row.variance * (r - 1.0) / r;
            assert!((row.mse - rebuilt).abs() <= 1e-9, "{row:?}");
        }
    }

    #[test]
    fn experiment_is_deterministic() {
        let cfg = small_config();
        assert_eq!(run_ope_experiment(&cfg).unwrap(), run_ope_experiment(&cfg).unwrap());
    }

    #[test]
    fn logging_target_makes_ips_the_plain_mean() {
        let cfg = small_config();
        let env = cell_environment(&cfg, 4).unwrap();
        let logging = env.logging_policy(1.0);
        let truth = simulator::true_policy_value(&env, &logging, 50_000, &mut rng::stream(3, 3)).unwrap();
        let modes = [BaselineMode::Zero, BaselineMode::FixedLambda(0.0)];
        let rows = replicate_cell(&env, 1.0, &logging, truth, &[100], 30, &modes, 9).unwrap();
        // Recompute the plain reward mean over the same replicated datasets.
        let means: Vec<f64> = (0..30)
            .map(|rep| {
                let key = stream_key(&[purpose::REPLICATION, 4, 1f64.to_bits(), 100, rep]);
                simulator::simulate_logged(&env, 1.0, 100, &mut rng::stream(9, key)).mean_reward()
            })
            .collect();
        let (mse, ..) = summarize(&means, truth).unwrap();
        assert!((rows[0].mse - mse).abs() < 1e-15);
        assert!((rows[1].mse - mse).abs() < 1e-15);
    }

    #[test]
    fn unbiased_estimators_concentrate_with_more_data() {
        let cfg = OpeExperimentConfig {
            dataset_sizes: vec![100, 400, 1600],
            replications: 60,
            estimators: vec![BaselineMode::Zero, BaselineMode::FixedLambda(0.5)],
            ..small_config()
        };
        let rows = run_ope_experiment(&cfg).unwrap();
        for mode in ["ips", "lambda-ips=0.5"] {
            let mse: Vec<f64> = rows.iter().filter(|r| r.estimator == mode).map(|r| r.mse).collect();
            for pair in mse.windows(2) {
                // Squared deviations of a near-normal estimate have standard
                // deviation about sqrt(2) * mse.
                let se = (2.0f64).sqrt() * pair[1] / (cfg.replications as f64).sqrt();
                assert!(pair[1] <= pair[0] + 2.0 * se, "{mode}: {mse:?}");
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_config();
        cfg.replications = 1;
        assert!(matches!(run_ope_experiment(&cfg), Err(Error::Config(_))));
        let mut cfg = small_config();
        cfg.dataset_sizes = vec![];
        assert!(matches!(run_ope_experiment(&cfg), Err(Error::Config(_))));
    }
}
