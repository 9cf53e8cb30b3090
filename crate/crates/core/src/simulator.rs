//! Synthetic contextual-bandit environment.
//!
//! Contexts are standard normal. The expected reward of action `a` in context
//! `x` is `q(x, a) = logistic(phi_a . x + b_a)`, and observed rewards are
//! Bernoulli draws from it. The logging policy is a softmax over `tau * q(x, .)`:
//! `tau > 0` favours high-reward actions, `tau < 0` favours low-reward ones,
//! `tau = 0` is uniform.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{dot, sample_from_probabilities, softmax_in_place, LoggedDataset, LoggedInteraction, Policy};
use crate::rng::{self, purpose, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub context_dim: usize,
    pub num_actions: usize,
    pub inverse_temperature: f64,
    pub dataset_size: usize,
    /// Seeds the reward function. [`generate_logged_dataset`] also draws
    /// its rows from this seed; experiment drivers use their own data seeds.
    pub seed: u64,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            context_dim: 5,
            num_actions: 10,
            inverse_temperature: 1.0,
            dataset_size: 10_000,
            seed: 0,
        }
    }
}

impl EnvironmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_dim < 1 {
            return Err(Error::Config("environment.context_dim must be >= 1".into()));
        }
        if self.num_actions < 2 {
            return Err(Error::Config("environment.num_actions must be >= 2".into()));
        }
        if self.dataset_size < 1 {
            return Err(Error::Config("environment.dataset_size must be >= 1".into()));
        }
        if !self.inverse_temperature.is_finite() {
            return Err(Error::Config("environment.inverse_temperature must be finite".into()));
        }
        Ok(())
    }
}

/// Ground-truth reward surface: per-action embeddings and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    action_embeddings: Vec<f64>,
    action_biases: Vec<f64>,
    num_actions: usize,
    context_dim: usize,
}

impl Environment {
    /// `embeddings` is row-major `K x d`.
    pub fn from_parts(
        num_actions: usize,
        context_dim: usize,
        embeddings: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if embeddings.len() != num_actions * context_dim || biases.len() != num_actions {
            return Err(Error::contract(
                "Environment::from_parts",
                format!("expected {num_actions}x{context_dim} embeddings and {num_actions} biases"),
            ));
        }
        Ok(Self {
            action_embeddings: embeddings,
            action_biases: biases,
            num_actions,
            context_dim,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn action_embeddings(&self) -> &[f64] {
        &self.action_embeddings
    }

    pub fn action_biases(&self) -> &[f64] {
        &self.action_biases
    }

    pub fn expected_reward(&self, context: &[f64], action: usize) -> f64 {
        let row = &self.action_embeddings[action * self.context_dim..(action + 1) * self.context_dim];
        logistic(dot(row, context) + self.action_biases[action])
    }

    pub fn fill_expected_rewards(&self, context: &[f64], out: &mut [f64]) {
        for (a, q) in out.iter_mut().enumerate() {
            *q = self.expected_reward(context, a);
        }
    }

    pub fn expected_rewards(&self, context: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_actions];
        self.fill_expected_rewards(context, &mut out);
        out
    }

    pub fn logging_policy(&self, inverse_temperature: f64) -> LoggingPolicy<'_> {
        LoggingPolicy {
            env: self,
            inverse_temperature,
        }
    }

    pub fn sample_context<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.context_dim).map(|_| StandardNormal.sample(rng)).collect()
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Softmax over `tau * q(x, .)`.
#[derive(Debug, Clone, Copy)]
pub struct LoggingPolicy<'a> {
    env: &'a Environment,
    inverse_temperature: f64,
}

impl Policy for LoggingPolicy<'_> {
    fn num_actions(&self) -> usize {
        self.env.num_actions
    }

    fn context_dim(&self) -> usize {
        self.env.context_dim
    }

    fn fill_probabilities(&self, context: &[f64], out: &mut [f64]) {
        self.env.fill_expected_rewards(context, out);
        for v in out.iter_mut() {
            *v *= self.inverse_temperature;
        }
        softmax_in_place(out);
    }
}

/// Draws `phi ~ N(0, 1/sqrt(d))` and `b ~ N(0, 0.5)` from the environment stream of `config.seed`.
pub fn generate_environment(config: &EnvironmentConfig) -> Result<Environment> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, purpose::ENVIRONMENT);
    let (k, d) = (config.num_actions, config.context_dim);
    let phi = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
    let bias = Normal::new(0.0, 0.5).expect("valid normal");
    let embeddings = (0..k * d).map(|_| phi.sample(&mut rng)).collect();
    let biases = (0..k).map(|_| bias.sample(&mut rng)).collect();
    Environment::from_parts(k, d, embeddings, biases)
}

pub fn logging_policy_probs(env: &Environment, context: &[f64], inverse_temperature: f64) -> Result<Vec<f64>> {
    env.logging_policy(inverse_temperature).action_probabilities(context)
}

/// Logs `config.dataset_size` interactions from the logging stream of `config.seed`.
pub fn generate_logged_dataset(env: &Environment, config: &EnvironmentConfig) -> Result<LoggedDataset> {
    config.validate()?;
    if config.num_actions != env.num_actions || config.context_dim != env.context_dim {
        return Err(Error::contract(
            "generate_logged_dataset",
            "config shape differs from the environment",
        ));
    }
    let mut rng = rng::stream(config.seed, purpose::LOGGED_DATA);
    Ok(simulate_logged(env, config.inverse_temperature, config.dataset_size, &mut rng))
}

/// Logs `n` interactions under the `tau`-softmax logging policy using `rng`.
pub fn simulate_logged<R: Rng + ?Sized>(
    env: &Environment,
    inverse_temperature: f64,
    n: usize,
    rng: &mut R,
) -> LoggedDataset {
    let logging = env.logging_policy(inverse_temperature);
    let mut probs = vec![0.0; env.num_actions];
    let interactions = (0..n)
        .map(|_| {
            let context = env.sample_context(rng);
            logging.fill_probabilities(&context, &mut probs);
            let (action, propensity) = sample_from_probabilities(&probs, rng);
            let q = env.expected_reward(&context, action);
            let reward = if rng.random::<f64>() < q { 1.0 } else { 0.0 };
            LoggedInteraction {
                context,
                action,
                reward,
                propensity,
            }
        })
        .collect();
    LoggedDataset::new(env.context_dim, env.num_actions, interactions)
        .expect("simulated rows satisfy the dataset invariants")
}

/// Monte-Carlo over fresh contexts with the exact sum over actions:
/// mean over `x` of `sum_a pi(a|x) q(x, a)`.
pub fn true_policy_value<P: Policy + ?Sized, R: Rng + ?Sized>(
    env: &Environment,
    policy: &P,
    num_contexts: usize,
    rng: &mut R,
) -> Result<f64> {
    if num_contexts < 1 {
        return Err(Error::contract("true_policy_value", "num_contexts must be >= 1"));
    }
    check_policy_shape("true_policy_value", env, policy)?;
    let k = env.num_actions;
    let mut probs = vec![0.0; k];
    let mut q = vec![0.0; k];
    let mut total = 0.0;
    for _ in 0..num_contexts {
        let x = env.sample_context(rng);
        policy.fill_probabilities(&x, &mut probs);
        env.fill_expected_rewards(&x, &mut q);
        total += dot(&probs, &q);
    }
    Ok(total / num_contexts as f64)
}

fn check_policy_shape<P: Policy + ?Sized>(op: &'static str, env: &Environment, policy: &P) -> Result<()> {
    if policy.num_actions() != env.num_actions || policy.context_dim() != env.context_dim {
        return Err(Error::contract(
            op,
            format!(
                "policy is {}x{}, environment is {}x{}",
                policy.num_actions(),
                policy.context_dim(),
                env.num_actions,
                env.context_dim
            ),
        ));
    }
    Ok(())
}

/// A fixed sample of test contexts with cached expected rewards, used to
/// score policies during training. Same contexts for every call, so learning
/// curves are free of oracle noise between epochs.
#[derive(Debug, Clone)]
pub struct TestSetOracle {
    contexts: Vec<f64>,
    expected_rewards: Vec<f64>,
    num_actions: usize,
    context_dim: usize,
}

impl TestSetOracle {
    pub fn new(env: &Environment, num_contexts: usize, rng: &mut StreamRng) -> Result<Self> {
        if num_contexts < 1 {
            return Err(Error::contract("TestSetOracle::new", "num_contexts must be >= 1"));
        }
        let (k, d) = (env.num_actions, env.context_dim);
        let mut contexts = Vec::with_capacity(num_contexts * d);
        let mut expected_rewards = Vec::with_capacity(num_contexts * k);
        for _ in 0..num_contexts {
            let x = env.sample_context(rng);
            expected_rewards.extend(env.expected_rewards(&x));
            contexts.extend(x);
        }
        Ok(Self {
            contexts,
            expected_rewards,
            num_actions: k,
            context_dim: d,
        })
    }

    pub fn len(&self) -> usize {
        self.contexts.len() / self.context_dim
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    /// Mean over the stored contexts of `sum_a pi(a|x) q(x, a)`.
    pub fn value<P: Policy + ?Sized>(&self, policy: &P) -> f64 {
        debug_assert_eq!(policy.num_actions(), self.num_actions);
        let mut probs = vec![0.0; self.num_actions];
        let mut total = 0.0;
        for (x, q) in self
            .contexts
            .chunks_exact(self.context_dim)
            .zip(self.expected_rewards.chunks_exact(self.num_actions))
        {
            policy.fill_probabilities(x, &mut probs);
            total += dot(&probs, q);
        }
        total / self.len() as f64
    }
}
