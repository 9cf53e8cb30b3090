//! Off-policy value and gradient estimators with additive baseline corrections.
//!
//! Notation used throughout: for a logged row `(x, a, r, p0)` and target
//! policy `pi`, the importance weight is `w = pi(a|x) / p0` and the
//! per-row gradient factor is `G = grad pi(a|x) / p0`.
//!
//! * IPS: `mean(w r)`
//! * SNIPS: `sum(w r) / sum(w)`
//! * beta-IPS: `beta + mean(w (r - beta))`, unbiased for any fixed `beta`
//! * lambda-IPS (BanditNet objective): `mean(w (r - lambda))`
//! * DR: `mean(w (r - rhat(a, x)) + sum_a' pi(a'|x) rhat(a', x))`
//!
//! The beta-IPS, lambda-IPS and constant-model DR gradients coincide when
//! `beta = lambda = rhat`. Two closed-form baselines pick `beta`: one
//! minimizing the variance of the value estimate, one minimizing the
//! variance of the gradient estimate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::policy::{accumulate_grad_prob, GradientVector, LinearSoftmaxPolicy, LoggedDataset, LoggedInteraction, Policy};

/// Denominators of closed-form baselines below this magnitude (after dividing
/// by the sample count) are treated as degenerate.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

/// Reward model used by the doubly robust estimator.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardModel {
    /// `rhat(a, x) = c` for every action and context.
    Constant(f64),
    /// `rhat(a, x) = values[a]`, independent of the context.
    Tabular { action_values: Vec<f64> },
}

impl RewardModel {
    /// Per-action mean of logged rewards; actions never logged get the overall mean.
    pub fn fit_tabular(dataset: &LoggedDataset) -> Self {
        let k = dataset.num_actions();
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for row in dataset.interactions() {
            sums[row.action] += row.reward;
            counts[row.action] += 1;
        }
        let overall = dataset.mean_reward();
        let action_values = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { overall })
            .collect();
        RewardModel::Tabular { action_values }
    }

    pub fn predict(&self, action: usize) -> f64 {
        match self {
            RewardModel::Constant(c) => *c,
            RewardModel::Tabular { action_values } => action_values[action],
        }
    }

    fn validate(&self, num_actions: usize) -> Result<()> {
        match self {
            RewardModel::Constant(c) if !c.is_finite() => {
                Err(Error::contract("dr_value", "constant reward model must be finite"))
            }
            RewardModel::Tabular { action_values } if action_values.len() != num_actions => {
                Err(Error::contract(
                    "dr_value",
                    format!(
                        "tabular reward model covers {} actions, policy has {num_actions}",
                        action_values.len()
                    ),
                ))
            }
            RewardModel::Tabular { action_values } if action_values.iter().any(|v| !v.is_finite()) => {
                Err(Error::contract("dr_value", "tabular reward model has non-finite entries"))
            }
            _ => Ok(()),
        }
    }
}

/// How the additive baseline `beta` is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselineMode {
    /// `beta = 0`: plain IPS.
    Zero,
    /// A fixed translation `lambda`, as in BanditNet.
    FixedLambda(f64),
    /// Closed-form `beta` minimizing gradient variance, recomputed per batch.
    GradOptimal,
    /// Closed-form `beta` minimizing the variance of the value estimate.
    EstimatorOptimal,
    /// SNIPS, the multiplicative control variate.
    SelfNormalized,
    /// DR with the given reward model.
    DoublyRobust(RewardModel),
}

impl BaselineMode {
    /// Short identifier used in configs and result files.
    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaselineMode::Zero => write!(f, "ips"),
            BaselineMode::FixedLambda(l) => write!(f, "lambda-ips={l}"),
            BaselineMode::GradOptimal => write!(f, "beta-ips-grad"),
            BaselineMode::EstimatorOptimal => write!(f, "beta-ips"),
            BaselineMode::SelfNormalized => write!(f, "snips"),
            BaselineMode::DoublyRobust(RewardModel::Constant(c)) => write!(f, "dr={c}"),
            BaselineMode::DoublyRobust(RewardModel::Tabular { .. }) => write!(f, "dr"),
        }
    }
}

impl Serialize for BaselineMode {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BaselineMode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for BaselineMode {
    type Err = Error;

    /// Accepts `ips`, `snips`, `beta-ips`, `beta-ips-grad`, `lambda-ips=<l>`
    /// (alias `banditnet=<l>`), `dr` (tabular model, fitted per dataset) and `dr=<c>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, arg) = match s.split_once('=') {
            Some((h, a)) => (h.trim(), Some(a.trim())),
            None => (s, None),
        };
        let number = |a: Option<&str>| -> Result<f64> {
            let a = a.ok_or_else(|| Error::Config(format!("estimator `{s}` needs a value, e.g. `{head}=0.5`")))?;
            let v: f64 = a
                .parse()
                .map_err(|_| Error::Config(format!("estimator `{s}`: `{a}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::Config(format!("estimator `{s}`: value must be finite")));
            }
            Ok(v)
        };
        match (head, arg) {
            ("ips", None) => Ok(BaselineMode::Zero),
            ("snips", None) => Ok(BaselineMode::SelfNormalized),
            ("beta-ips", None) => Ok(BaselineMode::EstimatorOptimal),
            ("beta-ips-grad", None) => Ok(BaselineMode::GradOptimal),
            ("lambda-ips" | "banditnet", a) => Ok(BaselineMode::FixedLambda(number(a)?)),
            ("dr", None) => Ok(BaselineMode::DoublyRobust(RewardModel::Tabular {
                action_values: Vec::new(),
            })),
            ("dr", a) => Ok(BaselineMode::DoublyRobust(RewardModel::Constant(number(a)?))),
            _ => Err(Error::Config(format!(
                "unknown estimator `{s}` (expected ips, snips, beta-ips, beta-ips-grad, lambda-ips=<l>, dr, dr=<c>)"
            ))),
        }
    }
}

/// A value estimate together with the quantities it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateBreakdown {
    pub value: f64,
    /// Per-row importance weights `w_i`.
    pub weights: Vec<f64>,
    /// `S = mean(w_i)`.
    pub normalizer: f64,
    /// The additive baseline, for estimators that use one.
    pub beta_used: Option<f64>,
    pub sample_count: usize,
    /// True when a closed-form baseline was degenerate and `beta = 0` was used instead.
    pub fell_back: bool,
}

fn check_rows<P: Policy + ?Sized>(op: &'static str, rows: &[LoggedInteraction], policy: &P) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::contract(op, "empty dataset"));
    }
    let (k, d) = (policy.num_actions(), policy.context_dim());
    for (i, row) in rows.iter().enumerate() {
        if row.context.len() != d || row.action >= k {
            return Err(Error::contract(
                op,
                format!(
                    "row {}: context dim {} / action {} incompatible with a {k}x{d} policy",
                    i + 1,
                    row.context.len(),
                    row.action
                ),
            ));
        }
        if !(row.propensity > 0.0) {
            return Err(Error::CommonSupport {
                row: i + 1,
                propensity: row.propensity,
            });
        }
    }
    Ok(())
}

/// Runs `f(row, pi(.|x), w)` on each row after validating the batch.
fn for_each_row<P: Policy + ?Sized>(
    op: &'static str,
    rows: &[LoggedInteraction],
    policy: &P,
    mut f: impl FnMut(&LoggedInteraction, &[f64], f64),
) -> Result<()> {
    check_rows(op, rows, policy)?;
    let mut probs = vec![0.0; policy.num_actions()];
    for row in rows {
        policy.fill_probabilities(&row.context, &mut probs);
        let w = probs[row.action] / row.propensity;
        f(row, &probs, w);
    }
    Ok(())
}

/// Importance weights `pi(a_i|x_i) / p0_i`.
pub fn importance_weights<P: Policy + ?Sized>(rows: &[LoggedInteraction], policy: &P) -> Result<Vec<f64>> {
    let mut weights = Vec::with_capacity(rows.len());
    for_each_row("importance_weights", rows, policy, |_, _, w| weights.push(w))?;
    Ok(weights)
}

fn breakdown(value: f64, weights: Vec<f64>, beta_used: Option<f64>) -> EstimateBreakdown {
    let n = weights.len();
    let normalizer = weights.iter().sum::<f64>() / n as f64;
    EstimateBreakdown {
        value,
        weights,
        normalizer,
        beta_used,
        sample_count: n,
        fell_back: false,
    }
}

fn mean_weighted_reward(rows: &[LoggedInteraction], weights: &[f64]) -> f64 {
    rows.iter().zip(weights).map(|(r, w)| w * r.reward).sum::<f64>() / rows.len() as f64
}

pub fn ips_value<P: Policy + ?Sized>(rows: &[LoggedInteraction], policy: &P) -> Result<EstimateBreakdown> {
    let weights = importance_weights(rows, policy)?;
    let value = mean_weighted_reward(rows, &weights);
    Ok(breakdown(value, weights, None))
}

pub fn snips_value<P: Policy + ?Sized>(rows: &[LoggedInteraction], policy: &P) -> Result<EstimateBreakdown> {
    let weights = importance_weights(rows, policy)?;
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateSupport { op: "snips_value" });
    }
    let value = rows.iter().zip(&weights).map(|(r, w)| w * r.reward).sum::<f64>() / total;
    Ok(breakdown(value, weights, None))
}

/// `beta + mean(w (r - beta))`.
pub fn beta_ips_value<P: Policy + ?Sized>(
    rows: &[LoggedInteraction],
    policy: &P,
    beta: f64,
) -> Result<EstimateBreakdown> {
    if !beta.is_finite() {
        return Err(Error::contract("beta_ips_value", "beta must be finite"));
    }
    let weights = importance_weights(rows, policy)?;
    let n = rows.len() as f64;
    let value = beta + rows.iter().zip(&weights).map(|(r, w)| w * (r.reward - beta)).sum::<f64>() / n;
    Ok(breakdown(value, weights, Some(beta)))
}

/// BanditNet's translated objective `mean(w (r - lambda))`. This is a
/// training objective, not a value estimate: it is offset by `-lambda * S`.
pub fn lambda_ips_value<P: Policy + ?Sized>(
    rows: &[LoggedInteraction],
    policy: &P,
    lambda: f64,
) -> Result<EstimateBreakdown> {
    if !lambda.is_finite() {
        return Err(Error::contract("lambda_ips_value", "lambda must be finite"));
    }
    let weights = importance_weights(rows, policy)?;
    let value = mean_weighted_reward(rows, &weights) - lambda * weights.iter().sum::<f64>() / rows.len() as f64;
    Ok(breakdown(value, weights, Some(lambda)))
}

pub fn dr_value<P: Policy + ?Sized>(
    rows: &[LoggedInteraction],
    policy: &P,
    model: &RewardModel,
) -> Result<EstimateBreakdown> {
    model.validate(policy.num_actions())?;
    let mut weights = Vec::with_capacity(rows.len());
    let mut total = 0.0;
    for_each_row("dr_value", rows, policy, |row, probs, w| {
        let direct: f64 = match model {
            RewardModel::Constant(c) => *c,
            RewardModel::Tabular { action_values } => probs.iter().zip(action_values).map(|(p, v)| p * v).sum(),
        };
        total += w * (row.reward - model.predict(row.action)) + direct;
        weights.push(w);
    })?;
    let value = total / rows.len() as f64;
    let beta_used = match model {
        RewardModel::Constant(c) => Some(*c),
        RewardModel::Tabular { .. } => None,
    };
    Ok(breakdown(value, weights, beta_used))
}

/// `sum(c_i r_i) / sum(c_i)`, the common shape of every closed-form baseline.
fn weighted_baseline(op: &'static str, coefficients: &[f64], rewards: &[f64]) -> Result<f64> {
    let n = coefficients.len() as f64;
    let numerator: f64 = coefficients.iter().zip(rewards).map(|(c, r)| c * r).sum();
    let denominator: f64 = coefficients.iter().sum();
    if !(denominator.abs() / n >= DEGENERATE_DENOMINATOR) {
        return Err(Error::DegenerateBaseline {
            op,
            denominator: denominator / n,
        });
    }
    Ok(numerator / denominator)
}

/// Plug-in estimate of the value-variance-minimizing baseline:
/// `sum((w^2 - w) r) / sum(w^2 - w)`.
pub fn beta_estimator_optimal_from_weights(weights: &[f64], rewards: &[f64]) -> Result<f64> {
    if weights.is_empty() || weights.len() != rewards.len() {
        return Err(Error::contract(
            "beta_estimator_optimal",
            "weights and rewards must be nonempty and of equal length",
        ));
    }
    let coefficients: Vec<f64> = weights.iter().map(|w| w * w - w).collect();
    weighted_baseline("beta_estimator_optimal", &coefficients, rewards)
}

pub fn beta_estimator_optimal<P: Policy + ?Sized>(rows: &[LoggedInteraction], policy: &P) -> Result<f64> {
    let weights = importance_weights(rows, policy)?;
    let rewards: Vec<f64> = rows.iter().map(|r| r.reward).collect();
    beta_estimator_optimal_from_weights(&weights, &rewards)
}

/// Per-row gradient scores `g_i = ||grad pi(a_i|x_i)||^2 / p0_i^2`.
pub fn gradient_scores(rows: &[LoggedInteraction], policy: &LinearSoftmaxPolicy) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(rows.len());
    for_each_row("gradient_scores", rows, policy, |row, probs, _| {
        let norm_sq = crate::policy::grad_prob_norm_squared(probs, &row.context, row.action);
        scores.push(norm_sq / (row.propensity * row.propensity));
    })?;
    Ok(scores)
}

/// `sum(g_i r_i) / sum(g_i)` for precomputed scores `g_i >= 0`.
pub fn beta_grad_optimal_from_scores(scores: &[f64], rewards: &[f64]) -> Result<f64> {
    if scores.is_empty() || scores.len() != rewards.len() {
        return Err(Error::contract(
            "beta_grad_optimal",
            "scores and rewards must be nonempty and of equal length",
        ));
    }
    if scores.iter().all(|&g| g <= 0.0) {
        return Err(Error::DegenerateBaseline {
            op: "beta_grad_optimal",
            denominator: 0.0,
        });
    }
    weighted_baseline("beta_grad_optimal", scores, rewards)
}

/// Plug-in estimate of the gradient-variance-minimizing baseline, computed
/// from `grad pi` (not `grad log pi`) on the batch it will correct.
pub fn beta_grad_optimal(rows: &[LoggedInteraction], policy: &LinearSoftmaxPolicy) -> Result<f64> {
    let scores = gradient_scores(rows, policy)?;
    let rewards: Vec<f64> = rows.iter().map(|r| r.reward).collect();
    beta_grad_optimal_from_scores(&scores, &rewards)
}

/// On-policy optimal baseline `sum(||grad log pi||^2 r) / sum(||grad log pi||^2)`.
/// Only meaningful when `rows` were sampled from `policy` itself.
pub fn onpolicy_beta_optimal(rows: &[LoggedInteraction], policy: &LinearSoftmaxPolicy) -> Result<f64> {
    let mut norms = Vec::with_capacity(rows.len());
    for_each_row("onpolicy_beta_optimal", rows, policy, |row, probs, _| {
        // ||(e_a - pi) x^T||^2 = ||x||^2 ||e_a - pi||^2
        let x_sq: f64 = row.context.iter().map(|v| v * v).sum();
        let pa = probs[row.action];
        let sum_sq: f64 = probs.iter().map(|p| p * p).sum();
        norms.push(x_sq * ((1.0 - pa) * (1.0 - pa) + sum_sq - pa * pa));
    })?;
    let rewards: Vec<f64> = rows.iter().map(|r| r.reward).collect();
    if norms.iter().all(|&g| g <= 0.0) {
        return Err(Error::DegenerateBaseline {
            op: "onpolicy_beta_optimal",
            denominator: 0.0,
        });
    }
    weighted_baseline("onpolicy_beta_optimal", &norms, &rewards)
}

/// Sums `coef(row, w) * G_i` over the batch, divided by `divisor`.
fn accumulate_gradient(
    op: &'static str,
    rows: &[LoggedInteraction],
    policy: &LinearSoftmaxPolicy,
    divisor: f64,
    mut coef: impl FnMut(&LoggedInteraction) -> f64,
) -> Result<GradientVector> {
    let mut grad = GradientVector::zeros(policy.num_actions(), policy.context_dim());
    let out = grad.as_mut_slice();
    for_each_row(op, rows, policy, |row, probs, _| {
        let c = coef(row) / row.propensity;
        accumulate_grad_prob(probs, &row.context, row.action, c, out);
    })?;
    grad.scale(1.0 / divisor);
    Ok(grad)
}

/// `mean(G_i r_i)`.
pub fn ips_gradient(rows: &[LoggedInteraction], policy: &LinearSoftmaxPolicy) -> Result<GradientVector> {
    accumulate_gradient("ips_gradient", rows, policy, rows.len() as f64, |r| r.reward)
}

/// `mean(G_i (r_i - beta))`.
pub fn beta_ips_gradient(
    rows: &[LoggedInteraction],
    policy: &LinearSoftmaxPolicy,
    beta: f64,
) -> Result<GradientVector> {
    if !beta.is_finite() {
        return Err(Error::contract("beta_ips_gradient", "beta must be finite"));
    }
    accumulate_gradient("beta_ips_gradient", rows, policy, rows.len() as f64, |r| r.reward - beta)
}

/// Gradient of the BanditNet objective, computed as the IPS gradient minus
/// `lambda` times the gradient of the mean importance weight.
pub fn lambda_ips_gradient(
    rows: &[LoggedInteraction],
    policy: &LinearSoftmaxPolicy,
    lambda: f64,
) -> Result<GradientVector> {
    if !lambda.is_finite() {
        return Err(Error::contract("lambda_ips_gradient", "lambda must be finite"));
    }
    let mut grad = ips_gradient(rows, policy)?;
    let weight_grad = accumulate_gradient("lambda_ips_gradient", rows, policy, rows.len() as f64, |_| 1.0)?;
    grad.add_scaled(&weight_grad, -lambda);
    Ok(grad)
}

/// Gradient of the DR estimate: the importance-weighted residual term plus
/// the gradient of the direct term `sum_a' pi(a'|x) rhat(a', x)`.
pub fn dr_gradient(
    rows: &[LoggedInteraction],
    policy: &LinearSoftmaxPolicy,
    model: &RewardModel,
) -> Result<GradientVector> {
    model.validate(policy.num_actions())?;
    let mut grad = GradientVector::zeros(policy.num_actions(), policy.context_dim());
    let out = grad.as_mut_slice();
    for_each_row("dr_gradient", rows, policy, |row, probs, _| {
        let residual = row.reward - model.predict(row.action);
        accumulate_grad_prob(probs, &row.context, row.action, residual / row.propensity, out);
        for a in 0..probs.len() {
            let v = model.predict(a);
            if v != 0.0 {
                accumulate_grad_prob(probs, &row.context, a, v, out);
            }
        }
    })?;
    grad.scale(1.0 / rows.len() as f64);
    Ok(grad)
}

/// SNIPS gradient over the whole dataset,
/// `[(sum G r)(sum w) - (sum w r)(sum G)] / (sum w)^2`,
/// evaluated as `sum G_i (r_i - V_snips) / sum w` (same quantity, no cancellation
/// between two large products).
pub fn snips_gradient(rows: &[LoggedInteraction], policy: &LinearSoftmaxPolicy) -> Result<GradientVector> {
    let weights = importance_weights(rows, policy)?;
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateSupport { op: "snips_gradient" });
    }
    let snips = rows.iter().zip(&weights).map(|(r, w)| w * r.reward).sum::<f64>() / total;
    accumulate_gradient("snips_gradient", rows, policy, total, |r| r.reward - snips)
}

/// Sum over parameter components of the unbiased sample variance (divisor
/// `n - 1`) of the per-row terms `G_i (r_i - beta)`.
pub fn gradient_sample_variance(
    rows: &[LoggedInteraction],
    policy: &LinearSoftmaxPolicy,
    beta: f64,
) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::contract(
            "gradient_sample_variance",
            format!("needs at least 2 rows, got {}", rows.len()),
        ));
    }
    let mean = beta_ips_gradient(rows, policy, beta)?;
    let mut term = vec![0.0; mean.as_slice().len()];
    let mut total = 0.0;
    for_each_row("gradient_sample_variance", rows, policy, |row, probs, _| {
        term.iter_mut().for_each(|v| *v = 0.0);
        accumulate_grad_prob(probs, &row.context, row.action, (row.reward - beta) / row.propensity, &mut term);
        total += term
            .iter()
            .zip(mean.as_slice())
            .map(|(t, m)| (t - m) * (t - m))
            .sum::<f64>();
    })?;
    Ok(total / (rows.len() - 1) as f64)
}

/// `mean(g_i (r_i - beta)^2)`: the part of the gradient variance that depends
/// on `beta`. Minimized exactly by [`beta_grad_optimal`].
pub fn gradient_variance_objective(scores: &[f64], rewards: &[f64], beta: f64) -> f64 {
    scores
        .iter()
        .zip(rewards)
        .map(|(g, r)| g * (r - beta) * (r - beta))
        .sum::<f64>()
        / scores.len() as f64
}

/// `mean((w_i^2 - w_i) (r_i - beta)^2)`: the beta-dependent part of the
/// variance of a beta-IPS estimate once `E[w] = 1` is used. Its stationary
/// point is [`beta_estimator_optimal`]; it is convex when `sum(w^2 - w) > 0`.
pub fn estimator_variance_objective(weights: &[f64], rewards: &[f64], beta: f64) -> f64 {
    weights
        .iter()
        .zip(rewards)
        .map(|(w, r)| (w * w - w) * (r - beta) * (r - beta))
        .sum::<f64>()
        / weights.len() as f64
}

/// Unbiased sample variance (divisor `n - 1`) of replicated estimates.
pub fn estimator_sample_variance(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::contract(
            "estimator_sample_variance",
            format!("needs at least 2 values, got {}", values.len()),
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
}

/// Resolved additive baseline for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedBaseline {
    pub beta: f64,
    pub fell_back: bool,
}

/// Picks `beta` for the additive modes. Degenerate closed forms fall back to
/// `beta = 0` with a warning.
pub fn resolve_baseline(
    rows: &[LoggedInteraction],
    policy: &LinearSoftmaxPolicy,
    mode: &BaselineMode,
) -> Result<ResolvedBaseline> {
    let solved = match mode {
        BaselineMode::Zero => Ok(0.0),
        BaselineMode::FixedLambda(l) => Ok(*l),
        BaselineMode::DoublyRobust(RewardModel::Constant(c)) => Ok(*c),
        BaselineMode::GradOptimal => beta_grad_optimal(rows, policy),
        BaselineMode::EstimatorOptimal => beta_estimator_optimal(rows, policy),
        other => {
            return Err(Error::contract(
                "resolve_baseline",
                format!("`{other}` is not an additive-baseline estimator"),
            ))
        }
    };
    fallback(solved)
}

fn fallback(solved: Result<f64>) -> Result<ResolvedBaseline> {
    match solved {
        Ok(beta) => Ok(ResolvedBaseline { beta, fell_back: false }),
        Err(e @ Error::DegenerateBaseline { .. }) => {
            log::warn!("{e}; falling back to beta = 0");
            Ok(ResolvedBaseline {
                beta: 0.0,
                fell_back: true,
            })
        }
        Err(e) => Err(e),
    }
}

/// Applies the estimator selected by `mode` to `rows`.
///
/// `FixedLambda(l)` is evaluated as the unbiased beta-IPS estimate with
/// `beta = l` (BanditNet's objective itself is not a value estimate).
/// `DoublyRobust` with an empty tabular model fits the per-action means of
/// `rows` first.
pub fn estimate(
    rows: &[LoggedInteraction],
    policy: &LinearSoftmaxPolicy,
    mode: &BaselineMode,
) -> Result<EstimateBreakdown> {
    match mode {
        BaselineMode::SelfNormalized => snips_value(rows, policy),
        BaselineMode::DoublyRobust(RewardModel::Tabular { action_values }) if action_values.is_empty() => {
            let data = LoggedDataset::new(policy.context_dim(), policy.num_actions(), rows.to_vec())?;
            dr_value(rows, policy, &RewardModel::fit_tabular(&data))
        }
        BaselineMode::DoublyRobust(model) => dr_value(rows, policy, model),
        BaselineMode::Zero => ips_value(rows, policy).map(|mut b| {
            b.beta_used = Some(0.0);
            b
        }),
        additive => {
            let resolved = resolve_baseline(rows, policy, additive)?;
            let mut out = beta_ips_value(rows, policy, resolved.beta)?;
            out.fell_back = resolved.fell_back;
            Ok(out)
        }
    }
}

/// Like [`estimate`] for policies without an analytic gradient. The
/// gradient-optimal baseline is unavailable here.
pub fn estimate_value<P: Policy + ?Sized>(
    rows: &[LoggedInteraction],
    policy: &P,
    mode: &BaselineMode,
) -> Result<EstimateBreakdown> {
    match mode {
        BaselineMode::Zero => ips_value(rows, policy),
        BaselineMode::SelfNormalized => snips_value(rows, policy),
        BaselineMode::FixedLambda(l) => beta_ips_value(rows, policy, *l),
        BaselineMode::DoublyRobust(RewardModel::Tabular { action_values }) if action_values.is_empty() => {
            let data = LoggedDataset::new(policy.context_dim(), policy.num_actions(), rows.to_vec())?;
            dr_value(rows, policy, &RewardModel::fit_tabular(&data))
        }
        BaselineMode::DoublyRobust(model) => dr_value(rows, policy, model),
        BaselineMode::EstimatorOptimal => {
            let resolved = fallback(beta_estimator_optimal(rows, policy))?;
            let mut out = beta_ips_value(rows, policy, resolved.beta)?;
            out.fell_back = resolved.fell_back;
            Ok(out)
        }
        BaselineMode::GradOptimal => Err(Error::contract(
            "estimate_value",
            "beta-ips-grad needs a differentiable target policy",
        )),
    }
}
