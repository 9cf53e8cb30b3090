//! Logged bandit feedback and the linear softmax policy.
//!
//! A [`LinearSoftmaxPolicy`] holds one weight row per action and no bias term;
//! `pi(a|x) = softmax(W x)_a`. Probabilities and both gradient forms
//! (`grad pi` and `grad log pi`) are computed analytically.

use rand::Rng;

use crate::error::{Error, Result};

/// One row of logged feedback: context, chosen action, observed reward and
/// the logging policy's probability of that action.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedInteraction {
    pub context: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub propensity: f64,
}

/// An ordered collection of interactions sharing one context dimension and
/// one action space.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedDataset {
    interactions: Vec<LoggedInteraction>,
    context_dim: usize,
    num_actions: usize,
}

impl LoggedDataset {
    /// Validates every row: context length, action range, finite reward and
    /// a propensity in (0, 1].
    pub fn new(
        context_dim: usize,
        num_actions: usize,
        interactions: Vec<LoggedInteraction>,
    ) -> Result<Self> {
        if context_dim == 0 || num_actions == 0 {
            return Err(Error::contract(
                "LoggedDataset::new",
                "context_dim and num_actions must be positive",
            ));
        }
        for (i, row) in interactions.iter().enumerate() {
            if row.context.len() != context_dim {
                return Err(Error::contract(
                    "LoggedDataset::new",
                    format!(
                        "row {}: context has {} features, expected {context_dim}",
                        i + 1,
                        row.context.len()
                    ),
                ));
            }
            if row.action >= num_actions {
                return Err(Error::contract(
                    "LoggedDataset::new",
                    format!("row {}: action {} >= {num_actions}", i + 1, row.action),
                ));
            }
            if !(row.propensity > 0.0) {
                return Err(Error::CommonSupport {
                    row: i + 1,
                    propensity: row.propensity,
                });
            }
            if row.propensity > 1.0 + 1e-12 {
                return Err(Error::contract(
                    "LoggedDataset::new",
                    format!("row {}: propensity {} exceeds 1", i + 1, row.propensity),
                ));
            }
            if !row.reward.is_finite() || row.context.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(
                    "LoggedDataset::new",
                    format!("row {}: non-finite reward or context", i + 1),
                ));
            }
        }
        Ok(Self {
            interactions,
            context_dim,
            num_actions,
        })
    }

    pub fn interactions(&self) -> &[LoggedInteraction] {
        &self.interactions
    }

    pub fn into_interactions(self) -> Vec<LoggedInteraction> {
        self.interactions
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn mean_reward(&self) -> f64 {
        if self.interactions.is_empty() {
            return 0.0;
        }
        self.interactions.iter().map(|r| r.reward).sum::<f64>() / self.len() as f64
    }

    /// Re-labels the action space as `num_actions`, which must cover every logged action.
    pub fn with_num_actions(self, num_actions: usize) -> Result<Self> {
        if let Some(row) = self.interactions.iter().position(|r| r.action >= num_actions) {
            return Err(Error::contract(
                "LoggedDataset::with_num_actions",
                format!("row {}: action {} >= {num_actions}", row + 1, self.interactions[row].action),
            ));
        }
        Ok(Self { num_actions, ..self })
    }

    /// Splits off the trailing `fraction` of rows. Row order is preserved in both halves.
    pub fn split_tail(&self, fraction: f64) -> (LoggedDataset, LoggedDataset) {
        let tail = ((self.len() as f64) * fraction).round() as usize;
        let head = self.len() - tail.min(self.len());
        let make = |rows: &[LoggedInteraction]| LoggedDataset {
            interactions: rows.to_vec(),
            context_dim: self.context_dim,
            num_actions: self.num_actions,
        };
        (make(&self.interactions[..head]), make(&self.interactions[head..]))
    }
}

/// Anything that maps a context to a distribution over `num_actions` actions.
pub trait Policy {
    fn num_actions(&self) -> usize;

    fn context_dim(&self) -> usize;

    /// Writes `pi(.|context)` into `out` (length `num_actions`). The context
    /// length is assumed to have been checked by the caller.
    fn fill_probabilities(&self, context: &[f64], out: &mut [f64]);

    fn action_probabilities(&self, context: &[f64]) -> Result<Vec<f64>> {
        if context.len() != self.context_dim() {
            return Err(Error::contract(
                "action_probabilities",
                format!(
                    "context has {} features, policy expects {}",
                    context.len(),
                    self.context_dim()
                ),
            ));
        }
        let mut out = vec![0.0; self.num_actions()];
        self.fill_probabilities(context, &mut out);
        Ok(out)
    }
}

/// Numerically stable in-place softmax (max logit subtracted before exponentiation).
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in logits.iter_mut() {
        *v /= total;
    }
}

/// A `K x d` real matrix holding the derivative of a scalar objective with
/// respect to the policy weights. Stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl GradientVector {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            values: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "gradient shape mismatch");
        Self { values, rows, cols }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.values[b * self.cols..(b + 1) * self.cols]
    }

    /// Flattened row-major view.
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &GradientVector, factor: f64) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &GradientVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Linear softmax policy without bias: `pi(a|x) = softmax(W x)_a`, with
/// `W` of shape `K x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmaxPolicy {
    weights: Vec<f64>,
    num_actions: usize,
    context_dim: usize,
}

impl LinearSoftmaxPolicy {
    /// All-zero weights, i.e. the uniform policy.
    pub fn zeros(num_actions: usize, context_dim: usize) -> Self {
        Self {
            weights: vec![0.0; num_actions * context_dim],
            num_actions,
            context_dim,
        }
    }

    /// Builds a policy from row-major `K x d` weights.
    pub fn from_weights(num_actions: usize, context_dim: usize, weights: Vec<f64>) -> Result<Self> {
        if num_actions < 1 || context_dim < 1 {
            return Err(Error::contract(
                "LinearSoftmaxPolicy::from_weights",
                "num_actions and context_dim must be positive",
            ));
        }
        if weights.len() != num_actions * context_dim {
            return Err(Error::contract(
                "LinearSoftmaxPolicy::from_weights",
                format!(
                    "expected {} weights for a {num_actions}x{context_dim} policy, got {}",
                    num_actions * context_dim,
                    weights.len()
                ),
            ));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::numeric(
                "LinearSoftmaxPolicy::from_weights",
                "non-finite weight",
            ));
        }
        Ok(Self {
            weights,
            num_actions,
            context_dim,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn weight_row(&self, action: usize) -> &[f64] {
        &self.weights[action * self.context_dim..(action + 1) * self.context_dim]
    }

    /// Logits `W x`.
    pub fn logits(&self, context: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_actions];
        self.fill_logits(context, &mut out);
        out
    }

    fn fill_logits(&self, context: &[f64], out: &mut [f64]) {
        for (a, logit) in out.iter_mut().enumerate() {
            *logit = dot(self.weight_row(a), context);
        }
    }

    fn check(&self, op: &'static str, context: &[f64], action: Option<usize>) -> Result<()> {
        if context.len() != self.context_dim {
            return Err(Error::contract(
                op,
                format!(
                    "context has {} features, policy expects {}",
                    context.len(),
                    self.context_dim
                ),
            ));
        }
        if let Some(a) = action {
            if a >= self.num_actions {
                return Err(Error::contract(
                    op,
                    format!("action {a} out of range for {} actions", self.num_actions),
                ));
            }
        }
        Ok(())
    }

    /// `d pi(action|context) / dW`. Row `b` equals `pi_a (1[a=b] - pi_b) x`.
    pub fn grad_prob(&self, context: &[f64], action: usize) -> Result<GradientVector> {
        self.check("grad_prob", context, Some(action))?;
        let probs = self.action_probabilities(context)?;
        let mut grad = GradientVector::zeros(self.num_actions, self.context_dim);
        accumulate_grad_prob(&probs, context, action, 1.0, grad.as_mut_slice());
        Ok(grad)
    }

    /// `d log pi(action|context) / dW`, in the direct form `(1[a=b] - pi_b) x`.
    pub fn grad_log_prob(&self, context: &[f64], action: usize) -> Result<GradientVector> {
        self.check("grad_log_prob", context, Some(action))?;
        let probs = self.action_probabilities(context)?;
        if probs[action] < 1e-300 {
            return Err(Error::numeric(
                "grad_log_prob",
                format!("pi({action}|x) = {:e} underflows", probs[action]),
            ));
        }
        let mut grad = GradientVector::zeros(self.num_actions, self.context_dim);
        let values = grad.as_mut_slice();
        for (b, &p) in probs.iter().enumerate() {
            let coef = if b == action { 1.0 - p } else { -p };
            let row = &mut values[b * self.context_dim..(b + 1) * self.context_dim];
            for (g, &x) in row.iter_mut().zip(context) {
                *g = coef * x;
            }
        }
        Ok(grad)
    }

    /// Draws an action from `pi(.|context)` and returns it with its exact probability.
    pub fn sample_action<R: Rng + ?Sized>(&self, context: &[f64], rng: &mut R) -> Result<(usize, f64)> {
        let probs = self.action_probabilities(context)?;
        Ok(sample_from_probabilities(&probs, rng))
    }
}

impl Policy for LinearSoftmaxPolicy {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn context_dim(&self) -> usize {
        self.context_dim
    }

    fn fill_probabilities(&self, context: &[f64], out: &mut [f64]) {
        self.fill_logits(context, out);
        softmax_in_place(out);
    }
}

/// Inverse-CDF draw from a probability vector. Returns `(action, probability)`.
pub fn sample_from_probabilities<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> (usize, f64) {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    for (a, &p) in probs.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return (a, p);
        }
    }
    // u landed in the rounding gap above the last cumulative sum; take the
    // last action with nonzero mass.
    let a = probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1);
    (a, probs[a])
}

/// `out += coef * d pi(action|x) / dW` given precomputed probabilities.
pub(crate) fn accumulate_grad_prob(
    probs: &[f64],
    context: &[f64],
    action: usize,
    coef: f64,
    out: &mut [f64],
) {
    let d = context.len();
    let scaled = coef * probs[action];
    for (b, &p) in probs.iter().enumerate() {
        let c = if b == action { scaled * (1.0 - p) } else { -scaled * p };
        if c == 0.0 {
            continue;
        }
        let row = &mut out[b * d..(b + 1) * d];
        for (g, &x) in row.iter_mut().zip(context) {
            *g += c * x;
        }
    }
}

/// `||d pi(action|x) / dW||^2 = pi_a^2 ||x||^2 (1 - 2 pi_a + sum_b pi_b^2)`.
pub(crate) fn grad_prob_norm_squared(probs: &[f64], context: &[f64], action: usize) -> f64 {
    let pa = probs[action];
    let sum_sq: f64 = probs.iter().map(|p| p * p).sum();
    let x_sq: f64 = context.iter().map(|x| x * x).sum();
    // (1 - pa)^2 + sum_{b != a} pi_b^2, written to avoid cancellation when pa ~ 1.
    let spread = (1.0 - pa) * (1.0 - pa) + (sum_sq - pa * pa);
    pa * pa * x_sq * spread
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_policy(rng: &mut ChaCha8Rng, k: usize, d: usize) -> LinearSoftmaxPolicy {
        let w = (0..k * d).map(|_| StandardNormal.sample(rng)).collect();
        LinearSoftmaxPolicy::from_weights(k, d, w).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn zero_weights_are_uniform() {
        let p = LinearSoftmaxPolicy::zeros(4, 3);
        let probs = p.action_probabilities(&[1.0, -2.0, 0.3]).unwrap();
        for v in probs {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_action_softmax_matches_closed_form() {
        let p = LinearSoftmaxPolicy::from_weights(2, 1, vec![2f64.ln(), 0.0]).unwrap();
        let probs = p.action_probabilities(&[1.0]).unwrap();
        assert!((probs[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((probs[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut a = vec![0.3, -1.2, 4.0, 2.5];
        let mut b: Vec<f64> = a.iter().map(|v| v + 17.25).collect();
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let mut logits = vec![1000.0, -1000.0, 999.0];
        softmax_in_place(&mut logits);
        assert!(logits.iter().all(|p| p.is_finite() && *p >= 0.0));
        assert!((logits.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = LinearSoftmaxPolicy::zeros(3, 2);
        assert!(matches!(
            p.action_probabilities(&[1.0]),
            Err(Error::Contract { .. })
        ));
        assert!(p.grad_prob(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn grad_prob_uniform_two_actions() {
        let p = LinearSoftmaxPolicy::zeros(2, 1);
        let g = p.grad_prob(&[1.0], 0).unwrap();
        assert!((g.as_slice()[0] - 0.25).abs() < 1e-15);
        assert!((g.as_slice()[1] + 0.25).abs() < 1e-15);
        let gl = p.grad_log_prob(&[1.0], 0).unwrap();
        assert!((gl.as_slice()[0] - 0.5).abs() < 1e-15);
        assert!((gl.as_slice()[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn grad_prob_sums_to_zero_over_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = random_policy(&mut rng, 5, 3);
            let x = random_vec(&mut rng, 3);
            let mut total = GradientVector::zeros(5, 3);
            for a in 0..5 {
                total.add_scaled(&p.grad_prob(&x, a).unwrap(), 1.0);
            }
            assert!(total.as_slice().iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn score_identity_and_chain_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = random_policy(&mut rng, 4, 3);
            let x = random_vec(&mut rng, 3);
            let probs = p.action_probabilities(&x).unwrap();
            let mut expectation = GradientVector::zeros(4, 3);
            for a in 0..4 {
                let gl = p.grad_log_prob(&x, a).unwrap();
                let g = p.grad_prob(&x, a).unwrap();
                for (gp, glp) in g.as_slice().iter().zip(gl.as_slice()) {
                    assert!((gp - probs[a] * glp).abs() < 1e-12);
                }
                expectation.add_scaled(&gl, probs[a]);
            }
            assert!(expectation.as_slice().iter().all(|v| v.abs() < 1e-10));
        }
    }

    /// Central finite differences of `pi(a|x)` and `log pi(a|x)` in each weight.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for trial in 0..100 {
            let (k, d) = (3 + trial % 3, 2 + trial % 2);
            let p = random_policy(&mut rng, k, d);
            let x = random_vec(&mut rng, d);
            let a = trial % k;
            let g = p.grad_prob(&x, a).unwrap();
            let gl = p.grad_log_prob(&x, a).unwrap();
            for j in 0..k * d {
                let mut plus = p.clone();
                plus.weights_mut()[j] += h;
                let mut minus = p.clone();
                minus.weights_mut()[j] -= h;
                let pp = plus.action_probabilities(&x).unwrap()[a];
                let pm = minus.action_probabilities(&x).unwrap()[a];
                assert!((g.as_slice()[j] - (pp - pm) / (2.0 * h)).abs() < 1e-6);
                assert!((gl.as_slice()[j] - (pp.ln() - pm.ln()) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn norm_squared_shortcut_matches_full_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let p = random_policy(&mut rng, 6, 4);
            let x = random_vec(&mut rng, 4);
            let probs = p.action_probabilities(&x).unwrap();
            for a in 0..6 {
                let full = p.grad_prob(&x, a).unwrap().norm_squared();
                let fast = grad_prob_norm_squared(&probs, &x, a);
                assert!((full - fast).abs() <= 1e-12 * full.max(1e-300) + 1e-300);
            }
        }
    }

    #[test]
    fn underflowing_probability_is_a_numeric_error() {
        let p = LinearSoftmaxPolicy::from_weights(2, 1, vec![0.0, 800.0]).unwrap();
        assert!(matches!(
            p.grad_log_prob(&[1.0], 0),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let p = LinearSoftmaxPolicy::zeros(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut counts = [0usize; 4];
        for _ in 0..40_000 {
            let (a, prop) = p.sample_action(&[0.5, -0.5], &mut rng).unwrap();
            assert_eq!(prop, 0.25);
            counts[a] += 1;
        }
        for c in counts {
            let f = c as f64 / 40_000.0;
            assert!((0.235..=0.265).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn degenerate_policy_always_picks_the_dominant_action() {
        let p = LinearSoftmaxPolicy::from_weights(3, 1, vec![0.0, 900.0, -50.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..100 {
            let (a, prop) = p.sample_action(&[1.0], &mut rng).unwrap();
            assert_eq!(a, 1);
            assert!((prop - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = random_policy(&mut rng, 5, 2);
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..200)
                .map(|_| p.sample_action(&[0.1, 0.9], &mut r).unwrap().0)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(99), draw(99));
    }

    #[test]
    fn dataset_rejects_zero_propensity() {
        let row = LoggedInteraction {
            context: vec![1.0],
            action: 0,
            reward: 1.0,
            propensity: 0.0,
        };
        assert!(matches!(
            LoggedDataset::new(1, 2, vec![row]),
            Err(Error::CommonSupport { row: 1, .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn probabilities_lie_on_the_simplex(
                w in proptest::collection::vec(-20.0f64..20.0, 12),
                x in proptest::collection::vec(-5.0f64..5.0, 3),
            ) {
                let p = LinearSoftmaxPolicy::from_weights(4, 3, w).unwrap();
                let probs = p.action_probabilities(&x).unwrap();
                prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(probs.iter().all(|&v| v > 0.0));
            }
        }
    }
}
