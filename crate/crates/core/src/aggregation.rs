//! Online expert aggregation over the probability simplex.
//!
//! Two weighting rules are provided: a uniform baseline that never moves, and
//! a second-order exponential-weights rule ("BOA") that multiplies each
//! expert's weight by `exp(-eta * r * (1 + eta * r))` on its instantaneous
//! regret `r = loss_k - sum_k w_k loss_k` and renormalizes. The adaptive
//! variant maintains one learning rate per expert from the running range and
//! the running sum of squared regrets.
//!
//! Weights are accumulated in the log domain and normalized with a max shift,
//! so hundreds of one-sided steps cannot underflow a weight to zero.
//!
//! [`run_online`] drives the rule through the sequential forecasting protocol
//! with no look-ahead: predict with yesterday's weights, reveal the target,
//! score, then update. Updates there consume losses linearized at the mixture
//! prediction, which makes the rule compete with the best fixed point of the
//! whole simplex rather than the best single expert; reported losses are the
//! true ones.

use crate::loss::{LossError, LossKind};
use serde::{Deserialize, Serialize};
use std::io;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("expert set must be non-empty")]
    EmptyExpertSet,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("weight vector invalid: {0}")]
    InvalidWeights(String),
    #[error("non-finite value in losses or predictions at index {0}")]
    NonFinite(usize),
    #[error("fixed learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("step called with rule {got}, state was built for {expected}")]
    RuleMismatch { expected: &'static str, got: &'static str },
    #[error("weights degenerated to a non-normalizable state")]
    DegenerateWeights,
    #[error("online run needs at least one step")]
    EmptyStream,
    #[error("expert stream {index} has length {got}, target has length {expected}")]
    RaggedStreams { index: usize, expected: usize, got: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("csv write failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("write failed: {0}")]
    Io(#[from] io::Error),
}

/// Tolerance on `|sum(w) - 1|` accepted by [`WeightVector::new`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-12;

/// Learning-rate cap used before any nonzero regret has been observed.
pub const INITIAL_ETA_CAP: f64 = 1.0;

/// Point on the probability simplex: non-negative entries summing to one
/// within [`SIMPLEX_TOLERANCE`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self, AggregationError> {
        if weights.is_empty() {
            return Err(AggregationError::EmptyExpertSet);
        }
        let mut sum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(AggregationError::NonFinite(i));
            }
            if w < 0.0 {
                return Err(AggregationError::InvalidWeights(format!(
                    "negative weight {w} at index {i}"
                )));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(AggregationError::InvalidWeights(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
        Ok(WeightVector(weights))
    }

    pub fn uniform(n_experts: usize) -> Result<Self, AggregationError> {
        if n_experts == 0 {
            return Err(AggregationError::EmptyExpertSet);
        }
        Ok(WeightVector(vec![1.0 / n_experts as f64; n_experts]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false // length >= 1 by construction
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Weighted sum of `values` under these weights.
    pub fn dot(&self, values: &[f64]) -> Result<f64, AggregationError> {
        if values.len() != self.0.len() {
            return Err(AggregationError::DimensionMismatch {
                expected: self.0.len(),
                got: values.len(),
            });
        }
        let mut acc = 0.0;
        for (i, (&w, &v)) in self.0.iter().zip(values).enumerate() {
            if !v.is_finite() {
                return Err(AggregationError::NonFinite(i));
            }
            acc += w * v;
        }
        Ok(acc)
    }
}

impl std::ops::Index<usize> for WeightVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Weighting rule selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Constant 1/K weights.
    Uni,
    /// Second-order multiplicative update with a single fixed learning rate.
    BoaFixed { eta: f64 },
    /// Same update with per-expert learning rates
    /// `min(1/(2 max|r|), sqrt(ln K / (1 + sum r^2)))`.
    BoaAdaptive,
}

impl Rule {
    fn name(&self) -> &'static str {
        match self {
            Rule::Uni => "uni",
            Rule::BoaFixed { .. } => "boa_fixed",
            Rule::BoaAdaptive => "boa_adaptive",
        }
    }
}

/// Everything observable about one step of the online protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Weighted combination of the expert values seen this step, formed with
    /// the pre-update weights.
    pub mixture_value: f64,
    pub expert_losses: Vec<f64>,
    pub mixture_loss: f64,
    /// Regrets that drove the weight update.
    pub instantaneous_regrets: Vec<f64>,
    pub weights_after: WeightVector,
}

/// Mutable state of an aggregation rule over K experts.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationState {
    rule: Rule,
    /// Log weights kept normalized so that logsumexp(log_weights) == 0.
    log_weights: Vec<f64>,
    weights: WeightVector,
    step: usize,
    /// Per-expert running sum of squared instantaneous regrets.
    sq_regret: Vec<f64>,
    /// Per-expert running max of |instantaneous regret|.
    max_abs_regret: Vec<f64>,
    ln_k: f64,
}

impl AggregationState {
    pub fn new(rule: Rule, n_experts: usize) -> Result<Self, AggregationError> {
        if n_experts == 0 {
            return Err(AggregationError::EmptyExpertSet);
        }
        if let Rule::BoaFixed { eta } = rule {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(AggregationError::InvalidLearningRate(eta));
            }
        }
        let weights = WeightVector::uniform(n_experts)?;
        Ok(AggregationState {
            rule,
            log_weights: vec![-(n_experts as f64).ln(); n_experts],
            weights,
            step: 0,
            sq_regret: vec![0.0; n_experts],
            max_abs_regret: vec![0.0; n_experts],
            ln_k: (n_experts as f64).ln(),
        })
    }

    pub fn rule(&self) -> Rule {
        self.rule
    }

    pub fn n_experts(&self) -> usize {
        self.weights.len()
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// Current weights (the ones the next prediction would use).
    pub fn weights(&self) -> &WeightVector {
        &self.weights
    }

    /// Learning rates the adaptive rule would apply given the regret
    /// statistics accumulated so far.
    pub fn adaptive_learning_rates(&self) -> Vec<f64> {
        (0..self.n_experts())
            .map(|k| self.eta_for(self.max_abs_regret[k], self.sq_regret[k]))
            .collect()
    }

    fn eta_for(&self, max_abs: f64, sq_sum: f64) -> f64 {
        let cap = if max_abs > 0.0 { 1.0 / (2.0 * max_abs) } else { INITIAL_ETA_CAP };
        cap.min((self.ln_k / (1.0 + sq_sum)).sqrt())
    }

    /// Apply one update from per-expert losses. Regret statistics are folded
    /// in before the adaptive learning rate is read, so the current step's
    /// regret participates in its own rate.
    pub fn update(&mut self, losses: &[f64]) -> Result<StepOutcome, AggregationError> {
        let k = self.n_experts();
        if losses.len() != k {
            return Err(AggregationError::DimensionMismatch { expected: k, got: losses.len() });
        }
        let mixture = self.weights.dot(losses)?;
        let regrets: Vec<f64> = losses.iter().map(|&l| l - mixture).collect();
        for (i, &r) in regrets.iter().enumerate() {
            self.sq_regret[i] += r * r;
            let abs = r.abs();
            if abs > self.max_abs_regret[i] {
                self.max_abs_regret[i] = abs;
            }
        }
        match self.rule {
            Rule::Uni => {}
            Rule::BoaFixed { eta } => self.apply_multiplicative(&regrets, |_| eta)?,
            Rule::BoaAdaptive => {
                let etas: Vec<f64> = (0..k)
                    .map(|i| self.eta_for(self.max_abs_regret[i], self.sq_regret[i]))
                    .collect();
                self.apply_multiplicative(&regrets, |i| etas[i])?;
            }
        }
        self.step += 1;
        Ok(StepOutcome {
            mixture_value: mixture,
            expert_losses: losses.to_vec(),
            mixture_loss: mixture,
            instantaneous_regrets: regrets,
            weights_after: self.weights.clone(),
        })
    }

    fn apply_multiplicative(
        &mut self,
        regrets: &[f64],
        eta: impl Fn(usize) -> f64,
    ) -> Result<(), AggregationError> {
        for (i, &r) in regrets.iter().enumerate() {
            let e = eta(i);
            self.log_weights[i] -= e * r * (1.0 + e * r);
        }
        // Max-shift normalization keeps the log weights representable no
        // matter how one-sided the regrets get.
        let max = self.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(AggregationError::DegenerateWeights);
        }
        let sum_shifted: f64 = self.log_weights.iter().map(|&lw| (lw - max).exp()).sum();
        if !(sum_shifted > 0.0 && sum_shifted.is_finite()) {
            return Err(AggregationError::DegenerateWeights);
        }
        let lse = max + sum_shifted.ln();
        for lw in &mut self.log_weights {
            *lw -= lse;
        }
        let mut w: Vec<f64> = self.log_weights.iter().map(|&lw| lw.exp()).collect();
        let total: f64 = w.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(AggregationError::DegenerateWeights);
        }
        for wi in &mut w {
            *wi /= total;
        }
        self.weights = WeightVector::new(w)?;
        Ok(())
    }
}

/// Uniform 1/K weights.
pub fn uni_weights(n_experts: usize) -> Result<WeightVector, AggregationError> {
    WeightVector::uniform(n_experts)
}

/// Weighted combination of expert values.
pub fn mixture_predict(weights: &WeightVector, values: &[f64]) -> Result<f64, AggregationError> {
    weights.dot(values)
}

/// One fixed-rate update. The state must have been built with
/// [`Rule::BoaFixed`].
pub fn boa_step_fixed(
    state: &mut AggregationState,
    expert_losses: &[f64],
) -> Result<StepOutcome, AggregationError> {
    match state.rule {
        Rule::BoaFixed { .. } => state.update(expert_losses),
        other => Err(AggregationError::RuleMismatch { expected: "boa_fixed", got: other.name() }),
    }
}

/// One adaptive-rate update. The state must have been built with
/// [`Rule::BoaAdaptive`].
pub fn boa_step_adaptive(
    state: &mut AggregationState,
    expert_losses: &[f64],
) -> Result<StepOutcome, AggregationError> {
    match state.rule {
        Rule::BoaAdaptive => state.update(expert_losses),
        other => {
            Err(AggregationError::RuleMismatch { expected: "boa_adaptive", got: other.name() })
        }
    }
}

/// Result of driving a rule through a forecast/target stream.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineRun {
    /// Weights in force before the first step.
    pub initial_weights: WeightVector,
    pub outcomes: Vec<StepOutcome>,
    pub final_state: AggregationState,
}

impl OnlineRun {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    /// Mixture predictions, one per step.
    pub fn mixture_series(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.mixture_value).collect()
    }

    /// Mean of the true mixture losses over the run.
    pub fn average_mixture_loss(&self) -> f64 {
        let total: f64 = self.outcomes.iter().map(|o| o.mixture_loss).sum();
        total / self.outcomes.len() as f64
    }

    /// Mean true mixture loss over the first `t` steps.
    pub fn average_mixture_loss_prefix(&self, t: usize) -> f64 {
        let t = t.min(self.outcomes.len()).max(1);
        let total: f64 = self.outcomes[..t].iter().map(|o| o.mixture_loss).sum();
        total / t as f64
    }

    /// Weights used to form the prediction at step `t`.
    pub fn weights_applied(&self, t: usize) -> &WeightVector {
        if t == 0 {
            &self.initial_weights
        } else {
            &self.outcomes[t - 1].weights_after
        }
    }
}

fn validate_streams(
    expert_streams: &[Vec<f64>],
    targets: &[f64],
) -> Result<(), AggregationError> {
    if expert_streams.is_empty() {
        return Err(AggregationError::EmptyExpertSet);
    }
    if targets.is_empty() {
        return Err(AggregationError::EmptyStream);
    }
    for (i, s) in expert_streams.iter().enumerate() {
        if s.len() != targets.len() {
            return Err(AggregationError::RaggedStreams {
                index: i,
                expected: targets.len(),
                got: s.len(),
            });
        }
    }
    Ok(())
}

/// Continue an existing state through the sequential protocol. Each step:
/// predict with the current weights, reveal the target, score experts and
/// mixture with `loss`, update weights from the linearized losses.
pub fn run_online_from(
    mut state: AggregationState,
    expert_streams: &[Vec<f64>],
    targets: &[f64],
    loss: LossKind,
) -> Result<OnlineRun, AggregationError> {
    validate_streams(expert_streams, targets)?;
    if expert_streams.len() != state.n_experts() {
        return Err(AggregationError::DimensionMismatch {
            expected: state.n_experts(),
            got: expert_streams.len(),
        });
    }
    let initial_weights = state.weights().clone();
    let k = expert_streams.len();
    let mut outcomes = Vec::with_capacity(targets.len());
    let mut values = vec![0.0; k];
    let mut linearized = vec![0.0; k];
    for (t, &y) in targets.iter().enumerate() {
        for i in 0..k {
            values[i] = expert_streams[i][t];
        }
        let mixture_value = state.weights().dot(&values)?;
        let expert_losses: Vec<f64> =
            values.iter().map(|&v| loss.evaluate(y, v)).collect::<Result<_, _>>()?;
        let mixture_loss = loss.evaluate(y, mixture_value)?;
        let grad = loss.prediction_gradient(y, mixture_value)?;
        for i in 0..k {
            linearized[i] = grad * values[i];
        }
        let update = state.update(&linearized)?;
        outcomes.push(StepOutcome {
            mixture_value,
            expert_losses,
            mixture_loss,
            instantaneous_regrets: update.instantaneous_regrets,
            weights_after: update.weights_after,
        });
    }
    Ok(OnlineRun { initial_weights, outcomes, final_state: state })
}

/// Run a rule from fresh uniform weights over full streams.
pub fn run_online(
    rule: Rule,
    expert_streams: &[Vec<f64>],
    targets: &[f64],
    loss: LossKind,
) -> Result<OnlineRun, AggregationError> {
    let state = AggregationState::new(rule, expert_streams.len().max(1))?;
    run_online_from(state, expert_streams, targets, loss)
}

/// Consume a pretraining segment and hand back the terminal state, ready to
/// be continued with [`run_online_from`]. Continuing it over the remaining
/// steps reproduces the uninterrupted run exactly.
pub fn warm_start(
    rule: Rule,
    pretrain_streams: &[Vec<f64>],
    pretrain_targets: &[f64],
    loss: LossKind,
) -> Result<AggregationState, AggregationError> {
    Ok(run_online(rule, pretrain_streams, pretrain_targets, loss)?.final_state)
}

/// Write one row per (date, expert) with the weights applied at that date.
pub fn write_weights_csv<W: io::Write>(
    out: W,
    dates: &[crate::data::Month],
    expert_names: &[String],
    run: &OnlineRun,
) -> Result<(), AggregationError> {
    if dates.len() != run.len() {
        return Err(AggregationError::DimensionMismatch {
            expected: run.len(),
            got: dates.len(),
        });
    }
    if expert_names.len() != run.initial_weights.len() {
        return Err(AggregationError::DimensionMismatch {
            expected: run.initial_weights.len(),
            got: expert_names.len(),
        });
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "expert_name", "weight"])?;
    for (t, date) in dates.iter().enumerate() {
        let weights = run.weights_applied(t);
        for (name, &value) in expert_names.iter().zip(weights.as_slice()) {
            w.write_record([date.to_string(), name.clone(), value.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixed(eta: f64) -> Rule {
        Rule::BoaFixed { eta }
    }

    #[test]
    fn uniform_weights_basic() {
        assert_eq!(uni_weights(1).unwrap().as_slice(), &[1.0]);
        assert_eq!(uni_weights(4).unwrap().as_slice(), &[0.25; 4]);
        assert!(uni_weights(0).is_err());
        let w7 = uni_weights(7).unwrap();
        assert!((w7.as_slice().iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOLERANCE);
    }

    #[test]
    fn weight_vector_rejects_bad_input() {
        assert!(WeightVector::new(vec![]).is_err());
        assert!(WeightVector::new(vec![0.5, 0.6]).is_err());
        assert!(WeightVector::new(vec![1.1, -0.1]).is_err());
        assert!(WeightVector::new(vec![f64::NAN, 1.0]).is_err());
        assert!(WeightVector::new(vec![0.25; 4]).is_ok());
    }

    #[test]
    fn mixture_predict_examples() {
        let w = WeightVector::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(mixture_predict(&w, &[0.0, 1.0]).unwrap(), 0.7);
        let u = uni_weights(2).unwrap();
        assert_eq!(mixture_predict(&u, &[0.1, 0.3]).unwrap(), 0.2);
        assert!(mixture_predict(&u, &[1.0]).is_err());
        assert!(mixture_predict(&u, &[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn fixed_step_known_value() {
        // Losses (0.0, 0.2) against uniform weights give regrets (-0.1, 0.1);
        // with eta = 1 the factors are exp(0.09) and exp(-0.11), so the first
        // weight lands at 1/(1 + exp(-0.2)).
        let mut state = AggregationState::new(fixed(1.0), 2).unwrap();
        let out = boa_step_fixed(&mut state, &[0.0, 0.2]).unwrap();
        assert!((out.instantaneous_regrets[0] + 0.1).abs() < 1e-15);
        assert!((out.instantaneous_regrets[1] - 0.1).abs() < 1e-15);
        let expected = 1.0 / (1.0 + (-0.2f64).exp());
        assert!((out.weights_after[0] - expected).abs() < 1e-12);
        assert!((out.weights_after[0] - 0.549834).abs() < 1e-6);
        assert!((out.weights_after[1] - 0.450166).abs() < 1e-6);
    }

    #[test]
    fn fixed_step_repeated_concentrates() {
        let mut state = AggregationState::new(fixed(1.0), 2).unwrap();
        for _ in 0..200 {
            boa_step_fixed(&mut state, &[0.0, 0.2]).unwrap();
        }
        assert!(state.weights()[0] > 0.999);
        assert_eq!(state.steps(), 200);
    }

    #[test]
    fn equal_losses_leave_weights_in_place() {
        let mut state = AggregationState::new(Rule::BoaAdaptive, 3).unwrap();
        let before = state.weights().clone();
        let out = boa_step_adaptive(&mut state, &[0.0, 0.0, 0.0]).unwrap();
        for (a, b) in out.weights_after.as_slice().iter().zip(before.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        // Zero regrets observed, so every rate still sits at the initial cap.
        assert_eq!(state.adaptive_learning_rates(), vec![INITIAL_ETA_CAP; 3]);
    }

    #[test]
    fn adaptive_absorbs_on_constant_gap() {
        let mut state = AggregationState::new(Rule::BoaAdaptive, 2).unwrap();
        let mut mixture_losses = Vec::new();
        for _ in 0..500 {
            let out = boa_step_adaptive(&mut state, &[0.0, 1.0]).unwrap();
            mixture_losses.push(out.mixture_loss);
        }
        assert!(state.weights()[0] > 0.99, "w0 = {}", state.weights()[0]);
        // Best expert loses 0 every step; the run's average loss must sit
        // within the second-order regret allowance.
        let avg = mixture_losses.iter().sum::<f64>() / 500.0;
        assert!(avg <= 3.0 * (2f64).ln() / 500.0, "avg = {avg}");
    }

    #[test]
    fn rule_mismatch_is_rejected() {
        let mut adaptive = AggregationState::new(Rule::BoaAdaptive, 2).unwrap();
        assert!(matches!(
            boa_step_fixed(&mut adaptive, &[0.0, 1.0]),
            Err(AggregationError::RuleMismatch { .. })
        ));
        let mut fixed_state = AggregationState::new(fixed(0.5), 2).unwrap();
        assert!(matches!(
            boa_step_adaptive(&mut fixed_state, &[0.0, 1.0]),
            Err(AggregationError::RuleMismatch { .. })
        ));
    }

    #[test]
    fn update_rejects_bad_losses() {
        let mut state = AggregationState::new(fixed(1.0), 2).unwrap();
        assert!(state.update(&[1.0]).is_err());
        assert!(state.update(&[1.0, f64::NAN]).is_err());
        assert!(AggregationState::new(fixed(0.0), 2).is_err());
        assert!(AggregationState::new(fixed(f64::INFINITY), 2).is_err());
        assert!(AggregationState::new(Rule::Uni, 0).is_err());
    }

    #[test]
    fn uni_never_moves() {
        let mut state = AggregationState::new(Rule::Uni, 3).unwrap();
        let w0 = state.weights().clone();
        for t in 0..50 {
            let out = state.update(&[t as f64, 1.0, -2.0]).unwrap();
            assert_eq!(out.weights_after, w0);
        }
    }

    #[test]
    fn single_expert_is_a_fixed_point() {
        let mut state = AggregationState::new(Rule::BoaAdaptive, 1).unwrap();
        for _ in 0..10 {
            let out = state.update(&[0.37]).unwrap();
            assert_eq!(out.weights_after.as_slice(), &[1.0]);
            assert_eq!(out.instantaneous_regrets, vec![0.0]);
        }
    }

    #[test]
    fn run_online_converges_to_interior_optimum() {
        // Constant experts 0 and 1 with target 0.3: the best fixed mixture
        // puts 0.3 on the second expert and achieves zero loss.
        let streams = vec![vec![0.0; 2000], vec![1.0; 2000]];
        let targets = vec![0.3; 2000];
        let run = run_online(Rule::BoaAdaptive, &streams, &targets, LossKind::Squared).unwrap();
        let w = run.final_state.weights();
        assert!((w[1] - 0.3).abs() < 0.01, "w1 = {}", w[1]);
        assert!(run.average_mixture_loss() < 3.0 * (2f64).ln() / 2000.0 + 1e-4);
    }

    #[test]
    fn run_online_rejects_bad_shapes() {
        let loss = LossKind::Squared;
        assert!(matches!(
            run_online(Rule::Uni, &[], &[0.1], loss),
            Err(AggregationError::EmptyExpertSet)
        ));
        assert!(matches!(
            run_online(Rule::Uni, &[vec![]], &[], loss),
            Err(AggregationError::EmptyStream)
        ));
        assert!(matches!(
            run_online(Rule::Uni, &[vec![0.1], vec![0.1, 0.2]], &[0.1], loss),
            Err(AggregationError::RaggedStreams { index: 1, .. })
        ));
    }

    #[test]
    fn no_look_ahead_in_run_online() {
        let streams = vec![
            (0..40).map(|t| (t as f64 * 0.7).sin()).collect::<Vec<_>>(),
            (0..40).map(|t| (t as f64 * 0.3).cos()).collect::<Vec<_>>(),
        ];
        let mut targets: Vec<f64> = (0..40).map(|t| (t as f64 * 0.5).sin() * 0.5).collect();
        let full = run_online(Rule::BoaAdaptive, &streams, &targets, LossKind::Squared).unwrap();
        // Corrupt the future: outcomes up to the cut must not change at all.
        let cut = 25;
        for y in targets.iter_mut().skip(cut) {
            *y = 99.0;
        }
        let tampered =
            run_online(Rule::BoaAdaptive, &streams, &targets, LossKind::Squared).unwrap();
        for t in 0..cut {
            assert_eq!(full.outcomes[t], tampered.outcomes[t], "divergence at step {t}");
        }
    }

    #[test]
    fn warm_start_with_one_equal_loss_step_matches_fresh_state() {
        let streams = vec![vec![0.1], vec![0.1]];
        let targets = vec![0.1];
        let state = warm_start(Rule::BoaAdaptive, &streams, &targets, LossKind::Squared).unwrap();
        assert_eq!(state.steps(), 1);
        let fresh = AggregationState::new(Rule::BoaAdaptive, 2).unwrap();
        for (a, b) in state.weights().as_slice().iter().zip(fresh.weights().as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn continuation_is_bit_for_bit() {
        let t_total = 60;
        let streams: Vec<Vec<f64>> = (0..3)
            .map(|k| (0..t_total).map(|t| ((t + 7 * k) as f64 * 0.41).sin() * 0.1).collect())
            .collect();
        let targets: Vec<f64> = (0..t_total).map(|t| (t as f64 * 0.23).cos() * 0.1).collect();
        let full = run_online(Rule::BoaAdaptive, &streams, &targets, LossKind::Squared).unwrap();

        let split = 12;
        let head: Vec<Vec<f64>> = streams.iter().map(|s| s[..split].to_vec()).collect();
        let tail: Vec<Vec<f64>> = streams.iter().map(|s| s[split..].to_vec()).collect();
        let state =
            warm_start(Rule::BoaAdaptive, &head, &targets[..split], LossKind::Squared).unwrap();
        let resumed =
            run_online_from(state, &tail, &targets[split..], LossKind::Squared).unwrap();
        for (t, outcome) in resumed.outcomes.iter().enumerate() {
            assert_eq!(outcome, &full.outcomes[split + t], "divergence at resumed step {t}");
        }
        assert_eq!(resumed.final_state, full.final_state);
    }

    #[test]
    fn weights_csv_layout() {
        use crate::data::Month;
        let streams = vec![vec![0.0, 0.1], vec![0.2, 0.0]];
        let targets = vec![0.1, 0.1];
        let run = run_online(fixed(1.0), &streams, &targets, LossKind::Squared).unwrap();
        let dates = vec![Month::from_parts(2008, 1).unwrap(), Month::from_parts(2008, 2).unwrap()];
        let names = vec!["a".to_string(), "b".to_string()];
        let mut buf = Vec::new();
        write_weights_csv(&mut buf, &dates, &names, &run).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("date,expert_name,weight"));
        // First dated rows carry the weights in force before any update.
        assert_eq!(lines.next(), Some("2008-01,a,0.5"));
        assert_eq!(lines.next(), Some("2008-01,b,0.5"));
        let third = lines.next().unwrap();
        assert!(third.starts_with("2008-02,a,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weights_stay_on_simplex(
            seq in proptest::collection::vec(
                proptest::collection::vec(-10.0f64..10.0, 4),
                1..60,
            ),
            adaptive in proptest::bool::ANY,
        ) {
            let rule = if adaptive { Rule::BoaAdaptive } else { fixed(0.7) };
            let mut state = AggregationState::new(rule, 4).unwrap();
            for losses in &seq {
                let out = state.update(losses).unwrap();
                let w = out.weights_after.as_slice();
                prop_assert!(w.iter().all(|&x| x >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOLERANCE);
            }
        }

        #[test]
        fn translation_leaves_update_unchanged(
            losses in proptest::collection::vec(0.0f64..1.0, 3),
            c in -1.0f64..1.0,
        ) {
            let mut a = AggregationState::new(fixed(0.9), 3).unwrap();
            let mut b = a.clone();
            let shifted: Vec<f64> = losses.iter().map(|&l| l + c).collect();
            let out_a = a.update(&losses).unwrap();
            let out_b = b.update(&shifted).unwrap();
            for (ra, rb) in out_a
                .instantaneous_regrets
                .iter()
                .zip(&out_b.instantaneous_regrets)
            {
                prop_assert!((ra - rb).abs() < 1e-12);
            }
            for (wa, wb) in out_a
                .weights_after
                .as_slice()
                .iter()
                .zip(out_b.weights_after.as_slice())
            {
                prop_assert!((wa - wb).abs() < 1e-12);
            }
        }

        #[test]
        fn permutation_equivariance(
            losses in proptest::collection::vec(0.0f64..1.0, 4),
            rot in 0usize..4,
        ) {
            let mut a = AggregationState::new(Rule::BoaAdaptive, 4).unwrap();
            let mut b = a.clone();
            let mut rotated = losses.clone();
            rotated.rotate_left(rot);
            let out_a = a.update(&losses).unwrap();
            let out_b = b.update(&rotated).unwrap();
            // Expert i of run b carries the loss that expert (i+rot)%4 carries
            // in run a, so their post-update weights must agree.
            for i in 0..4 {
                prop_assert!(
                    (out_b.weights_after[i] - out_a.weights_after[(i + rot) % 4]).abs() < 1e-12
                );
            }
        }
    }
}
