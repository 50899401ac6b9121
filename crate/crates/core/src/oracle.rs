//! Brute-force regret oracle: enumerate a grid over the probability simplex,
//! score every fixed mixture over the whole sample, and keep the best. Used
//! to pin empirical regret in tests and the verify command; deliberately
//! exponential in the number of experts, with a hard capacity guard.

use crate::aggregation::{AggregationError, WeightVector};
use crate::loss::{LossError, LossKind};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("expert set must be non-empty")]
    EmptyExpertSet,
    #[error("streams must have at least one step")]
    EmptyStream,
    #[error("expert stream {index} has length {got}, target has length {expected}")]
    RaggedStreams { index: usize, expected: usize, got: usize },
    #[error("grid step {0} must lie in (0, 1] and divide 1 within 1e-12")]
    InvalidStep(f64),
    #[error("simplex grid would hold {candidates} points, over the {max} cap; coarsen the step")]
    CapacityExceeded { candidates: u128, max: u64 },
    #[error("no default grid step for {k} experts; the full grid is infeasible")]
    NoDefaultStep { k: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
}

/// Hard cap on enumerated grid points.
pub const MAX_CANDIDATES: u64 = 10_000_000;

/// Result of the exhaustive search over fixed mixtures.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub best_weights: WeightVector,
    pub best_avg_loss: f64,
    /// Index of the best single expert (the best simplex vertex).
    pub best_expert: usize,
    pub best_expert_avg_loss: f64,
    pub candidates: usize,
    pub step: f64,
}

/// Number of grid points for k experts and n = 1/step divisions:
/// C(n + k - 1, k - 1). None on overflow.
pub fn grid_size(k: usize, divisions: u64) -> Option<u128> {
    if k == 0 {
        return Some(0);
    }
    // binomial(n + k - 1, k - 1) with incremental division keeps intermediates exact
    let n = divisions as u128;
    let r = (k - 1) as u128;
    let mut result: u128 = 1;
    for i in 0..r {
        result = result.checked_mul(n + r - i)?;
        result /= i + 1;
    }
    Some(result)
}

/// Grid step used by default: fine for few experts, coarse up to seven,
/// refused beyond.
pub fn default_step(k: usize) -> Option<f64> {
    match k {
        0 => None,
        1..=4 => Some(0.01),
        5..=7 => Some(0.1),
        _ => None,
    }
}

fn divisions_for(step: f64) -> Result<u64, OracleError> {
    if !(step > 0.0 && step <= 1.0 && step.is_finite()) {
        return Err(OracleError::InvalidStep(step));
    }
    let n = (1.0 / step).round();
    if n < 1.0 || (n * step - 1.0).abs() > 1e-12 {
        return Err(OracleError::InvalidStep(step));
    }
    Ok(n as u64)
}

/// Enumerate all weight vectors with entries on a step grid, in ascending
/// lexicographic order.
pub fn simplex_grid(k: usize, step: f64) -> Result<Vec<WeightVector>, OracleError> {
    if k == 0 {
        return Err(OracleError::EmptyExpertSet);
    }
    let n = divisions_for(step)?;
    let candidates = grid_size(k, n).unwrap_or(u128::MAX);
    if candidates > MAX_CANDIDATES as u128 {
        return Err(OracleError::CapacityExceeded { candidates, max: MAX_CANDIDATES });
    }
    let mut out = Vec::with_capacity(candidates as usize);
    let mut counts = vec![0u64; k];
    compose(&mut out, &mut counts, 0, n, n);
    Ok(out)
}

fn compose(out: &mut Vec<WeightVector>, counts: &mut [u64], pos: usize, remaining: u64, n: u64) {
    if pos == counts.len() - 1 {
        counts[pos] = remaining;
        let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        out.push(WeightVector::new(weights).expect("grid point lies on the simplex"));
        return;
    }
    for c in 0..=remaining {
        counts[pos] = c;
        compose(out, counts, pos + 1, remaining - c, n);
    }
}

fn validate(expert_streams: &[Vec<f64>], targets: &[f64]) -> Result<(), OracleError> {
    if expert_streams.is_empty() {
        return Err(OracleError::EmptyExpertSet);
    }
    if targets.is_empty() {
        return Err(OracleError::EmptyStream);
    }
    for (i, s) in expert_streams.iter().enumerate() {
        if s.len() != targets.len() {
            return Err(OracleError::RaggedStreams {
                index: i,
                expected: targets.len(),
                got: s.len(),
            });
        }
    }
    Ok(())
}

fn average_mixture_loss(
    weights: &WeightVector,
    expert_streams: &[Vec<f64>],
    targets: &[f64],
    loss: LossKind,
) -> Result<f64, OracleError> {
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let mut value = 0.0;
        for (w, stream) in weights.as_slice().iter().zip(expert_streams) {
            value += w * stream[t];
        }
        total += loss.evaluate(y, value)?;
    }
    Ok(total / targets.len() as f64)
}

/// Exhaustively score every grid mixture held fixed over the sample. Ties are
/// broken toward the lexicographically smallest weight vector.
pub fn best_fixed_mixture(
    expert_streams: &[Vec<f64>],
    targets: &[f64],
    loss: LossKind,
    step: f64,
) -> Result<OracleResult, OracleError> {
    validate(expert_streams, targets)?;
    let grid = simplex_grid(expert_streams.len(), step)?;
    let scored: Vec<f64> = grid
        .par_iter()
        .map(|w| average_mixture_loss(w, expert_streams, targets, loss))
        .collect::<Result<_, _>>()?;
    // Sequential argmin with strict improvement keeps the first (smallest
    // lexicographic) grid point among ties.
    let mut best = 0;
    for (i, &v) in scored.iter().enumerate() {
        if v < scored[best] {
            best = i;
        }
    }
    let (best_expert, best_expert_avg_loss) = best_fixed_expert(expert_streams, targets, loss)?;
    Ok(OracleResult {
        best_weights: grid[best].clone(),
        best_avg_loss: scored[best],
        best_expert,
        best_expert_avg_loss,
        candidates: grid.len(),
        step,
    })
}

/// Best single expert by average loss (first index among ties).
pub fn best_fixed_expert(
    expert_streams: &[Vec<f64>],
    targets: &[f64],
    loss: LossKind,
) -> Result<(usize, f64), OracleError> {
    validate(expert_streams, targets)?;
    let mut best = 0;
    let mut best_loss = f64::INFINITY;
    for (i, stream) in expert_streams.iter().enumerate() {
        let mut total = 0.0;
        for (&y, &f) in targets.iter().zip(stream) {
            total += loss.evaluate(y, f)?;
        }
        let avg = total / targets.len() as f64;
        if avg < best_loss {
            best = i;
            best_loss = avg;
        }
    }
    Ok((best, best_loss))
}

/// Best single expert when per-step losses are given directly.
pub fn best_fixed_expert_from_losses(losses: &[Vec<f64>]) -> Result<(usize, f64), OracleError> {
    if losses.is_empty() {
        return Err(OracleError::EmptyExpertSet);
    }
    if losses[0].is_empty() {
        return Err(OracleError::EmptyStream);
    }
    let t = losses[0].len();
    let mut best = 0;
    let mut best_loss = f64::INFINITY;
    for (i, stream) in losses.iter().enumerate() {
        if stream.len() != t {
            return Err(OracleError::RaggedStreams { index: i, expected: t, got: stream.len() });
        }
        let avg = stream.iter().sum::<f64>() / t as f64;
        if avg < best_loss {
            best = i;
            best_loss = avg;
        }
    }
    Ok((best, best_loss))
}

/// Average regret of a run against an oracle average loss. Negative values
/// mean the online mixture beat the fixed oracle, which only happens through
/// numerical ties or genuinely non-stationary streams.
pub fn regret(mixture_avg_loss: f64, oracle_avg_loss: f64) -> f64 {
    mixture_avg_loss - oracle_avg_loss
}
