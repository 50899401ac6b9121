//! Per-observation loss kernels.
//!
//! Everything here is a pure scalar function; averaging over a sample is the
//! caller's job. The Huber loss uses the convention `x^2` inside the threshold
//! and `2*xi*|x| - xi^2` outside, which is continuous with continuous first
//! derivative at `|x| = xi`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("non-finite loss input: y={y}, y_hat={y_hat}")]
    NonFinite { y: f64, y_hat: f64 },
    #[error("huber threshold must be positive and finite, got {0}")]
    InvalidThreshold(f64),
    #[error("length mismatch: {targets} targets vs {predictions} predictions")]
    LengthMismatch { targets: usize, predictions: usize },
    #[error("empty input series")]
    Empty,
    #[error("predictive r2 undefined: sum of squared targets is zero")]
    ZeroTargets,
}

/// Loss function selector carried through configs and the online protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    Huber { xi: f64 },
}

impl LossKind {
    /// Loss of prediction `y_hat` against outcome `y`.
    pub fn evaluate(&self, y: f64, y_hat: f64) -> Result<f64, LossError> {
        match *self {
            LossKind::Squared => squared_loss(y, y_hat),
            LossKind::Huber { xi } => huber_loss(y, y_hat, xi),
        }
    }

    /// Derivative of the loss with respect to the prediction, used to
    /// linearize losses around the mixture forecast.
    pub fn prediction_gradient(&self, y: f64, y_hat: f64) -> Result<f64, LossError> {
        check_pair(y, y_hat)?;
        match *self {
            LossKind::Squared => Ok(2.0 * (y_hat - y)),
            // d/dy_hat H(y - y_hat) = -H'(y - y_hat)
            LossKind::Huber { xi } => Ok(-huber_gradient(y - y_hat, xi)?),
        }
    }
}

fn check_pair(y: f64, y_hat: f64) -> Result<(), LossError> {
    if y.is_finite() && y_hat.is_finite() {
        Ok(())
    } else {
        Err(LossError::NonFinite { y, y_hat })
    }
}

pub fn squared_loss(y: f64, y_hat: f64) -> Result<f64, LossError> {
    check_pair(y, y_hat)?;
    let x = y - y_hat;
    Ok(x * x)
}

pub fn huber_loss(y: f64, y_hat: f64, xi: f64) -> Result<f64, LossError> {
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(LossError::InvalidThreshold(xi));
    }
    check_pair(y, y_hat)?;
    let x = y - y_hat;
    if x.abs() <= xi {
        Ok(x * x)
    } else {
        Ok(2.0 * xi * x.abs() - xi * xi)
    }
}

/// Derivative of the Huber loss with respect to the residual.
pub fn huber_gradient(residual: f64, xi: f64) -> Result<f64, LossError> {
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(LossError::InvalidThreshold(xi));
    }
    if !residual.is_finite() {
        return Err(LossError::NonFinite { y: residual, y_hat: f64::NAN });
    }
    if residual.abs() <= xi {
        Ok(2.0 * residual)
    } else {
        Ok(2.0 * xi * residual.signum())
    }
}

/// Out-of-sample predictive R^2 against the zero forecast:
/// `1 - sum (y - y_hat)^2 / sum y^2`.
pub fn predictive_r2(y: &[f64], y_hat: &[f64]) -> Result<f64, LossError> {
    if y.len() != y_hat.len() {
        return Err(LossError::LengthMismatch { targets: y.len(), predictions: y_hat.len() });
    }
    if y.is_empty() {
        return Err(LossError::Empty);
    }
    let mut sse = 0.0;
    let mut sst = 0.0;
    for (&yi, &fi) in y.iter().zip(y_hat) {
        check_pair(yi, fi)?;
        sse += (yi - fi) * (yi - fi);
        sst += yi * yi;
    }
    if sst == 0.0 {
        return Err(LossError::ZeroTargets);
    }
    Ok(1.0 - sse / sst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn squared_basic() {
        assert_eq!(squared_loss(1.0, 0.5).unwrap(), 0.25);
        assert_eq!(squared_loss(0.5, 1.0).unwrap(), 0.25);
        assert_eq!(squared_loss(0.3, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn squared_rejects_non_finite() {
        assert!(squared_loss(f64::NAN, 0.0).is_err());
        assert!(squared_loss(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn huber_quadratic_branch_matches_squared() {
        // |x| <= xi must agree with the squared loss bit for bit.
        for &(y, f) in &[(1.0, 0.5), (0.0, 0.9), (-0.3, 0.69), (2.0, 2.0)] {
            assert_eq!(huber_loss(y, f, 1.0).unwrap(), squared_loss(y, f).unwrap());
        }
    }

    #[test]
    fn huber_linear_branch() {
        // x = 2, xi = 1: 2*1*2 - 1 = 3
        assert_eq!(huber_loss(2.0, 0.0, 1.0).unwrap(), 3.0);
        assert_eq!(huber_loss(0.0, 2.0, 1.0).unwrap(), 3.0);
    }

    #[test]
    fn huber_continuous_at_threshold() {
        let xi = 0.7;
        // Both branches evaluate to xi^2 exactly at the kink.
        assert_eq!(huber_loss(xi, 0.0, xi).unwrap(), xi * xi);
        assert_eq!(2.0 * xi * xi - xi * xi, xi * xi);
    }

    #[test]
    fn huber_rejects_bad_threshold() {
        assert_eq!(huber_loss(1.0, 0.0, 0.0), Err(LossError::InvalidThreshold(0.0)));
        assert!(huber_loss(1.0, 0.0, -1.0).is_err());
        assert!(huber_gradient(1.0, 0.0).is_err());
    }

    #[test]
    fn gradient_both_branches() {
        assert_eq!(huber_gradient(0.5, 1.0).unwrap(), 1.0);
        assert_eq!(huber_gradient(-0.5, 1.0).unwrap(), -1.0);
        assert_eq!(huber_gradient(2.0, 1.0).unwrap(), 2.0);
        assert_eq!(huber_gradient(-2.0, 1.0).unwrap(), -2.0);
        assert_eq!(huber_gradient(0.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let xi = 0.8;
        let h = 1e-6;
        for &r in &[-1.7, -0.75, -0.2, 0.0, 0.3, 0.79, 1.4] {
            let up = huber_loss(r + h, 0.0, xi).unwrap();
            let down = huber_loss(r - h, 0.0, xi).unwrap();
            let fd = (up - down) / (2.0 * h);
            let g = huber_gradient(r, xi).unwrap();
            let scale = g.abs().max(1.0);
            assert!(
                (fd - g).abs() / scale < 1e-6,
                "r={r}: fd={fd}, analytic={g}"
            );
        }
    }

    #[test]
    fn r2_known_value() {
        // sse = 1, sst = 5 -> 0.8
        let r2 = predictive_r2(&[1.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!((r2 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn r2_perfect_and_zero_forecast() {
        assert_eq!(predictive_r2(&[1.0, -2.0], &[1.0, -2.0]).unwrap(), 1.0);
        assert_eq!(predictive_r2(&[1.0, -2.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn r2_error_paths() {
        assert_eq!(
            predictive_r2(&[1.0], &[1.0, 2.0]),
            Err(LossError::LengthMismatch { targets: 1, predictions: 2 })
        );
        assert_eq!(predictive_r2(&[], &[]), Err(LossError::Empty));
        assert_eq!(predictive_r2(&[0.0, 0.0], &[1.0, 1.0]), Err(LossError::ZeroTargets));
    }

    #[test]
    fn kind_dispatch() {
        let sq = LossKind::Squared;
        let hu = LossKind::Huber { xi: 1.0 };
        assert_eq!(sq.evaluate(1.0, 0.5).unwrap(), 0.25);
        assert_eq!(hu.evaluate(2.0, 0.0).unwrap(), 3.0);
        assert_eq!(sq.prediction_gradient(0.3, 0.5).unwrap(), 0.4);
        // Outside the threshold the gradient saturates at 2*xi against the residual sign.
        assert_eq!(hu.prediction_gradient(0.0, 2.0).unwrap(), 2.0);
    }

    proptest! {
        #[test]
        fn huber_never_exceeds_squared(x in -50.0f64..50.0, xi in 1e-3f64..10.0) {
            let h = huber_loss(x, 0.0, xi).unwrap();
            let s = squared_loss(x, 0.0).unwrap();
            prop_assert!(h <= s + 1e-12);
            prop_assert!(h >= 0.0);
        }

        #[test]
        fn huber_symmetric_in_residual(x in -50.0f64..50.0, xi in 1e-3f64..10.0) {
            let a = huber_loss(x, 0.0, xi).unwrap();
            let b = huber_loss(-x, 0.0, xi).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
