//! Confidence-schedule constants used by the estimation step.

use serde::{Deserialize, Serialize};

use super::LearningError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInputs {
    /// Round index `k >= 1` (local to the current run).
    pub round: usize,
    pub window: usize,
    pub n_phi: usize,
    pub n_mu: usize,
    pub horizon: usize,
    pub n_actions: usize,
    pub dim: usize,
    /// Total rounds `K` of the run.
    pub total_rounds: usize,
    pub delta: f64,
    pub c_lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConstants {
    /// `zeta = 2 ln(2 |Phi| |Psi| k H / delta) / W`
    pub zeta: f64,
    /// `lambda = c_lambda d ln(|Phi| min(k, W) K H / delta)`
    pub lambda: f64,
    /// `alpha = sqrt(2 W A zeta + lambda d)`
    pub alpha: f64,
    /// `alpha_tilde = 5 alpha`, the bonus coefficient.
    pub alpha_tilde: f64,
    pub delta: f64,
    pub c_lambda: f64,
}

impl ScheduleConstants {
    pub fn compute(x: &ScheduleInputs) -> Result<Self, LearningError> {
        if !(x.delta > 0.0 && x.delta < 1.0) {
            return Err(LearningError::InvalidDelta(x.delta));
        }
        if !(x.c_lambda > 0.0 && x.c_lambda.is_finite()) {
            return Err(LearningError::InvalidRegularizer(x.c_lambda));
        }
        if x.round == 0 || x.window == 0 || x.n_phi == 0 || x.n_mu == 0 || x.horizon == 0 || x.total_rounds == 0 {
            return Err(LearningError::InvalidClass(format!(
                "schedule inputs must be positive: {x:?}"
            )));
        }
        let (k, w) = (x.round as f64, x.window as f64);
        let zeta = 2.0 * (2.0 * (x.n_phi * x.n_mu) as f64 * k * x.horizon as f64 / x.delta).ln() / w;
        let span = x.round.min(x.window) as f64;
        let lambda = x.c_lambda
            * x.dim as f64
            * (x.n_phi as f64 * span * x.total_rounds as f64 * x.horizon as f64 / x.delta).ln();
        let alpha = (2.0 * w * x.n_actions as f64 * zeta + lambda * x.dim as f64).sqrt();
        Ok(Self {
            zeta,
            lambda,
            alpha,
            alpha_tilde: 5.0 * alpha,
            delta: x.delta,
            c_lambda: x.c_lambda,
        })
    }
}
