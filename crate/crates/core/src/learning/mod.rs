//! Model estimation and exploration-policy update.
//!
//! Per step `h` the estimator picks the maximum-likelihood pair from a finite
//! class, builds an empirical covariance from the exploration data, turns it
//! into an elliptical bonus, and finally plans greedily against the bonus
//! under the truncated value recursion to obtain the next exploration policy.

mod class;
mod dataset;
mod exploration;
mod schedule;

use nalgebra::DMatrix;
use thiserror::Error;

pub use class::{mle_fit, ClassSpec, MleFit, ModelClass};
pub use dataset::{RoundSamples, TransitionSample, WindowDataset};
pub use exploration::{
    bonus, bonus_step, empirical_covariance, greedy_exploration_policy, truncated_value_dp,
};
pub use schedule::{ScheduleConstants, ScheduleInputs};

use crate::mdp::{LowRankKernel, MdpError, Policy, StateActionTable, ValueTables};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearningError {
    #[error("model class has no valid (phi, mu) pair")]
    NoValidCandidate,
    #[error("confidence level delta must lie in (0,1), got {0}")]
    InvalidDelta(f64),
    #[error("covariance multiplier must be positive, got {0}")]
    InvalidRegularizer(f64),
    #[error("covariance at step {step} is not positive definite")]
    SingularCovariance { step: usize },
    #[error("invalid model class: {0}")]
    InvalidClass(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Output of one estimation pass.
#[derive(Debug, Clone)]
pub struct EstimatedModel {
    /// Chosen `(phi, mu)` indices per step.
    pub pairs: Vec<(usize, usize)>,
    pub logliks: Vec<f64>,
    /// `P_hat`, assembled step by step from the chosen pairs.
    pub kernel: LowRankKernel,
    pub covariances: Vec<DMatrix<f64>>,
    pub bonus: StateActionTable,
    pub constants: ScheduleConstants,
}

/// Exploration policy and its truncated value.
#[derive(Debug, Clone)]
pub struct ExplorationUpdate {
    pub policy: Policy,
    pub values: ValueTables,
}

/// MLE per step, covariance from the step's `cov` set, bonus, then the
/// greedy exploration policy.
pub fn e2u(
    class: &ModelClass,
    data: &WindowDataset,
    constants: ScheduleConstants,
) -> Result<(EstimatedModel, ExplorationUpdate), LearningError> {
    let space = class.space();
    if data.horizon() != space.horizon {
        return Err(MdpError::ShapeMismatch("dataset horizon vs class".into()).into());
    }
    let mut pairs = Vec::with_capacity(space.horizon);
    let mut logliks = Vec::with_capacity(space.horizon);
    let mut covariances = Vec::with_capacity(space.horizon);
    let mut bonus_table = StateActionTable::zeros(space);
    for h in 0..space.horizon {
        let fit = mle_fit(class, h, data.mle_set(h))?;
        let phi = class.phi(fit.phi);
        let u = empirical_covariance(phi, h, data.cov_set(h), constants.lambda);
        bonus_step(phi, h, &u, constants.alpha_tilde, &mut bonus_table)?;
        pairs.push((fit.phi, fit.mu));
        logliks.push(fit.loglik);
        covariances.push(u);
    }
    let steps: Vec<&LowRankKernel> = pairs
        .iter()
        .map(|&(i, j)| class.kernel(i, j).expect("mle returns valid pairs"))
        .collect();
    let kernel = LowRankKernel::from_steps(&steps)?;
    let (policy, values) = greedy_exploration_policy(&kernel, &bonus_table)?;
    Ok((
        EstimatedModel { pairs, logliks, kernel, covariances, bonus: bonus_table, constants },
        ExplorationUpdate { policy, values },
    ))
}
