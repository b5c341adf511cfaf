//! Covariance, elliptical bonus and truncated value recursion.

use nalgebra::{DMatrix, DVector};

use super::dataset::TransitionSample;
use super::LearningError;
use crate::mdp::{
    backward_induction, greedy_induction, LowRankKernel, MdpError, Policy, RepresentationMap,
    StateActionTable, ValueTables,
};

/// `sum phi_h(s,a) phi_h(s,a)^T + lambda I` over the samples.
pub fn empirical_covariance<'a>(
    phi: &RepresentationMap,
    h: usize,
    samples: impl IntoIterator<Item = &'a TransitionSample>,
    lambda: f64,
) -> DMatrix<f64> {
    let d = phi.dim;
    let mut u = DMatrix::<f64>::identity(d, d) * lambda;
    for x in samples {
        let f = DVector::from_column_slice(phi.feature(h, x.state, x.action));
        u.ger(1.0, &f, &f, 1.0);
    }
    u
}

/// Step-`h` bonus `min(alpha_tilde |phi_h(s,a)|_{U^-1}, 1)` for every `(s, a)`,
/// written into `out`.
///
/// The quadratic form is evaluated through a Cholesky solve.
pub fn bonus_step(
    phi: &RepresentationMap,
    h: usize,
    covariance: &DMatrix<f64>,
    alpha_tilde: f64,
    out: &mut StateActionTable,
) -> Result<(), LearningError> {
    let chol = covariance
        .clone()
        .cholesky()
        .ok_or(LearningError::SingularCovariance { step: h })?;
    let sp = phi.space;
    for s in 0..sp.n_states {
        for a in 0..sp.n_actions {
            let f = DVector::from_column_slice(phi.feature(h, s, a));
            let quad = f.dot(&chol.solve(&f)).max(0.0);
            out.set(h, s, a, (alpha_tilde * quad.sqrt()).min(1.0));
        }
    }
    Ok(())
}

/// Bonus table for a single step, other steps zero. Convenience over [`bonus_step`].
pub fn bonus(
    phi: &RepresentationMap,
    h: usize,
    covariance: &DMatrix<f64>,
    alpha_tilde: f64,
) -> Result<StateActionTable, LearningError> {
    let mut out = StateActionTable::zeros(phi.space);
    bonus_step(phi, h, covariance, alpha_tilde, &mut out)?;
    Ok(out)
}

/// `Q_h = min(1, b_h + P_h V_{h+1})`, `V_h = E_pi[Q_h]`.
pub fn truncated_value_dp(
    kernel: &LowRankKernel,
    bonus: &StateActionTable,
    policy: &Policy,
) -> Result<ValueTables, MdpError> {
    check(kernel, bonus)?;
    if policy.space() != kernel.space() {
        return Err(MdpError::ShapeMismatch("policy vs kernel".into()));
    }
    Ok(backward_induction(kernel, policy, |h, s, a, next| {
        (bonus.get(h, s, a) + kernel.expect(h, s, a, next)).min(1.0)
    })
    .clamp_unit())
}

/// Deterministic maximizer of the truncated value; ties go to the lowest action.
pub fn greedy_exploration_policy(
    kernel: &LowRankKernel,
    bonus: &StateActionTable,
) -> Result<(Policy, ValueTables), MdpError> {
    check(kernel, bonus)?;
    let (policy, values) = greedy_induction(kernel, |h, s, a, next| {
        (bonus.get(h, s, a) + kernel.expect(h, s, a, next)).min(1.0)
    });
    Ok((policy, values.clamp_unit()))
}

fn check(kernel: &LowRankKernel, bonus: &StateActionTable) -> Result<(), MdpError> {
    if kernel.space() != bonus.space() {
        return Err(MdpError::ShapeMismatch("bonus vs kernel".into()));
    }
    Ok(())
}
