//! Trajectory importance weights and the weighted (self-normalized)
//! importance sampling estimator.

use serde::{Deserialize, Serialize};

use crate::domain::Trajectory;
use crate::error::{Error, Result};
use crate::policy::PolicyCheckpoint;

/// `sum_t ln pi(a_t|s_t) - ln p(a_t|s_t)` over the logged steps.
pub fn log_importance_weight(policy: &PolicyCheckpoint, t: &Trajectory) -> Result<f64> {
    let mut lw = 0.0;
    for s in &t.steps {
        let b = s.behavior_prob();
        if !(b > 0.0) {
            return Err(Error::Data(format!(
                "student {}: zero behavior probability on a logged action",
                t.student_id
            )));
        }
        let p = policy.distribution_normalized(&s.normalized)?[s.action.index()];
        lw += p.ln() - b.ln();
    }
    Ok(lw)
}

/// Product of per-step likelihood ratios, computed in log space.
pub fn importance_weight(policy: &PolicyCheckpoint, t: &Trajectory) -> Result<f64> {
    Ok(log_importance_weight(policy, t)?.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WisEstimate {
    pub estimate: f64,
    /// `(sum w)^2 / sum w^2`, between 1 and n.
    pub ess: f64,
}

/// `sum w_i R_i / sum w_i` and the effective sample size.
pub fn wis_from_weights(weights: &[f64], rewards: &[f64]) -> Result<WisEstimate> {
    if weights.is_empty() || weights.len() != rewards.len() {
        return Err(Error::Usage(
            "WIS needs equally many weights and rewards, at least one".into(),
        ));
    }
    let s: f64 = weights.iter().sum();
    let q: f64 = weights.iter().map(|w| w * w).sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Numeric(format!("importance weights sum to {s}")));
    }
    let num: f64 = weights.iter().zip(rewards).map(|(w, r)| w * r).sum();
    Ok(WisEstimate {
        estimate: num / s,
        ess: s * s / q,
    })
}

/// Scales log-weights by their maximum before exponentiating; both the
/// estimate and the ESS are invariant to that common factor.
pub fn wis_from_log_weights(log_weights: &[f64], rewards: &[f64]) -> Result<WisEstimate> {
    let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::Numeric("all importance weights are zero".into()));
    }
    let w: Vec<f64> = log_weights.iter().map(|lw| (lw - m).exp()).collect();
    wis_from_weights(&w, rewards)
}

pub fn wis_evaluate(policy: &PolicyCheckpoint, dataset: &[Trajectory]) -> Result<WisEstimate> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let lw = dataset
        .iter()
        .map(|t| log_importance_weight(policy, t))
        .collect::<Result<Vec<_>>>()?;
    let rewards: Vec<f64> = dataset.iter().map(|t| t.terminal_reward).collect();
    wis_from_log_weights(&lw, &rewards)
}
