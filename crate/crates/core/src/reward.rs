//! Episode reward and learning-gain metrics.
//!
//! `R = sum_i max(0, post_i - pre_i) - lambda * n_hints + beta * n_helpful + quit_penalty * [quit]`

use serde::{Deserialize, Serialize};

use crate::domain::Trajectory;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    pub lambda_hint: f64,
    pub beta_helpful: f64,
    pub quit_penalty: f64,
    pub n_items: usize,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            lambda_hint: 0.013,
            beta_helpful: 0.1,
            quit_penalty: -8.0,
            n_items: 8,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_hint >= 0.0) {
            return Err(Error::config("reward.lambda_hint", "must be >= 0"));
        }
        if !(self.beta_helpful >= 0.0) {
            return Err(Error::config("reward.beta_helpful", "must be >= 0"));
        }
        if !(self.quit_penalty <= 0.0) {
            return Err(Error::config("reward.quit_penalty", "must be <= 0"));
        }
        if self.n_items == 0 {
            return Err(Error::config("reward.n_items", "must be positive"));
        }
        Ok(())
    }
}

/// Number of items answered correctly on the posttest but not the pretest.
pub fn clipped_gain(pre: &[bool], post: &[bool]) -> u32 {
    pre.iter().zip(post).filter(|&(&a, &b)| b && !a).count() as u32
}

pub fn terminal_reward(
    pre_items: &[bool],
    post_items: Option<&[bool]>,
    n_hints: u32,
    n_helpful: u32,
    quit: bool,
    params: &RewardParams,
) -> Result<f64> {
    if pre_items.len() != params.n_items || post_items.is_some_and(|p| p.len() != params.n_items) {
        return Err(Error::Usage(format!(
            "assessment vectors must have {} items",
            params.n_items
        )));
    }
    let gain = post_items.map_or(0, |post| clipped_gain(pre_items, post)) as f64;
    let quit_term = if quit { params.quit_penalty } else { 0.0 };
    Ok(gain - params.lambda_hint * n_hints as f64 + params.beta_helpful * n_helpful as f64 + quit_term)
}

pub fn trajectory_reward(t: &Trajectory, params: &RewardParams) -> Result<f64> {
    terminal_reward(
        &t.pre_items,
        t.post_items.as_deref(),
        t.n_hints(),
        t.n_helpful(),
        t.quit,
        params,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardKind {
    Hint,
    Helpful,
    Quit,
    Gain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardEvent {
    /// Decision-point index; `None` for the posttest.
    pub step: Option<usize>,
    pub kind: RewardKind,
    pub value: f64,
}

/// Decomposes the terminal reward into the events that earn it, in time
/// order. The values sum to [`trajectory_reward`].
pub fn event_rewards(t: &Trajectory, params: &RewardParams) -> Vec<RewardEvent> {
    let mut out = Vec::new();
    for (i, s) in t.steps.iter().enumerate() {
        let step = Some(i);
        if s.events.hint_given {
            out.push(RewardEvent {
                step,
                kind: RewardKind::Hint,
                value: -params.lambda_hint,
            });
        }
        if s.events.helpful_click {
            out.push(RewardEvent {
                step,
                kind: RewardKind::Helpful,
                value: params.beta_helpful,
            });
        }
        if s.events.quit {
            out.push(RewardEvent {
                step,
                kind: RewardKind::Quit,
                value: params.quit_penalty,
            });
        }
    }
    if let Some(post) = &t.post_items {
        let gain = clipped_gain(&t.pre_items, post);
        if gain > 0 {
            out.push(RewardEvent {
                step: None,
                kind: RewardKind::Gain,
                value: gain as f64,
            });
        }
    }
    out
}

/// Per-decision-point rewards; the posttest gain lands on the last step.
pub fn step_rewards(t: &Trajectory, params: &RewardParams) -> Vec<f64> {
    let mut r = vec![0.0; t.steps.len()];
    if r.is_empty() {
        return r;
    }
    let last = r.len() - 1;
    for e in event_rewards(t, params) {
        r[e.step.unwrap_or(last)] += e.value;
    }
    r
}

/// Normalized learning gain `(post - pre) / (max - pre)`; `None` at a
/// perfect pretest.
pub fn nlg(pre_score: u32, post_score: u32, max_score: u32) -> Option<f64> {
    if pre_score >= max_score {
        return None;
    }
    Some((post_score as f64 - pre_score as f64) / (max_score - pre_score) as f64)
}
