//! Behavior cloning and importance-sampled policy gradient (POIS).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain::{LoggedStep, Trajectory, N_ACTIONS};
use crate::error::{Error, Result};
use crate::nnet::{accumulate_backward_logits, forward, Activation, AdamState, Mlp, ParameterSet};
use crate::policy::{policy_spec, PolicyCheckpoint, Provenance};
use crate::seed::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Algorithm {
    Bc,
    Pois,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Bc => "BC",
            Algorithm::Pois => "POIS",
        }
    }
}

/// One point of the offline hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineConfig {
    pub algorithm: Algorithm,
    pub hidden_dims: Vec<usize>,
    pub epochs: u32,
    /// Weight of the normalized-ESS bonus; POIS only.
    pub ess_penalty: f64,
    pub activation: Activation,
    pub learning_rate: f64,
    /// Minibatch size in decision points (BC).
    pub bc_batch_steps: usize,
    /// Minibatch size in trajectories (POIS).
    pub pois_batch_trajectories: usize,
    pub seed: u64,
}

impl OfflineConfig {
    pub fn new(algorithm: Algorithm, hidden_dims: &[usize], epochs: u32, ess_penalty: f64) -> Self {
        Self {
            algorithm,
            hidden_dims: hidden_dims.to_vec(),
            epochs,
            ess_penalty,
            activation: Activation::Gelu,
            learning_rate: 0.0025,
            bc_batch_steps: 16,
            pois_batch_trajectories: 16,
            seed: 0,
        }
    }

    pub fn n_params(&self) -> usize {
        policy_spec(&self.hidden_dims, self.activation).n_params()
    }

    fn initial_policy(&self) -> Result<Mlp> {
        let spec = policy_spec(&self.hidden_dims, self.activation);
        spec.validate()?;
        Ok(Mlp::init(spec, &mut seed::rng(self.seed, &[stream::POLICY_INIT])))
    }

    fn checkpoint(&self, policy: Mlp) -> PolicyCheckpoint {
        let provenance = match self.algorithm {
            Algorithm::Bc => Provenance::Bc,
            Algorithm::Pois => Provenance::Pois,
        };
        PolicyCheckpoint::new(policy, None, provenance, vec![self.seed])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OfflineDiagnostics {
    /// Full-dataset training objective after each epoch (KL for BC, the
    /// maximized objective for POIS).
    pub epoch_objective: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Mean `KL(pi(.|s) || p(.|s))` over steps and its gradient.
pub fn bc_loss_and_grad(policy: &Mlp, steps: &[&LoggedStep]) -> Result<(f64, ParameterSet)> {
    let mut grad = ParameterSet::zeros(&policy.spec);
    let n = steps.len().max(1) as f64;
    let mut loss = 0.0;
    for s in steps {
        let (pi, cache) = forward(&policy.spec, &policy.params, &s.normalized)?;
        let log_ratio: Vec<f64> = (0..N_ACTIONS).map(|j| pi[j].ln() - s.behavior_probs[j].ln()).collect();
        let kl: f64 = (0..N_ACTIONS).map(|j| pi[j] * log_ratio[j]).sum();
        loss += kl;
        let g: Vec<f64> = (0..N_ACTIONS).map(|j| pi[j] * (log_ratio[j] - kl) / n).collect();
        accumulate_backward_logits(&policy.spec, &policy.params, &cache, &g, &mut grad)?;
    }
    Ok((loss / n, grad))
}

pub fn bc_loss(policy: &Mlp, dataset: &[Trajectory]) -> Result<f64> {
    let steps: Vec<&LoggedStep> = dataset.iter().flat_map(|t| &t.steps).collect();
    Ok(bc_loss_and_grad(policy, &steps)?.0)
}

fn log_weight(policy: &Mlp, t: &Trajectory) -> Result<f64> {
    let mut lw = 0.0;
    for s in &t.steps {
        let p = policy.output(&s.normalized)?;
        lw += p[s.action.index()].ln() - s.behavior_prob().ln();
    }
    Ok(lw)
}

#[derive(Debug, Clone)]
pub struct PoisEval {
    /// `WIS + eta * ESS / n`.
    pub objective: f64,
    pub wis: f64,
    pub ess: f64,
    pub grad: ParameterSet,
}

/// The POIS objective and its exact gradient. Weights enter through
/// `exp(lw_i - max lw)`; every term is invariant to that shift.
pub fn pois_objective_and_grad(policy: &Mlp, trajectories: &[&Trajectory], eta: f64) -> Result<PoisEval> {
    if trajectories.is_empty() {
        return Err(Error::Usage("POIS objective needs at least one trajectory".into()));
    }
    let lw = trajectories
        .iter()
        .map(|t| log_weight(policy, t))
        .collect::<Result<Vec<f64>>>()?;
    let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::Numeric("importance weights collapsed".into()));
    }
    let w: Vec<f64> = lw.iter().map(|v| (v - m).exp()).collect();
    let n = w.len() as f64;
    let s: f64 = w.iter().sum();
    let q: f64 = w.iter().map(|v| v * v).sum();
    let wis = w
        .iter()
        .zip(trajectories)
        .map(|(wi, t)| wi * t.terminal_reward)
        .sum::<f64>()
        / s;
    let ess = s * s / q;

    let mut grad = ParameterSet::zeros(&policy.spec);
    for (t, &wi) in trajectories.iter().zip(&w) {
        // d objective / d lw_i
        let d_wis = (t.terminal_reward - wis) / s;
        let d_ess = 2.0 * s / (n * q) * (1.0 - s * wi / q);
        let coef = wi * (d_wis + eta * d_ess);
        if coef == 0.0 {
            continue;
        }
        for step in &t.steps {
            let (p, cache) = forward(&policy.spec, &policy.params, &step.normalized)?;
            let a = step.action.index();
            let g: Vec<f64> = (0..N_ACTIONS)
                .map(|j| coef * (if j == a { 1.0 } else { 0.0 } - p[j]))
                .collect();
            accumulate_backward_logits(&policy.spec, &policy.params, &cache, &g, &mut grad)?;
        }
    }
    Ok(PoisEval {
        objective: wis + eta * ess / n,
        wis,
        ess,
        grad,
    })
}

fn check_dataset(dataset: &[Trajectory]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Usage("offline training needs a non-empty dataset".into()));
    }
    Ok(())
}

/// Minimizes mean KL to the logged behavior distributions with minibatch
/// Adam, `cfg.epochs` passes over the decision points.
pub fn bc_train(dataset: &[Trajectory], cfg: &OfflineConfig) -> Result<(PolicyCheckpoint, OfflineDiagnostics)> {
    check_dataset(dataset)?;
    let mut policy = cfg.initial_policy()?;
    let steps: Vec<&LoggedStep> = dataset.iter().flat_map(|t| &t.steps).collect();
    let mut diag = OfflineDiagnostics::default();
    if steps.is_empty() {
        diag.warnings
            .push("dataset has no decision points; policy left at initialization".into());
        return Ok((cfg.checkpoint(policy), diag));
    }
    let mut adam = AdamState::new(policy.spec.n_params(), cfg.learning_rate);
    let mut rng = seed::rng(cfg.seed, &[stream::SHUFFLE]);
    let mut order: Vec<usize> = (0..steps.len()).collect();
    let batch = cfg.bc_batch_steps.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mb: Vec<&LoggedStep> = chunk.iter().map(|&i| steps[i]).collect();
            let (_, grad) = bc_loss_and_grad(&policy, &mb)?;
            adam.step(&mut policy.params, &grad)?;
        }
        diag.epoch_objective.push(bc_loss_and_grad(&policy, &steps)?.0);
    }
    if !policy.params.is_finite() {
        return Err(Error::Numeric("behavior cloning diverged".into()));
    }
    Ok((cfg.checkpoint(policy), diag))
}

/// Gradient ascent on `WIS + eta * ESS / n` with minibatches of whole
/// trajectories, `cfg.epochs` passes over the dataset.
pub fn pois_train(dataset: &[Trajectory], cfg: &OfflineConfig) -> Result<(PolicyCheckpoint, OfflineDiagnostics)> {
    check_dataset(dataset)?;
    let mut policy = cfg.initial_policy()?;
    let all: Vec<&Trajectory> = dataset.iter().collect();
    let mut diag = OfflineDiagnostics::default();
    let mut adam = AdamState::new(policy.spec.n_params(), cfg.learning_rate);
    let mut rng = seed::rng(cfg.seed, &[stream::SHUFFLE]);
    let mut order: Vec<usize> = (0..all.len()).collect();
    let batch = cfg.pois_batch_trajectories.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mb: Vec<&Trajectory> = chunk.iter().map(|&i| all[i]).collect();
            let mut eval = pois_objective_and_grad(&policy, &mb, cfg.ess_penalty)?;
            eval.grad.scale(-1.0);
            adam.step(&mut policy.params, &eval.grad)?;
        }
        let full = pois_objective_and_grad(&policy, &all, cfg.ess_penalty)?;
        if all.len() > 1 && full.ess < 1.0 + 1e-9 {
            diag.warnings.push(format!(
                "epoch {}: effective sample size collapsed to {}",
                epoch + 1,
                full.ess
            ));
        }
        diag.epoch_objective.push(full.objective);
    }
    if !policy.params.is_finite() {
        return Err(Error::Numeric("POIS training diverged".into()));
    }
    Ok((cfg.checkpoint(policy), diag))
}

pub fn train(dataset: &[Trajectory], cfg: &OfflineConfig) -> Result<(PolicyCheckpoint, OfflineDiagnostics)> {
    match cfg.algorithm {
        Algorithm::Bc => bc_train(dataset, cfg),
        Algorithm::Pois => pois_train(dataset, cfg),
    }
}
