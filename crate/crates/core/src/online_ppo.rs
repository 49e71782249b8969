//! Online PPO over batches of simulated students.
//!
//! Each update collects `students_per_update` episodes with the current
//! policy, then runs `epochs_per_update` full-batch Adam passes on the
//! clipped surrogate. Policy and value networks are separate and have their
//! own optimizers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{Trajectory, N_ACTIONS, N_FEATURES};
use crate::error::{Error, Result};
use crate::nnet::{accumulate_backward_logits, forward, Activation, AdamState, Mlp, ParameterSet};
use crate::policy::{policy_spec, value_spec, PolicyCheckpoint, Provenance};
use crate::reward::{step_rewards, RewardParams};
use crate::runtime::config::parse_toml;
use crate::seed::{self, stream};
use crate::simulator::{collect_episodes, SimulatorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub students_per_update: u64,
    pub epochs_per_update: u32,
    pub discount: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub total_students: u64,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            learning_rate: 0.0025,
            students_per_update: 10,
            epochs_per_update: 4,
            discount: 1.0,
            gae_lambda: 1.0,
            value_coef: 0.5,
            entropy_coef: 0.0,
            total_students: 280,
            seed: 0,
            hidden_dims: vec![16, 16],
            activation: Activation::Tanh,
        }
    }
}

impl PpoConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = parse_toml(text, "ppo")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |f: &str, m: &str| Err(Error::config(format!("ppo.{f}"), m));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return fail("clip_epsilon", "must be in (0, 1)");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return fail("discount", "must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail("gae_lambda", "must be in [0, 1]");
        }
        if self.students_per_update == 0 {
            return fail("students_per_update", "must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", "must be positive");
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0) {
            return fail("value_coef", "coefficients must be >= 0");
        }
        policy_spec(&self.hidden_dims, self.activation)
            .validate()
            .map_err(|_| Error::config("ppo.hidden_dims", format!("unsupported shape {:?}", self.hidden_dims)))
    }

    pub fn n_updates(&self) -> u64 {
        self.total_students.div_ceil(self.students_per_update)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingDiagnostics {
    pub update_index: u64,
    pub mean_reward: f64,
    /// Fraction of (step, epoch) evaluations with `|r - 1| > eps`.
    pub clip_fraction: f64,
    /// Mean `KL(old || new)` over the batch's states.
    pub approx_kl: f64,
    /// Value MSE before the update.
    pub value_loss: f64,
    /// Mean entropy of the collecting policy.
    pub entropy: f64,
}

/// Per-step `(advantage, return)` with GAE. Rewards come from
/// [`step_rewards`]; bootstrapping past the last step uses 0.
pub fn compute_advantages(
    t: &Trajectory,
    value: &Mlp,
    cfg: &PpoConfig,
    rewards: &RewardParams,
) -> Result<Vec<(f64, f64)>> {
    let r = step_rewards(t, rewards);
    let values = t
        .steps
        .iter()
        .map(|s| Ok(value.output(&s.normalized)?[0]))
        .collect::<Result<Vec<f64>>>()?;
    let n = r.len();
    let mut out = vec![(0.0, 0.0); n];
    let (mut adv, mut ret) = (0.0, 0.0);
    for i in (0..n).rev() {
        let next_v = if i + 1 < n { values[i + 1] } else { 0.0 };
        let delta = r[i] + cfg.discount * next_v - values[i];
        adv = delta + cfg.discount * cfg.gae_lambda * adv;
        ret = r[i] + cfg.discount * ret;
        out[i] = (adv, ret);
    }
    Ok(out)
}

/// One decision point prepared for a surrogate pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub x: [f64; N_FEATURES],
    pub action: usize,
    pub behavior_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// `min(r * a, clip(r, 1 - eps, 1 + eps) * a)`.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[derive(Debug, Clone)]
pub struct SurrogateEval {
    /// Mean clipped surrogate plus `entropy_coef` times mean entropy.
    pub objective: f64,
    /// Gradient of `objective` with respect to the policy parameters.
    pub grad: ParameterSet,
    pub clipped: usize,
}

/// Evaluates the PPO objective and its exact gradient at `policy`.
pub fn surrogate(policy: &Mlp, samples: &[PpoSample], eps: f64, entropy_coef: f64) -> Result<SurrogateEval> {
    let mut grad = ParameterSet::zeros(&policy.spec);
    let mut objective = 0.0;
    let mut clipped = 0;
    let n = samples.len().max(1) as f64;
    for s in samples {
        let (p, cache) = forward(&policy.spec, &policy.params, &s.x)?;
        let ratio = p[s.action] / s.behavior_prob;
        let a = s.advantage;
        objective += clipped_term(ratio, a, eps);
        if (ratio - 1.0).abs() > eps {
            clipped += 1;
        }
        // the clipped branch is flat in theta
        let active = !((a > 0.0 && ratio > 1.0 + eps) || (a < 0.0 && ratio < 1.0 - eps));
        let coef = if active { a * ratio } else { 0.0 };
        let h = entropy(&p);
        objective += entropy_coef * h;
        let mut g_logits = [0.0; N_ACTIONS];
        for j in 0..N_ACTIONS {
            let onehot = if j == s.action { 1.0 } else { 0.0 };
            g_logits[j] = coef * (onehot - p[j]);
            if entropy_coef != 0.0 && p[j] > 0.0 {
                g_logits[j] -= entropy_coef * p[j] * (p[j].ln() + h);
            }
            g_logits[j] /= n;
        }
        accumulate_backward_logits(&policy.spec, &policy.params, &cache, &g_logits, &mut grad)?;
    }
    Ok(SurrogateEval {
        objective: objective / n,
        grad,
        clipped,
    })
}

/// Mutable trainer state: networks and their optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoLearner {
    pub policy: Mlp,
    pub value: Mlp,
    pub policy_adam: AdamState,
    pub value_adam: AdamState,
    pub updates_done: u64,
    pub seed: u64,
}

impl PpoLearner {
    pub fn new(cfg: &PpoConfig) -> Self {
        let policy = Mlp::init(
            policy_spec(&cfg.hidden_dims, cfg.activation),
            &mut seed::rng(cfg.seed, &[stream::POLICY_INIT]),
        );
        let value = Mlp::init(
            value_spec(&cfg.hidden_dims, cfg.activation),
            &mut seed::rng(cfg.seed, &[stream::VALUE_INIT]),
        );
        Self {
            policy_adam: AdamState::new(policy.spec.n_params(), cfg.learning_rate),
            value_adam: AdamState::new(value.spec.n_params(), cfg.learning_rate),
            policy,
            value,
            updates_done: 0,
            seed: cfg.seed,
        }
    }

    pub fn checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint::new(
            self.policy.clone(),
            Some(self.value.clone()),
            Provenance::OnlinePpo,
            vec![self.seed, self.updates_done],
        )
    }

    /// Builds surrogate samples from a batch using the current value net.
    pub fn samples(&self, batch: &[Trajectory], cfg: &PpoConfig, rewards: &RewardParams) -> Result<Vec<PpoSample>> {
        let mut out = Vec::new();
        for t in batch {
            let adv = compute_advantages(t, &self.value, cfg, rewards)?;
            for (s, (a, g)) in t.steps.iter().zip(adv) {
                out.push(PpoSample {
                    x: s.normalized,
                    action: s.action.index(),
                    behavior_prob: s.behavior_prob(),
                    advantage: a,
                    ret: g,
                });
            }
        }
        Ok(out)
    }

    /// One PPO update on `batch`.
    pub fn update(
        &mut self,
        batch: &[Trajectory],
        cfg: &PpoConfig,
        rewards: &RewardParams,
    ) -> Result<TrainingDiagnostics> {
        if batch.is_empty() {
            return Err(Error::Usage("PPO update needs a non-empty batch".into()));
        }
        let mut samples = self.samples(batch, cfg, rewards)?;
        let n = samples.len();
        let mean_reward = batch.iter().map(|t| t.terminal_reward).sum::<f64>() / batch.len() as f64;

        if n > 1 {
            let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n as f64;
            let var = samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n as f64;
            if var >= 1e-12 {
                let sd = var.sqrt();
                for s in &mut samples {
                    s.advantage = (s.advantage - mean) / sd;
                }
            }
        }

        let old: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| self.policy.output(&s.x))
            .collect::<Result<_>>()?;
        let entropy_before = old.iter().map(|p| entropy(p)).sum::<f64>() / n.max(1) as f64;
        let mut value_loss = 0.0;
        let mut clipped = 0;

        for epoch in 0..cfg.epochs_per_update {
            let eval = surrogate(&self.policy, &samples, cfg.clip_epsilon, cfg.entropy_coef)?;
            clipped += eval.clipped;
            let mut ascent = eval.grad;
            ascent.scale(-1.0);
            self.policy_adam.step(&mut self.policy.params, &ascent)?;

            let mut vgrad = ParameterSet::zeros(&self.value.spec);
            let mut mse = 0.0;
            for s in &samples {
                let (v, cache) = self.value.forward(&s.x)?;
                let err = v[0] - s.ret;
                mse += err * err;
                let g = [2.0 * cfg.value_coef * err / n as f64];
                accumulate_backward_logits(&self.value.spec, &self.value.params, &cache, &g, &mut vgrad)?;
            }
            if epoch == 0 {
                value_loss = mse / n.max(1) as f64;
            }
            self.value_adam.step(&mut self.value.params, &vgrad)?;
        }

        let mut kl = 0.0;
        for (s, p_old) in samples.iter().zip(&old) {
            let p_new = self.policy.output(&s.x)?;
            kl += p_old
                .iter()
                .zip(&p_new)
                .map(|(a, b)| if *a > 0.0 { a * (a / b).ln() } else { 0.0 })
                .sum::<f64>();
        }
        if !self.policy.params.is_finite() || !self.value.params.is_finite() {
            return Err(Error::Numeric("PPO update produced non-finite parameters".into()));
        }

        self.updates_done += 1;
        let evals = (n * cfg.epochs_per_update as usize).max(1);
        Ok(TrainingDiagnostics {
            update_index: self.updates_done,
            mean_reward,
            clip_fraction: clipped as f64 / evals as f64,
            approx_kl: kl / n.max(1) as f64,
            value_loss,
            entropy: entropy_before,
        })
    }
}

/// Artifacts of a [`train_online`] run.
#[derive(Debug, Clone)]
pub struct OnlineRun {
    pub diagnostics: Vec<TrainingDiagnostics>,
    pub final_checkpoint: PathBuf,
    pub learner: PpoLearner,
}

pub fn checkpoint_path(dir: &Path, index: u64) -> PathBuf {
    dir.join(format!("checkpoint_{index:04}.txt"))
}

const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
const STATE_FILE: &str = "trainer_state.json";

fn write_diagnostics(path: &Path, rows: &[TrainingDiagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record([
            "update_index",
            "mean_reward",
            "clip_fraction",
            "approx_kl",
            "value_loss",
            "entropy",
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_diagnostics(path: &Path) -> Result<Vec<TrainingDiagnostics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    config: PpoConfig,
    learner: PpoLearner,
}

/// Alternates collection and updates until `cfg.total_students` have been
/// seen, writing a checkpoint and a diagnostics row per update. With
/// `resume`, continues from `trainer_state.json` in `out_dir`; the result is
/// identical to an uninterrupted run.
pub fn train_online(
    cfg: &PpoConfig,
    sim: &SimulatorConfig,
    rewards: &RewardParams,
    out_dir: &Path,
    resume: bool,
) -> Result<OnlineRun> {
    cfg.validate()?;
    sim.validate()?;
    rewards.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let state_path = out_dir.join(STATE_FILE);
    let diag_path = out_dir.join(DIAGNOSTICS_FILE);

    let (mut learner, mut diagnostics) = if resume && state_path.exists() {
        let text = fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let state: TrainerState =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("malformed trainer state: {e}")))?;
        let same_run = PpoConfig {
            total_students: cfg.total_students,
            ..state.config.clone()
        } == *cfg;
        if !same_run {
            return Err(Error::config(
                "ppo",
                "resume requires the original configuration (only total_students may change)",
            ));
        }
        let mut rows = read_diagnostics(&diag_path)?;
        rows.truncate(state.learner.updates_done as usize);
        (state.learner, rows)
    } else {
        let learner = PpoLearner::new(cfg);
        learner.checkpoint().save(&checkpoint_path(out_dir, 0))?;
        (learner, Vec::new())
    };

    let batch = cfg.students_per_update;
    for u in learner.updates_done..cfg.n_updates() {
        let first = u * batch;
        let count = batch.min(cfg.total_students - first);
        let policy = learner.checkpoint();
        let episodes = collect_episodes(&policy, sim, rewards, cfg.seed, stream::COLLECT, first, count)?;
        diagnostics.push(learner.update(&episodes, cfg, rewards)?);
        learner
            .checkpoint()
            .save(&checkpoint_path(out_dir, learner.updates_done))?;
        write_diagnostics(&diag_path, &diagnostics)?;
        let state = TrainerState {
            config: cfg.clone(),
            learner: learner.clone(),
        };
        let text = serde_json::to_string(&state).expect("trainer state serializes");
        fs::write(&state_path, text).map_err(|e| Error::io(&state_path, e))?;
    }
    if diagnostics.is_empty() {
        write_diagnostics(&diag_path, &diagnostics)?;
    }

    Ok(OnlineRun {
        final_checkpoint: checkpoint_path(out_dir, learner.updates_done),
        diagnostics,
        learner,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::*;
    use crate::simulator::run_episode;

    fn small_cfg() -> PpoConfig {
        PpoConfig {
            hidden_dims: vec![4],
            ..Default::default()
        }
    }

    fn episode(seed_: u64) -> Trajectory {
        run_episode(
            &PolicyCheckpoint::uniform(),
            &SimulatorConfig::default(),
            &RewardParams::default(),
            seed_,
            &mut seed::rng(seed_, &[]),
        )
        .unwrap()
    }

    fn non_empty_episode() -> Trajectory {
        (0..).map(episode).find(|t| t.steps.len() >= 3).unwrap()
    }

    #[test]
    fn clip_example() {
        assert!((clipped_term(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert_eq!(clipped_term(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_term(1.0, 2.0, 0.2), 2.0);
    }

    #[test]
    fn zero_baseline_advantages_equal_return() {
        let t = non_empty_episode();
        let zero = Mlp::zeros(value_spec(&[4], Activation::Tanh));
        let r = RewardParams::default();
        // terminal-only reward
        let mut t2 = t.clone();
        for s in &mut t2.steps {
            s.events.hint_given = false;
            s.events.helpful_click = false;
            s.action = PedagogicalAction::Encouragement;
        }
        let total = crate::reward::trajectory_reward(&t2, &r).unwrap();
        for (a, g) in compute_advantages(&t2, &zero, &small_cfg(), &r).unwrap() {
            assert!((g - total).abs() < 1e-12);
            assert_eq!(a, g);
        }
    }

    #[test]
    fn perfect_baseline_zero_advantage() {
        // a single-step episode with a constant-output value net equal to its return
        let mut t = non_empty_episode();
        t.steps.truncate(1);
        t.steps[0].events = StepEvent::default();
        t.quit = false;
        t.post_items = Some(t.pre_items.iter().map(|_| true).collect());
        let r = RewardParams::default();
        let g = crate::reward::trajectory_reward(&t, &r).unwrap();
        let mut v = Mlp::zeros(value_spec(&[], Activation::Tanh));
        v.params.layers[0].biases[0] = g;
        let out = compute_advantages(&t, &v, &small_cfg(), &r).unwrap();
        assert_eq!(out, vec![(0.0, g)]);
    }

    #[test]
    fn zero_discount_returns_immediate_rewards() {
        let t = non_empty_episode();
        let r = RewardParams::default();
        let cfg = PpoConfig {
            discount: 0.0,
            ..small_cfg()
        };
        let zero = Mlp::zeros(value_spec(&[4], Activation::Tanh));
        let out = compute_advantages(&t, &zero, &cfg, &r).unwrap();
        for ((_, g), rt) in out.iter().zip(step_rewards(&t, &r)) {
            assert!((g - rt).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_advantage_leaves_policy_unchanged() {
        let cfg = small_cfg();
        let learner = PpoLearner::new(&cfg);
        let samples: Vec<PpoSample> = non_empty_episode()
            .steps
            .iter()
            .map(|s| PpoSample {
                x: s.normalized,
                action: s.action.index(),
                behavior_prob: 0.3,
                advantage: 0.0,
                ret: 1.0,
            })
            .collect();
        let eval = surrogate(&learner.policy, &samples, 0.2, 0.0).unwrap();
        assert!(eval.grad.values().all(|&g| g == 0.0));
        let mut p = learner.policy.clone();
        let mut adam = AdamState::new(p.spec.n_params(), 0.0025);
        adam.step(&mut p.params, &eval.grad).unwrap();
        assert_eq!(p, learner.policy);
    }

    #[test]
    fn clip_fraction_zero_inside_trust_region() {
        let cfg = small_cfg();
        let learner = PpoLearner::new(&cfg);
        let batch: Vec<Trajectory> = (0..5).map(episode).collect();
        let samples: Vec<PpoSample> = learner
            .samples(&batch, &cfg, &RewardParams::default())
            .unwrap()
            .into_iter()
            .map(|mut s| {
                // behavior = current policy, so r = 1
                s.behavior_prob = learner.policy.output(&s.x).unwrap()[s.action];
                s
            })
            .collect();
        assert_eq!(surrogate(&learner.policy, &samples, 0.2, 0.0).unwrap().clipped, 0);
    }

    #[test]
    fn update_requires_batch() {
        let cfg = small_cfg();
        let mut learner = PpoLearner::new(&cfg);
        assert!(matches!(
            learner.update(&[], &cfg, &RewardParams::default()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn config_validation_paths() {
        let err = PpoConfig::from_toml_str("clip_epsilon = 1.5").unwrap_err();
        assert!(
            matches!(err, Error::Config { ref path, .. } if path == "ppo.clip_epsilon"),
            "{err}"
        );
        let err = PpoConfig::from_toml_str("bogus = 1").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert_eq!(PpoConfig::from_toml_str("").unwrap(), PpoConfig::default());
    }

    #[test]
    fn zero_students_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PpoConfig {
            total_students: 0,
            ..small_cfg()
        };
        let run = train_online(
            &cfg,
            &SimulatorConfig::default(),
            &RewardParams::default(),
            dir.path(),
            false,
        )
        .unwrap();
        assert!(run.diagnostics.is_empty());
        assert!(checkpoint_path(dir.path(), 0).exists());
        assert!(!checkpoint_path(dir.path(), 1).exists());
        assert!(read_diagnostics(&dir.path().join(DIAGNOSTICS_FILE)).unwrap().is_empty());
    }
}
