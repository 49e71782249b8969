//! Generative student model.
//!
//! This is a stand-in for real children: a logistic interaction model over
//! a latent state (knowledge, frustration, help seeking) that is richer than
//! the eight observed features. Action effects:
//!
//! * `DirectHint` has the largest success bonus but teaches the least,
//! * `GuidedPrompt` teaches the most when it succeeds,
//! * `Encouragement` relieves frustration,
//! * `Acknowledgment` is neutral.
//!
//! Failures raise frustration (more so for anxious students) and frustration
//! drives the quit hazard, so the best action depends on the student.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand_distr::{Beta, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{
    floor_probs, normalize, LoggedStep, ObservationVector, PedagogicalAction, StepEvent, Trajectory, ANXIETY_RANGE,
    N_ACTIONS, N_ITEMS, N_TASK_STEPS, SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::policy::{sample_action, PolicyCheckpoint};
use crate::reward::{terminal_reward, RewardParams};
use crate::runtime::config::parse_toml;
use crate::seed;

const DEFAULT_CONFIG: &str = include_str!("../../../configs/simulator.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    pub knowledge_alpha: f64,
    pub knowledge_beta: f64,
    pub knowledge_scale: f64,
    #[serde(default)]
    pub knowledge_fixed: Option<f64>,
    pub frustration_alpha: f64,
    pub frustration_beta: f64,
    pub help_seeking_alpha: f64,
    pub help_seeking_beta: f64,
    pub grade_weights: [f64; 3],
    pub anxiety_mean: f64,
    pub anxiety_sd: f64,
    pub difficulty_mean: [f64; N_TASK_STEPS as usize],
    pub difficulty_sd: f64,
    pub quit_base_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessConfig {
    pub knowledge_coef: f64,
    pub difficulty_coef: f64,
    pub action_bonus: [f64; N_ACTIONS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningConfig {
    pub gain_on_success: [f64; N_ACTIONS],
    pub success_relief: f64,
    pub encouragement_relief: f64,
    pub failure_frustration: f64,
    pub anxiety_frustration_gain: f64,
    pub failure_help_seeking: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuitConfig {
    pub intercept: f64,
    pub frustration: f64,
    pub failed_attempts: f64,
    pub help_seeking: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionConfig {
    pub nlp_gain: f64,
    pub nlp_noise: f64,
    pub helpful_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub max_messages_per_step: u32,
    pub population: PopulationConfig,
    pub success: SuccessConfig,
    pub learning: LearningConfig,
    pub quit: QuitConfig,
    pub emission: EmissionConfig,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_CONFIG).expect("shipped simulator config is valid")
    }
}

fn check(ok: bool, path: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(path, msg))
    }
}

impl SimulatorConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = parse_toml(text, "simulator")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.population;
        check(
            self.schema_version == SCHEMA_VERSION,
            "simulator.schema_version",
            "unsupported version",
        )?;
        for (name, v) in [
            ("knowledge_alpha", p.knowledge_alpha),
            ("knowledge_beta", p.knowledge_beta),
            ("frustration_alpha", p.frustration_alpha),
            ("frustration_beta", p.frustration_beta),
            ("help_seeking_alpha", p.help_seeking_alpha),
            ("help_seeking_beta", p.help_seeking_beta),
        ] {
            check(
                v > 0.0 && v.is_finite(),
                &format!("simulator.population.{name}"),
                "must be positive",
            )?;
        }
        check(
            p.knowledge_scale > 0.0 && p.knowledge_scale <= 1.0,
            "simulator.population.knowledge_scale",
            "must be in (0, 1]",
        )?;
        if let Some(k) = p.knowledge_fixed {
            check(
                (0.0..=1.0).contains(&k),
                "simulator.population.knowledge_fixed",
                "must be in [0, 1]",
            )?;
        }
        check(
            p.grade_weights.iter().all(|&w| w >= 0.0) && p.grade_weights.iter().sum::<f64>() > 0.0,
            "simulator.population.grade_weights",
            "must be non-negative with positive total",
        )?;
        for (name, v) in [
            ("anxiety_sd", p.anxiety_sd),
            ("difficulty_sd", p.difficulty_sd),
            ("quit_base_sd", p.quit_base_sd),
        ] {
            check(
                v >= 0.0 && v.is_finite(),
                &format!("simulator.population.{name}"),
                "must be >= 0",
            )?;
        }
        check(
            self.learning.gain_on_success.iter().all(|g| (0.0..=1.0).contains(g)),
            "simulator.learning.gain_on_success",
            "entries must be in [0, 1]",
        )?;
        for (name, v) in [
            ("success_relief", self.learning.success_relief),
            ("encouragement_relief", self.learning.encouragement_relief),
            ("failure_frustration", self.learning.failure_frustration),
            ("anxiety_frustration_gain", self.learning.anxiety_frustration_gain),
            ("failure_help_seeking", self.learning.failure_help_seeking),
        ] {
            check(
                v >= 0.0 && v.is_finite(),
                &format!("simulator.learning.{name}"),
                "must be >= 0",
            )?;
        }
        check(
            self.emission.nlp_noise >= 0.0,
            "simulator.emission.nlp_noise",
            "must be >= 0",
        )?;
        check(
            self.emission.helpful_scale >= 0.0,
            "simulator.emission.helpful_scale",
            "must be >= 0",
        )?;
        Ok(())
    }

    /// Expected pretest score of a freshly spawned student.
    pub fn mean_pre_score(&self) -> f64 {
        let p = &self.population;
        let mean_k = match p.knowledge_fixed {
            Some(k) => k,
            None => p.knowledge_scale * p.knowledge_alpha / (p.knowledge_alpha + p.knowledge_beta),
        };
        N_ITEMS as f64 * mean_k
    }
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Hidden student state. `anxiety` and `grade` are static.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentLatent {
    pub knowledge: f64,
    pub frustration: f64,
    pub help_seeking: f64,
    pub anxiety: u32,
    pub grade: u32,
    pub difficulty: [f64; N_TASK_STEPS as usize],
    /// Additive logit offset on the quit hazard.
    pub quit_base: f64,
}

/// Latent state plus task progress.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentState {
    pub latent: StudentLatent,
    pub pre_score: u32,
    /// Current task, 1-based.
    pub step: u32,
    pub failed_attempts: u32,
    pub messages_in_step: u32,
    pub finished: bool,
    pub quit: bool,
}

impl StudentState {
    pub fn new(latent: StudentLatent, pre_score: u32) -> Self {
        Self {
            latent,
            pre_score,
            step: 1,
            failed_attempts: 0,
            messages_in_step: 0,
            finished: false,
            quit: false,
        }
    }

    pub fn terminated(&self) -> bool {
        self.finished || self.quit
    }

    fn advance_step(&mut self) {
        self.failed_attempts = 0;
        self.messages_in_step = 0;
        if self.step >= N_TASK_STEPS {
            self.finished = true;
        } else {
            self.step += 1;
        }
    }
}

fn normalized_anxiety(anxiety: u32) -> f64 {
    let (lo, hi) = ANXIETY_RANGE;
    (anxiety.clamp(lo, hi) - lo) as f64 / (hi - lo) as f64
}

pub fn success_probability(cfg: &SimulatorConfig, latent: &StudentLatent, step: u32, action: PedagogicalAction) -> f64 {
    let s = &cfg.success;
    let d = latent.difficulty[(step.clamp(1, N_TASK_STEPS) - 1) as usize];
    logistic(s.knowledge_coef * latent.knowledge - s.difficulty_coef * d + s.action_bonus[action.index()])
}

pub fn quit_probability(cfg: &SimulatorConfig, latent: &StudentLatent, failed_attempts: u32) -> f64 {
    let q = &cfg.quit;
    logistic(
        q.intercept
            + latent.quit_base
            + q.frustration * latent.frustration
            + q.failed_attempts * failed_attempts as f64
            - q.help_seeking * latent.help_seeking,
    )
}

/// Probability of answering one posttest item correctly.
pub fn item_probability(knowledge: f64) -> f64 {
    knowledge.clamp(0.0, 1.0)
}

fn draw_items<R: rand::Rng>(knowledge: f64, rng: &mut R) -> Vec<bool> {
    let p = item_probability(knowledge);
    (0..N_ITEMS).map(|_| rng.random::<f64>() < p).collect()
}

fn beta<R: rand::Rng>(a: f64, b: f64, rng: &mut R) -> f64 {
    Beta::new(a, b).expect("validated beta parameters").sample(rng)
}

fn normal<R: rand::Rng>(mean: f64, sd: f64, rng: &mut R) -> f64 {
    Normal::new(mean, sd).expect("validated sd").sample(rng)
}

pub fn spawn_student<R: rand::Rng>(cfg: &SimulatorConfig, rng: &mut R) -> (StudentLatent, Vec<bool>) {
    let p = &cfg.population;
    let knowledge = match p.knowledge_fixed {
        Some(k) => k,
        None => p.knowledge_scale * beta(p.knowledge_alpha, p.knowledge_beta, rng),
    };
    let frustration = beta(p.frustration_alpha, p.frustration_beta, rng);
    let help_seeking = beta(p.help_seeking_alpha, p.help_seeking_beta, rng);
    let grade = 3 + WeightedIndex::new(p.grade_weights)
        .expect("validated weights")
        .sample(rng) as u32;
    let anxiety = normal(p.anxiety_mean, p.anxiety_sd, rng)
        .round()
        .clamp(ANXIETY_RANGE.0 as f64, ANXIETY_RANGE.1 as f64) as u32;
    let mut difficulty = p.difficulty_mean;
    for d in &mut difficulty {
        *d += normal(0.0, p.difficulty_sd, rng);
    }
    let quit_base = normal(0.0, p.quit_base_sd, rng);
    let pre_items = draw_items(knowledge, rng);
    (
        StudentLatent {
            knowledge,
            frustration,
            help_seeking,
            anxiety,
            grade,
            difficulty,
            quit_base,
        },
        pre_items,
    )
}

/// What the student's next message looks like to the policy.
pub fn observe<R: rand::Rng>(cfg: &SimulatorConfig, state: &StudentState, rng: &mut R) -> ObservationVector {
    let e = &cfg.emission;
    let mut emit = |x: f64| logistic(e.nlp_gain * (x - 0.5) + normal(0.0, e.nlp_noise, rng));
    let l = &state.latent;
    let nlp_pos = emit(1.0 - l.frustration);
    let nlp_neg = emit(l.frustration);
    let nlp_help = emit(l.help_seeking);
    ObservationVector {
        grade: l.grade,
        pre_score: state.pre_score,
        step: state.step,
        failed_attempts: state.failed_attempts,
        nlp_pos,
        nlp_neg,
        nlp_help,
        anxiety: l.anxiety,
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub state: StudentState,
    /// Features of the next decision point; meaningless once terminated.
    pub observation: ObservationVector,
    pub event: StepEvent,
    pub knowledge_gain: f64,
}

/// Applies one tutor action to the student.
pub fn step_interaction<R: rand::Rng>(
    cfg: &SimulatorConfig,
    state: &StudentState,
    action: PedagogicalAction,
    rng: &mut R,
) -> Result<Transition> {
    if state.terminated() {
        return Err(Error::Usage("episode already terminated".into()));
    }
    let learn = &cfg.learning;
    let mut next = state.clone();
    let mut event = StepEvent {
        hint_given: action == PedagogicalAction::DirectHint,
        ..Default::default()
    };

    let p_success = success_probability(cfg, &state.latent, state.step, action);
    let success = rng.random::<f64>() < p_success;
    next.messages_in_step += 1;

    let mut gain = 0.0;
    {
        let l = &mut next.latent;
        if success {
            gain = learn.gain_on_success[action.index()] * (1.0 - l.knowledge);
            l.knowledge = (l.knowledge + gain).clamp(0.0, 1.0);
            l.frustration -= learn.success_relief;
        } else {
            l.frustration +=
                learn.failure_frustration * (1.0 + learn.anxiety_frustration_gain * normalized_anxiety(l.anxiety));
            l.help_seeking += learn.failure_help_seeking;
        }
        if action == PedagogicalAction::Encouragement {
            l.frustration -= learn.encouragement_relief;
        }
        l.frustration = l.frustration.clamp(0.0, 1.0);
        l.help_seeking = l.help_seeking.clamp(0.0, 1.0);
    }

    event.helpful_click = rng.random::<f64>() < (cfg.emission.helpful_scale * gain).min(1.0);

    if success {
        event.step_completed = true;
        next.advance_step();
    } else {
        next.failed_attempts += 1;
        if rng.random::<f64>() < quit_probability(cfg, &next.latent, next.failed_attempts) {
            event.quit = true;
            next.quit = true;
        } else if next.messages_in_step >= cfg.max_messages_per_step {
            next.advance_step();
        }
    }

    let observation = observe(cfg, &next, rng);
    Ok(Transition {
        state: next,
        observation,
        event,
        knowledge_gain: gain,
    })
}

/// Runs one student through the six tasks under `policy` and scores the
/// episode.
pub fn run_episode<R: rand::Rng>(
    policy: &PolicyCheckpoint,
    cfg: &SimulatorConfig,
    rewards: &RewardParams,
    student_id: u64,
    rng: &mut R,
) -> Result<Trajectory> {
    let (latent, pre_items) = spawn_student(cfg, rng);
    let pre_score = pre_items.iter().filter(|&&b| b).count() as u32;
    let mut state = StudentState::new(latent, pre_score);
    let mut steps = Vec::new();

    if cfg.max_messages_per_step > 0 {
        let mut observation = observe(cfg, &state, rng);
        while !state.terminated() {
            let normalized = normalize(&observation, &policy.normalization)?;
            let dist = policy.distribution_normalized(&normalized)?;
            let (action, _) = sample_action(&dist, rng)?;
            let t = step_interaction(cfg, &state, action, rng)?;
            steps.push(LoggedStep {
                observation,
                normalized,
                action,
                behavior_probs: floor_probs(&dist),
                events: t.event,
            });
            state = t.state;
            observation = t.observation;
        }
    }

    let post_items = (!state.quit).then(|| draw_items(state.latent.knowledge, rng));
    let mut traj = Trajectory {
        schema_version: SCHEMA_VERSION,
        student_id,
        steps,
        pre_items,
        post_items,
        quit: state.quit,
        terminal_reward: 0.0,
    };
    traj.terminal_reward = terminal_reward(
        &traj.pre_items,
        traj.post_items.as_deref(),
        traj.n_hints(),
        traj.n_helpful(),
        traj.quit,
        rewards,
    )?;
    Ok(traj)
}

/// Runs students `first_id .. first_id + count`, each on its own stream
/// `seed::rng(base_seed, [stream, id])`, concurrently. Output is in id order.
pub fn collect_episodes(
    policy: &PolicyCheckpoint,
    cfg: &SimulatorConfig,
    rewards: &RewardParams,
    base_seed: u64,
    stream: u64,
    first_id: u64,
    count: u64,
) -> Result<Vec<Trajectory>> {
    (first_id..first_id + count)
        .into_par_iter()
        .map(|id| {
            let mut rng = seed::rng(base_seed, &[stream, id]);
            run_episode(policy, cfg, rewards, id, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_trajectory;
    use rand::Rng as _;

    fn cfg() -> SimulatorConfig {
        SimulatorConfig::default()
    }

    fn latent() -> StudentLatent {
        StudentLatent {
            knowledge: 0.4,
            frustration: 0.0,
            help_seeking: 0.3,
            anxiety: 20,
            grade: 4,
            difficulty: [0.0; 6],
            quit_base: 0.0,
        }
    }

    #[test]
    fn default_config_parses() {
        let c = cfg();
        assert_eq!(c.max_messages_per_step, 6);
        assert!((c.mean_pre_score() - 8.0 * 2.0 / 4.5).abs() < 1e-12);
    }

    #[test]
    fn config_errors_name_the_field() {
        let text = DEFAULT_CONFIG.replace("knowledge_scale = 1.0", "knowledge_scale = 1.5");
        match SimulatorConfig::from_toml_str(&text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "simulator.population.knowledge_scale"),
            other => panic!("{other:?}"),
        }
        let text = DEFAULT_CONFIG.replace("nlp_noise = 0.5", "nlp_noise = \"x\"");
        match SimulatorConfig::from_toml_str(&text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "simulator.emission.nlp_noise"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn degenerate_knowledge_pretests() {
        let mut c = cfg();
        c.population.knowledge_fixed = Some(1.0);
        let mut rng = seed::rng(1, &[]);
        let (_, pre) = spawn_student(&c, &mut rng);
        assert!(pre.iter().all(|&b| b));
        c.population.knowledge_fixed = Some(0.0);
        let (_, pre) = spawn_student(&c, &mut rng);
        assert!(pre.iter().all(|&b| !b));
    }

    #[test]
    fn pretest_mean_matches_analytic() {
        let c = cfg();
        let mut rng = seed::rng(2, &[]);
        let n = 10_000;
        let (mut score, mut know) = (0.0, 0.0);
        for _ in 0..n {
            let (l, pre) = spawn_student(&c, &mut rng);
            score += pre.iter().filter(|&&b| b).count() as f64;
            know += l.knowledge;
        }
        let (score, know) = (score / n as f64, know / n as f64);
        assert!((score - 8.0 * know).abs() < 0.1, "{score} vs {}", 8.0 * know);
        assert!((score - c.mean_pre_score()).abs() < 0.1);
    }

    #[test]
    fn lowering_knowledge_prior_lowers_pretest() {
        let mean = |scale: f64| {
            let mut c = cfg();
            c.population.knowledge_scale = scale;
            let mut rng = seed::rng(3, &[]);
            (0..10_000)
                .map(|_| spawn_student(&c, &mut rng).1.iter().filter(|&&b| b).count() as f64)
                .sum::<f64>()
                / 10_000.0
        };
        assert!(mean(0.7) < mean(1.0));
    }

    #[test]
    fn quiet_student_rarely_quits() {
        let mut c = cfg();
        c.quit.intercept = -12.0;
        assert!(quit_probability(&c, &latent(), 0) < 1e-3);
    }

    #[test]
    fn encouragement_at_zero_frustration_stays_zero() {
        let c = cfg();
        let state = StudentState::new(latent(), 3);
        for s in 0..50 {
            let t = step_interaction(&c, &state, PedagogicalAction::Encouragement, &mut seed::rng(s, &[])).unwrap();
            if t.event.step_completed {
                assert_eq!(t.state.latent.frustration, 0.0);
            }
        }
    }

    #[test]
    fn stepping_terminated_episode_fails() {
        let mut state = StudentState::new(latent(), 3);
        state.quit = true;
        let r = step_interaction(&cfg(), &state, PedagogicalAction::DirectHint, &mut seed::rng(0, &[]));
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn same_seed_same_events() {
        let c = cfg();
        let actions = [0usize, 3, 3, 2, 1, 0, 3, 3, 3, 2, 0, 0];
        let run = || {
            let mut rng = seed::rng(8, &[]);
            let mut state = StudentState::new(latent(), 3);
            let mut events = Vec::new();
            for &a in &actions {
                if state.terminated() {
                    break;
                }
                let t = step_interaction(&c, &state, PedagogicalAction::from_index(a).unwrap(), &mut rng).unwrap();
                events.push((t.event, t.observation));
                state = t.state;
            }
            events
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn monotone_probabilities() {
        let c = cfg();
        let mut l = latent();
        let mut last = 0.0;
        for f in 0..=10 {
            l.frustration = f as f64 / 10.0;
            let q = quit_probability(&c, &l, 2);
            assert!(q >= last);
            last = q;
        }
        assert!(item_probability(0.3) <= item_probability(0.6));
    }

    #[test]
    fn zero_message_cap_skips_all_decisions() {
        let mut c = cfg();
        c.max_messages_per_step = 0;
        let t = run_episode(
            &PolicyCheckpoint::uniform(),
            &c,
            &RewardParams::default(),
            0,
            &mut seed::rng(4, &[]),
        )
        .unwrap();
        assert!(t.steps.is_empty());
        assert!(!t.quit && t.post_items.is_some());
        assert!(validate_trajectory(&t).is_empty());
    }

    #[test]
    fn uniform_episodes_are_valid_and_bounded() {
        let c = cfg();
        let r = RewardParams::default();
        let trajs = collect_episodes(&PolicyCheckpoint::uniform(), &c, &r, 5, seed::stream::SIMULATE, 0, 1000).unwrap();
        let cap = (c.max_messages_per_step * N_TASK_STEPS) as usize;
        let mut quits = 0;
        for t in &trajs {
            assert!(validate_trajectory(t).is_empty(), "{:?}", validate_trajectory(t));
            assert!(t.steps.len() <= cap);
            // knowledge never decreases, so a completed episode has a posttest
            if t.quit {
                quits += 1;
                assert!(t.post_items.is_none());
                assert!(t.terminal_reward <= -8.0 + 0.1 * t.n_helpful() as f64);
            }
        }
        assert!(quits > 0);
        let mean_len = trajs.iter().map(|t| t.steps.len()).sum::<usize>() as f64 / 1000.0;
        assert!(mean_len.is_finite() && mean_len <= cap as f64);
    }

    #[test]
    fn knowledge_never_decreases() {
        let c = cfg();
        let mut rng = seed::rng(6, &[]);
        for _ in 0..200 {
            let (l, pre) = spawn_student(&c, &mut rng);
            let mut state = StudentState::new(l, pre.iter().filter(|&&b| b).count() as u32);
            while !state.terminated() {
                let a = PedagogicalAction::from_index(rng.random_range(0..4)).unwrap();
                let t = step_interaction(&c, &state, a, &mut rng).unwrap();
                assert!(t.state.latent.knowledge >= state.latent.knowledge);
                assert!((0.0..=1.0).contains(&t.state.latent.frustration));
                assert!(t.observation.violations().is_empty());
                state = t.state;
            }
        }
    }
}
