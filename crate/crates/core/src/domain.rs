//! Observations, actions, logged steps and trajectories.
//!
//! Feature order everywhere is: grade, pre_score, step, failed_attempts,
//! nlp_pos, nlp_neg, nlp_help, anxiety.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_FEATURES: usize = 8;
pub const N_ACTIONS: usize = 4;
pub const N_ITEMS: usize = 8;
pub const N_TASK_STEPS: u32 = 6;

/// Version stamped on every serialized record.
pub const SCHEMA_VERSION: u32 = 1;

/// Smallest probability written to `behavior_probs`.
pub const PROB_FLOOR: f64 = 1e-8;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "grade",
    "pre_score",
    "step",
    "failed_attempts",
    "nlp_pos",
    "nlp_neg",
    "nlp_help",
    "anxiety",
];

pub const GRADE_RANGE: (u32, u32) = (3, 5);
pub const PRE_SCORE_RANGE: (u32, u32) = (0, 8);
pub const STEP_RANGE: (u32, u32) = (1, N_TASK_STEPS);
pub const ANXIETY_RANGE: (u32, u32) = (9, 45);

/// The eight features the policy sees at a decision point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationVector {
    pub grade: u32,
    pub pre_score: u32,
    pub step: u32,
    /// Failed attempts in the current step; resets when the step advances.
    pub failed_attempts: u32,
    pub nlp_pos: f64,
    pub nlp_neg: f64,
    pub nlp_help: f64,
    pub anxiety: u32,
}

impl ObservationVector {
    pub fn to_raw(&self) -> [f64; N_FEATURES] {
        [
            self.grade as f64,
            self.pre_score as f64,
            self.step as f64,
            self.failed_attempts as f64,
            self.nlp_pos,
            self.nlp_neg,
            self.nlp_help,
            self.anxiety as f64,
        ]
    }

    /// Lists every violated range invariant, by feature name.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let int_checks = [
            ("grade", self.grade, GRADE_RANGE),
            ("pre_score", self.pre_score, PRE_SCORE_RANGE),
            ("step", self.step, STEP_RANGE),
            ("anxiety", self.anxiety, ANXIETY_RANGE),
        ];
        for (name, v, (lo, hi)) in int_checks {
            if v < lo || v > hi {
                out.push(format!("{name}={v} outside [{lo},{hi}]"));
            }
        }
        for (name, v) in [
            ("nlp_pos", self.nlp_pos),
            ("nlp_neg", self.nlp_neg),
            ("nlp_help", self.nlp_help),
        ] {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("{name}={v} outside [0,1]"));
            }
        }
        out
    }
}

/// Support type chosen by the tutor. Indices are fixed and stored with every
/// checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PedagogicalAction {
    DirectHint,
    Acknowledgment,
    Encouragement,
    GuidedPrompt,
}

impl PedagogicalAction {
    pub const ALL: [PedagogicalAction; N_ACTIONS] = [
        PedagogicalAction::DirectHint,
        PedagogicalAction::Acknowledgment,
        PedagogicalAction::Encouragement,
        PedagogicalAction::GuidedPrompt,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PedagogicalAction::DirectHint => "DirectHint",
            PedagogicalAction::Acknowledgment => "Acknowledgment",
            PedagogicalAction::Encouragement => "Encouragement",
            PedagogicalAction::GuidedPrompt => "GuidedPrompt",
        }
    }
}

impl fmt::Display for PedagogicalAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PedagogicalAction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown action `{s}`")))
    }
}

/// Per-feature `[min, max]` used for affine scaling to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRanges {
    pub bounds: [[f64; 2]; N_FEATURES],
}

impl Default for NormalizationRanges {
    fn default() -> Self {
        Self {
            bounds: [
                [3.0, 5.0],
                [0.0, 8.0],
                [1.0, 6.0],
                // no natural upper bound; clamped
                [0.0, 10.0],
                [0.0, 1.0],
                [0.0, 1.0],
                [0.0, 1.0],
                [9.0, 45.0],
            ],
        }
    }
}

impl NormalizationRanges {
    pub fn identity() -> Self {
        Self {
            bounds: [[0.0, 1.0]; N_FEATURES],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, [lo, hi]) in self.bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::config(
                    format!("normalization.{}", FEATURE_NAMES[k]),
                    format!("max must exceed min, got [{lo}, {hi}]"),
                ));
            }
        }
        Ok(())
    }

    /// Element-wise `clamp((raw - min) / (max - min), 0, 1)`.
    pub fn normalize_raw(&self, raw: &[f64; N_FEATURES]) -> Result<[f64; N_FEATURES]> {
        self.validate()?;
        let mut out = [0.0; N_FEATURES];
        for k in 0..N_FEATURES {
            let [lo, hi] = self.bounds[k];
            out[k] = ((raw[k] - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        let mut out = [0.0; N_FEATURES];
        for k in 0..N_FEATURES {
            let [lo, hi] = self.bounds[k];
            out[k] = lo + x[k] * (hi - lo);
        }
        out
    }
}

pub fn normalize(obs: &ObservationVector, ranges: &NormalizationRanges) -> Result<[f64; N_FEATURES]> {
    ranges.normalize_raw(&obs.to_raw())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvent {
    pub hint_given: bool,
    pub helpful_click: bool,
    pub quit: bool,
    pub step_completed: bool,
}

/// One decision point as logged by the acting policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedStep {
    pub observation: ObservationVector,
    pub normalized: [f64; N_FEATURES],
    pub action: PedagogicalAction,
    pub behavior_probs: [f64; N_ACTIONS],
    pub events: StepEvent,
}

impl LoggedStep {
    pub fn behavior_prob(&self) -> f64 {
        self.behavior_probs[self.action.index()]
    }
}

/// One student's episode. Serialized one per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schema_version: u32,
    pub student_id: u64,
    pub steps: Vec<LoggedStep>,
    pub pre_items: Vec<bool>,
    /// Absent when the student quit before the posttest.
    pub post_items: Option<Vec<bool>>,
    pub quit: bool,
    pub terminal_reward: f64,
}

impl Trajectory {
    pub fn pre_score(&self) -> u32 {
        self.pre_items.iter().filter(|&&b| b).count() as u32
    }

    pub fn post_score(&self) -> Option<u32> {
        self.post_items
            .as_ref()
            .map(|p| p.iter().filter(|&&b| b).count() as u32)
    }

    pub fn n_hints(&self) -> u32 {
        self.steps.iter().filter(|s| s.events.hint_given).count() as u32
    }

    pub fn n_helpful(&self) -> u32 {
        self.steps.iter().filter(|s| s.events.helpful_click).count() as u32
    }
}

/// Mixes `p` with the uniform distribution so every entry is at least
/// [`PROB_FLOOR`] and the total stays 1.
pub fn floor_probs(p: &[f64; N_ACTIONS]) -> [f64; N_ACTIONS] {
    let keep = 1.0 - N_ACTIONS as f64 * PROB_FLOOR;
    let mut out = [0.0; N_ACTIONS];
    for (o, &v) in out.iter_mut().zip(p) {
        *o = PROB_FLOOR + keep * v;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Simplex { step: usize, detail: String },
    QuitPosttest(String),
    Range { step: usize, detail: String },
    Items(String),
    Events { step: usize, detail: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Simplex { step, detail } => write!(f, "step {step}: simplex violation: {detail}"),
            Violation::QuitPosttest(d) => write!(f, "quit/posttest inconsistency: {d}"),
            Violation::Range { step, detail } => write!(f, "step {step}: range violation: {detail}"),
            Violation::Items(d) => write!(f, "assessment items: {d}"),
            Violation::Events { step, detail } => write!(f, "step {step}: event inconsistency: {detail}"),
        }
    }
}

/// Checks every structural invariant of a trajectory. An empty list means
/// the trajectory is well formed.
pub fn validate_trajectory(t: &Trajectory) -> Vec<Violation> {
    let mut out = Vec::new();

    if t.pre_items.len() != N_ITEMS {
        out.push(Violation::Items(format!(
            "pre_items has {} entries, expected {N_ITEMS}",
            t.pre_items.len()
        )));
    }
    match (&t.post_items, t.quit) {
        (Some(_), true) => out.push(Violation::QuitPosttest("quit trajectory carries posttest items".into())),
        (None, false) => out.push(Violation::QuitPosttest(
            "completed trajectory is missing posttest items".into(),
        )),
        (Some(p), false) if p.len() != N_ITEMS => out.push(Violation::Items(format!(
            "post_items has {} entries, expected {N_ITEMS}",
            p.len()
        ))),
        _ => {}
    }

    let quit_steps: Vec<usize> = t
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.events.quit)
        .map(|(i, _)| i)
        .collect();
    if quit_steps.len() > 1 {
        out.push(Violation::QuitPosttest(format!(
            "quit flagged at {} steps",
            quit_steps.len()
        )));
    }
    if let Some(&i) = quit_steps.first() {
        if i + 1 != t.steps.len() {
            out.push(Violation::QuitPosttest(format!(
                "quit at step {i} does not end the trajectory"
            )));
        }
    }
    if t.quit != !quit_steps.is_empty() {
        out.push(Violation::QuitPosttest(
            "trajectory quit flag disagrees with step events".into(),
        ));
    }

    for (i, s) in t.steps.iter().enumerate() {
        let sum: f64 = s.behavior_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            out.push(Violation::Simplex {
                step: i,
                detail: format!("behavior_probs sum to {sum}"),
            });
        }
        if let Some(p) = s.behavior_probs.iter().find(|&&p| !(p >= PROB_FLOOR * (1.0 - 1e-9))) {
            out.push(Violation::Simplex {
                step: i,
                detail: format!("entry {p} below floor {PROB_FLOOR}"),
            });
        }
        for d in s.observation.violations() {
            out.push(Violation::Range { step: i, detail: d });
        }
        if s.observation.pre_score != t.pre_score() {
            out.push(Violation::Range {
                step: i,
                detail: "pre_score disagrees with pre_items".into(),
            });
        }
        if let Some(x) = s.normalized.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            out.push(Violation::Range {
                step: i,
                detail: format!("normalized entry {x} outside [0,1]"),
            });
        }
        if s.events.hint_given != (s.action == PedagogicalAction::DirectHint) {
            out.push(Violation::Events {
                step: i,
                detail: "hint_given must coincide with a DirectHint action".into(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn obs() -> ObservationVector {
        ObservationVector {
            grade: 4,
            pre_score: 2,
            step: 1,
            failed_attempts: 0,
            nlp_pos: 0.5,
            nlp_neg: 0.1,
            nlp_help: 0.2,
            anxiety: 9,
        }
    }

    fn well_formed() -> Trajectory {
        let steps = (1..=6)
            .map(|step| {
                let observation = ObservationVector { step, ..obs() };
                LoggedStep {
                    normalized: normalize(&observation, &NormalizationRanges::default()).unwrap(),
                    observation,
                    action: PedagogicalAction::Encouragement,
                    behavior_probs: [0.25; 4],
                    events: StepEvent {
                        step_completed: true,
                        ..Default::default()
                    },
                }
            })
            .collect();
        Trajectory {
            schema_version: SCHEMA_VERSION,
            student_id: 0,
            steps,
            pre_items: vec![true, true, false, false, false, false, false, false],
            post_items: Some(vec![true; 8]),
            quit: false,
            terminal_reward: 6.0,
        }
    }

    #[test]
    fn normalize_examples() {
        let r = NormalizationRanges::default();
        let x = normalize(&obs(), &r).unwrap();
        assert_eq!(x[0], 0.5);
        assert_eq!(x[7], 0.0);
        let o = ObservationVector {
            failed_attempts: 15,
            ..obs()
        };
        assert_eq!(normalize(&o, &r).unwrap()[3], 1.0);
    }

    #[test]
    fn normalize_rejects_degenerate_ranges() {
        let mut r = NormalizationRanges::default();
        r.bounds[2] = [6.0, 6.0];
        assert!(matches!(normalize(&obs(), &r), Err(Error::Config { .. })));
    }

    #[test]
    fn identity_ranges_are_idempotent() {
        let r = NormalizationRanges::identity();
        let x = [0.1, 0.2, 0.0, 1.0, 0.5, 0.3, 0.9, 0.7];
        let once = r.normalize_raw(&x).unwrap();
        assert_eq!(once, x);
        assert_eq!(r.normalize_raw(&once).unwrap(), once);
    }

    #[test]
    fn validation_examples() {
        assert!(validate_trajectory(&well_formed()).is_empty());

        let mut bad = well_formed();
        bad.steps[2].behavior_probs = [0.3, 0.3, 0.2, 0.1];
        let v = validate_trajectory(&bad);
        assert!(
            v.iter().any(|v| matches!(v, Violation::Simplex { step: 2, .. })),
            "{v:?}"
        );

        let mut bad = well_formed();
        bad.quit = true;
        bad.steps.last_mut().unwrap().events.quit = true;
        let v = validate_trajectory(&bad);
        assert!(v.iter().any(|v| matches!(v, Violation::QuitPosttest(_))), "{v:?}");
    }

    #[test]
    fn action_names_round_trip() {
        for a in PedagogicalAction::ALL {
            assert_eq!(a.name().parse::<PedagogicalAction>().unwrap(), a);
            assert_eq!(PedagogicalAction::from_index(a.index()), Some(a));
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(serde_json::from_str::<PedagogicalAction>(&json).unwrap(), a);
        }
        assert_eq!(PedagogicalAction::from_index(4), None);
    }

    #[test]
    fn floored_probs_stay_on_simplex() {
        let p = floor_probs(&[1.0, 0.0, 0.0, 0.0]);
        assert!(p.iter().all(|&v| v >= PROB_FLOOR));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_is_monotone(a in 0.0f64..60.0, b in 0.0f64..60.0, k in 0usize..8) {
                let r = NormalizationRanges::default();
                let mut xa = [0.0; 8];
                let mut xb = [0.0; 8];
                xa[k] = a.min(b);
                xb[k] = a.max(b);
                prop_assert!(r.normalize_raw(&xa).unwrap()[k] <= r.normalize_raw(&xb).unwrap()[k]);
            }

            #[test]
            fn denormalize_inverts_in_range(u in proptest::array::uniform8(0.0f64..=1.0)) {
                let r = NormalizationRanges::default();
                let raw = r.denormalize(&u);
                let back = r.normalize_raw(&raw).unwrap();
                let again = r.denormalize(&back);
                for k in 0..8 {
                    prop_assert!((again[k] - raw[k]).abs() <= 1e-12 * raw[k].abs().max(1.0));
                }
            }
        }
    }
}
