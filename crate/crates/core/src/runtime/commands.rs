//! The pipeline commands behind the command line front end. Each command
//! writes its artifacts and returns a serializable summary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{PedagogicalAction, Trajectory, N_ACTIONS};
use crate::error::{Error, Result};
use crate::explain::{aggregate_attributions, group_action_probs, AttributionReport, Bands, GroupProbabilityReport};
use crate::offline_rl::{grid_search, mean_std, wis_evaluate, SelectionReport};
use crate::online_ppo::{train_online, OnlineRun};
use crate::policy::PolicyCheckpoint;
use crate::reward::nlg;
use crate::seed::stream;
use crate::simulator::collect_episodes;
use crate::svg::{bar_chart, BarSeries};

use super::experiment::Experiment;
use super::io::{read_trajectories, write_trajectories};

/// Where a policy comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySource {
    Uniform,
    Checkpoint(PathBuf),
}

impl PolicySource {
    /// `"uniform"` or a checkpoint path.
    pub fn parse(s: &str) -> Self {
        if s == "uniform" {
            PolicySource::Uniform
        } else {
            PolicySource::Checkpoint(PathBuf::from(s))
        }
    }

    pub fn load(&self) -> Result<PolicyCheckpoint> {
        match self {
            PolicySource::Uniform => Ok(PolicyCheckpoint::uniform()),
            PolicySource::Checkpoint(p) => PolicyCheckpoint::load(p),
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_data(data: &[Trajectory]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("trajectory file holds no students".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub n_students: usize,
    pub mean_pre_score: Option<f64>,
    pub mean_reward: Option<f64>,
    pub quit_rate: Option<f64>,
    pub output: PathBuf,
}

/// Simulates `n_students` under `policy` and writes them to `out`.
pub fn simulate(exp: &Experiment, policy: &PolicySource, n_students: u64, out: &Path) -> Result<SimulateSummary> {
    let ckpt = policy.load()?;
    let data = collect_episodes(
        &ckpt,
        &exp.simulator,
        &exp.config.reward,
        exp.config.seed,
        stream::SIMULATE,
        0,
        n_students,
    )?;
    write_trajectories(out, &data)?;
    let n = data.len() as f64;
    let mean = |f: &dyn Fn(&Trajectory) -> f64| (!data.is_empty()).then(|| data.iter().map(f).sum::<f64>() / n);
    Ok(SimulateSummary {
        n_students: data.len(),
        mean_pre_score: mean(&|t| t.pre_score() as f64),
        mean_reward: mean(&|t| t.terminal_reward),
        quit_rate: mean(&|t| if t.quit { 1.0 } else { 0.0 }),
        output: out.to_path_buf(),
    })
}

/// Online PPO into `out_dir`; see [`train_online`].
pub fn train_online_cmd(exp: &Experiment, out_dir: &Path, resume: bool) -> Result<OnlineRun> {
    train_online(&exp.config.ppo, &exp.simulator, &exp.config.reward, out_dir, resume)
}

pub const SELECTION_JSON: &str = "selection_report.json";
pub const SELECTION_CSV: &str = "selection_report.csv";
pub const OFFLINE_CHECKPOINT: &str = "offline_policy.txt";

/// Grid selection on a trajectory file; writes the report (JSON and CSV)
/// and the retrained checkpoint into `out_dir`.
pub fn train_offline(
    exp: &Experiment,
    data_path: &Path,
    n_splits: usize,
    out_dir: &Path,
    parallel: bool,
) -> Result<SelectionReport> {
    let data = read_trajectories(data_path)?;
    require_data(&data)?;
    if data.len() < 2 {
        return Err(Error::Data("offline selection needs at least 2 students".into()));
    }
    let (mut report, ckpt) = grid_search(&data, &exp.config.offline.grid, n_splits, exp.config.seed, parallel)?;
    report.final_checkpoint = Some(OFFLINE_CHECKPOINT.into());
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    ckpt.save(&out_dir.join(OFFLINE_CHECKPOINT))?;
    write_file(&out_dir.join(SELECTION_JSON), &(report.to_json() + "\n"))?;
    write_file(&out_dir.join(SELECTION_CSV), &report.to_csv())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalMode {
    /// Off-policy estimate from a logged trajectory file.
    Wis(PathBuf),
    /// Fresh simulated students.
    Rollout(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub mode: String,
    pub n: usize,
    pub estimate: f64,
    /// WIS mode only.
    pub ess: Option<f64>,
    /// Rollout mode only: sample standard deviation and standard error.
    pub std: Option<f64>,
    pub stderr: Option<f64>,
}

/// Mean, sample std and standard error of rollout rewards.
pub fn rollout_stats(rewards: &[f64]) -> (f64, f64, f64) {
    let (m, s) = mean_std(rewards);
    (m, s, s / (rewards.len() as f64).sqrt())
}

pub fn evaluate(exp: &Experiment, policy: &PolicySource, mode: &EvalMode) -> Result<EvaluationRecord> {
    let ckpt = policy.load()?;
    match mode {
        EvalMode::Wis(path) => {
            let data = read_trajectories(path)?;
            require_data(&data)?;
            let est = wis_evaluate(&ckpt, &data)?;
            Ok(EvaluationRecord {
                mode: "wis".into(),
                n: data.len(),
                estimate: est.estimate,
                ess: Some(est.ess),
                std: None,
                stderr: None,
            })
        }
        EvalMode::Rollout(n) => {
            if *n == 0 {
                return Err(Error::Usage("rollout evaluation needs at least one student".into()));
            }
            let data = collect_episodes(
                &ckpt,
                &exp.simulator,
                &exp.config.reward,
                exp.config.seed,
                stream::EVAL,
                0,
                *n,
            )?;
            let rewards: Vec<f64> = data.iter().map(|t| t.terminal_reward).collect();
            let (m, s, se) = rollout_stats(&rewards);
            Ok(EvaluationRecord {
                mode: "rollout".into(),
                n: data.len(),
                estimate: m,
                ess: None,
                std: Some(s),
                stderr: Some(se),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainSummary {
    pub attributions: AttributionReport,
    pub groups: GroupProbabilityReport,
    pub files: Vec<PathBuf>,
}

/// Attribution tables and grouped action probabilities with charts.
pub fn explain(exp: &Experiment, policy: &PolicySource, data_path: &Path, out_dir: &Path) -> Result<ExplainSummary> {
    let ckpt = policy.load()?;
    let data = read_trajectories(data_path)?;
    require_data(&data)?;
    let cfg = &exp.config.explain;
    let attributions = aggregate_attributions(&ckpt, &data, cfg)?;
    let groups = group_action_probs(&ckpt, &data, &Bands::default())?;

    let focus = cfg.focus_action.index();
    let categories: Vec<String> = groups
        .cells
        .iter()
        .map(|c| format!("{} pretest / {} anxiety (n={})", c.pretest_band, c.anxiety_band, c.n))
        .collect();
    let group_svg = bar_chart(
        &format!("Probability of {} by student group", cfg.focus_action),
        "probability",
        &categories,
        &[BarSeries {
            name: cfg.focus_action.to_string(),
            values: groups.cells.iter().map(|c| c.mean.map(|m| m[focus])).collect(),
            errors: Some(
                groups
                    .cells
                    .iter()
                    .map(|c| c.half_width.map_or(0.0, |h| h[focus]))
                    .collect(),
            ),
        }],
    );
    let attr_svg = bar_chart(
        "Mean integrated-gradient attribution",
        "percentage points",
        &PedagogicalAction::ALL.iter().map(|a| a.to_string()).collect::<Vec<_>>(),
        &["pretest", "anxiety", "other"]
            .iter()
            .enumerate()
            .map(|(g, name)| BarSeries {
                name: name.to_string(),
                values: (0..N_ACTIONS)
                    .map(|a| Some(100.0 * attributions.grouped[a][g]))
                    .collect(),
                errors: None,
            })
            .collect::<Vec<_>>(),
    );

    let files = [
        ("attributions.csv", attributions.features_csv()),
        ("attribution_groups.csv", attributions.grouped_csv()),
        ("group_probs.csv", groups.to_csv()),
        ("group_probs.svg", group_svg),
        ("attribution_groups.svg", attr_svg),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let p = out_dir.join(name);
        write_file(&p, &text)?;
        written.push(p);
    }
    Ok(ExplainSummary {
        attributions,
        groups,
        files: written,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandOutcome {
    pub band: String,
    pub n: usize,
    pub n_completed: usize,
    /// Mean normalized learning gain over completers with a defined gain.
    pub mean_nlg: Option<f64>,
    pub mean_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub n_students: usize,
    pub quit_rate: f64,
    pub mean_pre_score: f64,
    pub mean_post_score: Option<f64>,
    pub mean_reward: f64,
    pub action_frequencies: [f64; N_ACTIONS],
    pub bands: Vec<BandOutcome>,
}

impl DatasetReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["band", "n", "n_completed", "mean_nlg", "mean_reward"])
            .expect("in-memory write");
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        for b in &self.bands {
            w.write_record([
                b.band.clone(),
                b.n.to_string(),
                b.n_completed.to_string(),
                f(b.mean_nlg),
                f(b.mean_reward),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Outcome summary of a trajectory file: overall rates, action mix, and
/// learning gain by pretest band.
pub fn report(exp: &Experiment, data_path: &Path, out_dir: &Path) -> Result<DatasetReport> {
    let data = read_trajectories(data_path)?;
    require_data(&data)?;
    let n_items = exp.config.reward.n_items as u32;
    let n = data.len() as f64;
    let completed: Vec<&Trajectory> = data.iter().filter(|t| !t.quit).collect();
    let mut counts = [0usize; N_ACTIONS];
    for s in data.iter().flat_map(|t| &t.steps) {
        counts[s.action.index()] += 1;
    }
    let total_steps = counts.iter().sum::<usize>().max(1) as f64;
    let bands = [("Bottom (0-2)", 0, 2), ("Middle (3-5)", 3, 5), ("Top (6-8)", 6, 8)];
    let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let band_rows = bands
        .iter()
        .map(|&(label, lo, hi)| {
            let members: Vec<&Trajectory> = data.iter().filter(|t| (lo..=hi).contains(&t.pre_score())).collect();
            let gains: Vec<f64> = members
                .iter()
                .filter_map(|t| t.post_score().and_then(|post| nlg(t.pre_score(), post, n_items)))
                .collect();
            let rewards: Vec<f64> = members.iter().map(|t| t.terminal_reward).collect();
            BandOutcome {
                band: label.to_string(),
                n: members.len(),
                n_completed: members.iter().filter(|t| !t.quit).count(),
                mean_nlg: avg(&gains),
                mean_reward: avg(&rewards),
            }
        })
        .collect();
    let posts: Vec<f64> = completed.iter().filter_map(|t| t.post_score()).map(f64::from).collect();
    let rep = DatasetReport {
        n_students: data.len(),
        quit_rate: (data.len() - completed.len()) as f64 / n,
        mean_pre_score: data.iter().map(|t| t.pre_score() as f64).sum::<f64>() / n,
        mean_post_score: avg(&posts),
        mean_reward: data.iter().map(|t| t.terminal_reward).sum::<f64>() / n,
        action_frequencies: counts.map(|c| c as f64 / total_steps),
        bands: band_rows,
    };
    write_file(&out_dir.join("report.csv"), &rep.to_csv())?;
    write_file(
        &out_dir.join("report.json"),
        &(serde_json::to_string_pretty(&rep).expect("report serializes") + "\n"),
    )?;
    Ok(rep)
}
