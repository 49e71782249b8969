//! Split-based selection over the offline hyperparameter grid.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Trajectory;
use crate::error::{Error, Result};
use crate::nnet::Activation;
use crate::policy::PolicyCheckpoint;
use crate::runtime::config::parse_toml;
use crate::seed::{self, stream};

use super::train::{train, Algorithm, OfflineConfig};
use super::wis::wis_evaluate;

const DEFAULT_GRID: &str = include_str!("../../../../configs/offline_grid.toml");

/// Axes of the offline grid. Enumeration order is algorithm, then hidden
/// shape, then epochs, then ESS penalty (last axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub algorithms: Vec<Algorithm>,
    pub hidden_dims: Vec<Vec<usize>>,
    pub epochs: Vec<u32>,
    pub ess_penalty: Vec<f64>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub bc_batch_steps: usize,
    pub pois_batch_trajectories: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_GRID).expect("shipped grid is valid")
    }
}

impl GridSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let g: Self = parse_toml(text, "grid")?;
        g.validate()?;
        Ok(g)
    }

    /// A grid containing exactly one configuration.
    pub fn single(cfg: &OfflineConfig) -> Self {
        Self {
            algorithms: vec![cfg.algorithm],
            hidden_dims: vec![cfg.hidden_dims.clone()],
            epochs: vec![cfg.epochs],
            ess_penalty: vec![cfg.ess_penalty],
            activation: cfg.activation,
            learning_rate: cfg.learning_rate,
            bc_batch_steps: cfg.bc_batch_steps,
            pois_batch_trajectories: cfg.pois_batch_trajectories,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let empty = |name: &str| Error::config(format!("grid.{name}"), "must list at least one value");
        if self.algorithms.is_empty() {
            return Err(empty("algorithms"));
        }
        if self.hidden_dims.is_empty() {
            return Err(empty("hidden_dims"));
        }
        if self.epochs.is_empty() {
            return Err(empty("epochs"));
        }
        if self.ess_penalty.is_empty() {
            return Err(empty("ess_penalty"));
        }
        for (i, h) in self.hidden_dims.iter().enumerate() {
            crate::policy::policy_spec(h, self.activation)
                .validate()
                .map_err(|e| Error::config(format!("grid.hidden_dims[{i}]"), e.to_string()))?;
        }
        if self.epochs.contains(&0) {
            return Err(Error::config("grid.epochs", "epochs must be positive"));
        }
        if self.ess_penalty.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
            return Err(Error::config(
                "grid.ess_penalty",
                "penalties must be finite and non-negative",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("grid.learning_rate", "must be positive"));
        }
        if self.bc_batch_steps == 0 {
            return Err(Error::config("grid.bc_batch_steps", "must be positive"));
        }
        if self.pois_batch_trajectories == 0 {
            return Err(Error::config("grid.pois_batch_trajectories", "must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.algorithms.len() * self.hidden_dims.len() * self.epochs.len() * self.ess_penalty.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All configurations with seed 0; the harness assigns task seeds.
    pub fn enumerate(&self) -> Vec<OfflineConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &algorithm in &self.algorithms {
            for hidden in &self.hidden_dims {
                for &epochs in &self.epochs {
                    for &eta in &self.ess_penalty {
                        let mut c = OfflineConfig::new(algorithm, hidden, epochs, eta);
                        c.activation = self.activation;
                        c.learning_rate = self.learning_rate;
                        c.bc_batch_steps = self.bc_batch_steps;
                        c.pois_batch_trajectories = self.pois_batch_trajectories;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

/// Partitions trajectory indices `0..n` into (train, validation), with the
/// larger half going to training when `n` is odd. Both halves are sorted.
pub fn split_indices(n: usize, split_seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Usage(format!("splitting needs at least 2 students, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(split_seed, &[]));
    let n_train = n.div_ceil(2);
    let mut train = idx[..n_train].to_vec();
    let mut valid = idx[n_train..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    Ok((train, valid))
}

/// Partitions a dataset by student into (train, validation).
pub fn split_dataset(dataset: &[Trajectory], split_seed: u64) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    let (tr, va) = split_indices(dataset.len(), split_seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| dataset[i].clone()).collect();
    Ok((pick(&tr), pick(&va)))
}

/// Outcome of one (configuration, split) task. `wis`/`ess` are `None` when
/// training or evaluation failed; such tasks score negative infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: usize,
    pub task_seed: u64,
    pub wis: Option<f64>,
    pub ess: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigScore {
    pub index: usize,
    pub config: OfflineConfig,
    pub n_params: usize,
    pub splits: Vec<SplitResult>,
    /// `None` encodes negative infinity (some split failed).
    pub mean_wis: Option<f64>,
    pub std_wis: Option<f64>,
    pub mean_ess: Option<f64>,
}

impl ConfigScore {
    pub fn from_splits(index: usize, config: OfflineConfig, splits: Vec<SplitResult>) -> Self {
        let wis: Option<Vec<f64>> = splits.iter().map(|s| s.wis).collect();
        let ess: Option<Vec<f64>> = splits.iter().map(|s| s.ess).collect();
        let (mean_wis, std_wis) = match wis {
            Some(v) if !v.is_empty() => {
                let (m, s) = mean_std(&v);
                (Some(m), Some(s))
            }
            _ => (None, None),
        };
        let mean_ess = ess.filter(|v| !v.is_empty()).map(|v| mean_std(&v).0);
        Self {
            index,
            n_params: config.n_params(),
            config,
            splits,
            mean_wis,
            std_wis,
            mean_ess,
        }
    }

    pub fn score(&self) -> f64 {
        self.mean_wis.unwrap_or(f64::NEG_INFINITY)
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Highest mean validation WIS; ties go to higher mean ESS, then fewer
/// parameters, then the earlier configuration.
pub fn select_best(scores: &[ConfigScore]) -> Result<usize> {
    let mut best: Option<&ConfigScore> = None;
    for c in scores {
        if c.mean_wis.is_none() {
            continue;
        }
        best = match best {
            None => Some(c),
            Some(b) => {
                let ess = |x: &ConfigScore| x.mean_ess.unwrap_or(f64::NEG_INFINITY);
                let better = c.score() > b.score()
                    || (c.score() == b.score() && (ess(c) > ess(b) || (ess(c) == ess(b) && c.n_params < b.n_params)));
                Some(if better { c } else { b })
            }
        };
    }
    best.map(|c| c.index)
        .ok_or_else(|| Error::Numeric("every grid configuration failed on some split".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub master_seed: u64,
    pub n_trajectories: usize,
    pub n_splits: usize,
    pub split_seeds: Vec<u64>,
    pub configs: Vec<ConfigScore>,
    pub chosen: usize,
    pub final_seed: u64,
    /// File name of the retrained checkpoint, filled in by the caller that
    /// writes it.
    pub final_checkpoint: Option<String>,
}

impl SelectionReport {
    pub fn chosen_config(&self) -> &OfflineConfig {
        &self.configs[self.chosen].config
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable table: one row per configuration.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "config",
            "algorithm",
            "hidden_dims",
            "epochs",
            "ess_penalty",
            "n_params",
            "mean_wis",
            "std_wis",
            "mean_ess",
            "failed_splits",
            "chosen",
        ])
        .expect("in-memory write");
        let fmt = |v: Option<f64>| v.map_or_else(|| "-inf".to_string(), |x| format!("{x:.6}"));
        for c in &self.configs {
            let hidden = c
                .config
                .hidden_dims
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join("x");
            let failed = c.splits.iter().filter(|s| s.wis.is_none()).count();
            w.write_record([
                c.index.to_string(),
                c.config.algorithm.name().to_string(),
                hidden,
                c.config.epochs.to_string(),
                c.config.ess_penalty.to_string(),
                c.n_params.to_string(),
                fmt(c.mean_wis),
                c.std_wis.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}")),
                c.mean_ess.map_or_else(|| "nan".to_string(), |x| format!("{x:.3}")),
                failed.to_string(),
                (c.index == self.chosen).to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

fn run_task(dataset: &[Trajectory], cfg: &OfflineConfig, split: usize, split_seed: u64, task_seed: u64) -> SplitResult {
    let attempt = || -> Result<(f64, f64)> {
        let (train_set, valid_set) = split_dataset(dataset, split_seed)?;
        let mut c = cfg.clone();
        c.seed = task_seed;
        let (ckpt, _) = train(&train_set, &c)?;
        let est = wis_evaluate(&ckpt, &valid_set)?;
        if !est.estimate.is_finite() {
            return Err(Error::Numeric("non-finite validation estimate".into()));
        }
        Ok((est.estimate, est.ess))
    };
    match attempt() {
        Ok((wis, ess)) => SplitResult {
            split,
            task_seed,
            wis: Some(wis),
            ess: Some(ess),
            error: None,
        },
        Err(e) => SplitResult {
            split,
            task_seed,
            wis: None,
            ess: None,
            error: Some(e.to_string()),
        },
    }
}

/// Trains every configuration on every split's training half, scores it by
/// WIS on the validation half, selects the best mean, and retrains that
/// configuration on the full dataset. Results do not depend on `parallel`.
pub fn grid_search(
    dataset: &[Trajectory],
    grid: &GridSpec,
    n_splits: usize,
    master_seed: u64,
    parallel: bool,
) -> Result<(SelectionReport, PolicyCheckpoint)> {
    grid.validate()?;
    if dataset.is_empty() {
        return Err(Error::Usage("grid search needs a non-empty dataset".into()));
    }
    if n_splits == 0 {
        return Err(Error::Usage("grid search needs at least one split".into()));
    }
    if dataset.len() < 2 {
        return Err(Error::Usage("grid search needs at least 2 students to split".into()));
    }
    let configs = grid.enumerate();
    let split_seeds: Vec<u64> = (0..n_splits)
        .map(|s| seed::derive(master_seed, &[stream::SPLIT, s as u64]))
        .collect();
    let tasks: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..n_splits).map(move |s| (c, s)))
        .collect();
    let exec = |&(c, s): &(usize, usize)| {
        let task_seed = seed::derive(master_seed, &[stream::GRID_TASK, c as u64, s as u64]);
        run_task(dataset, &configs[c], s, split_seeds[s], task_seed)
    };
    let results: Vec<SplitResult> = if parallel {
        tasks.par_iter().map(exec).collect()
    } else {
        tasks.iter().map(exec).collect()
    };
    let mut results = results.into_iter();
    let scores: Vec<ConfigScore> = configs
        .iter()
        .enumerate()
        .map(|(i, c)| ConfigScore::from_splits(i, c.clone(), results.by_ref().take(n_splits).collect()))
        .collect();
    let chosen = select_best(&scores)?;
    let final_seed = seed::derive(master_seed, &[stream::GRID_FINAL]);
    let mut final_cfg = configs[chosen].clone();
    final_cfg.seed = final_seed;
    let (mut ckpt, _) = train(dataset, &final_cfg)?;
    ckpt.seed_lineage = vec![master_seed, final_seed];
    let report = SelectionReport {
        master_seed,
        n_trajectories: dataset.len(),
        n_splits,
        split_seeds,
        configs: scores,
        chosen,
        final_seed,
        final_checkpoint: None,
    };
    Ok((report, ckpt))
}
