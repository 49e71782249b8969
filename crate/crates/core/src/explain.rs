//! Integrated-gradients attribution of action probabilities, and action
//! probabilities grouped by pretest and anxiety bands.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{PedagogicalAction, Trajectory, FEATURE_NAMES, N_ACTIONS, N_FEATURES};
use crate::error::{Error, Result};
use crate::nnet::Mlp;
use crate::policy::PolicyCheckpoint;

const PRE_SCORE: usize = 1;
const ANXIETY: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// The origin of normalized feature space.
    Zeros,
    /// Mean normalized observation over the dataset being explained.
    DatasetMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub baseline: Baseline,
    pub ig_steps: usize,
    /// Action whose probability the grouped chart shows.
    pub focus_action: PedagogicalAction,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            baseline: Baseline::Zeros,
            ig_steps: 64,
            focus_action: PedagogicalAction::DirectHint,
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ig_steps == 0 {
            return Err(Error::config("explain.ig_steps", "must be at least 1"));
        }
        Ok(())
    }
}

/// `attr[k][a]`: contribution of feature `k` to output `a`.
pub type AttributionMatrix = [[f64; N_ACTIONS]; N_FEATURES];

fn check_net(net: &Mlp) -> Result<()> {
    if net.spec.input_dim != N_FEATURES || net.spec.output_dim != N_ACTIONS {
        return Err(Error::Usage("attribution needs an 8-input, 4-output network".into()));
    }
    Ok(())
}

/// Integrated gradients along the straight path from `baseline` to `x`,
/// using the midpoint rule with `m` points. Targets are the network
/// outputs (probabilities for a softmax head).
pub fn integrated_gradients(
    net: &Mlp,
    x: &[f64; N_FEATURES],
    baseline: &[f64; N_FEATURES],
    m: usize,
) -> Result<AttributionMatrix> {
    check_net(net)?;
    if m == 0 {
        return Err(Error::Usage("integrated gradients needs at least one step".into()));
    }
    let mut sum = [[0.0; N_ACTIONS]; N_FEATURES];
    let mut point = [0.0; N_FEATURES];
    for j in 0..m {
        let alpha = (j as f64 + 0.5) / m as f64;
        for k in 0..N_FEATURES {
            point[k] = baseline[k] + alpha * (x[k] - baseline[k]);
        }
        let (_, cache) = net.forward(&point)?;
        for a in 0..N_ACTIONS {
            let mut e = [0.0; N_ACTIONS];
            e[a] = 1.0;
            let (_, dx) = net.backward(&cache, &e)?;
            for k in 0..N_FEATURES {
                sum[k][a] += dx[k];
            }
        }
    }
    let mut attr = [[0.0; N_ACTIONS]; N_FEATURES];
    for k in 0..N_FEATURES {
        for a in 0..N_ACTIONS {
            attr[k][a] = (x[k] - baseline[k]) * sum[k][a] / m as f64;
        }
    }
    Ok(attr)
}

/// Largest `|sum_k IG_k - (F_a(x) - F_a(x'))|` over actions.
pub fn completeness_residual(
    net: &Mlp,
    x: &[f64; N_FEATURES],
    baseline: &[f64; N_FEATURES],
    attr: &AttributionMatrix,
) -> Result<f64> {
    let fx = net.output(x)?;
    let fb = net.output(baseline)?;
    Ok((0..N_ACTIONS)
        .map(|a| {
            let total: f64 = (0..N_FEATURES).map(|k| attr[k][a]).sum();
            (total - (fx[a] - fb[a])).abs()
        })
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub n_inputs: usize,
    pub baseline: [f64; N_FEATURES],
    pub ig_steps: usize,
    /// Mean attribution per (feature, action), in probability units.
    pub mean: AttributionMatrix,
    /// Per action: pretest, anxiety, and the sum over all other features.
    pub grouped: [[f64; 3]; N_ACTIONS],
    pub max_completeness_residual: f64,
}

impl AttributionReport {
    /// Per-feature table; values in percentage points of probability.
    pub fn features_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["feature".to_string()];
        header.extend(PedagogicalAction::ALL.iter().map(|a| format!("{a}_pct")));
        w.write_record(&header).expect("in-memory write");
        for (k, name) in FEATURE_NAMES.iter().enumerate() {
            let mut row = vec![name.to_string()];
            row.extend(self.mean[k].iter().map(|v| format!("{:.4}", 100.0 * v)));
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    /// Grouped table: one row per action with pretest, anxiety and other
    /// feature columns in percentage points.
    pub fn grouped_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["action", "pretest_pct", "anxiety_pct", "other_pct"])
            .expect("in-memory write");
        for (a, g) in PedagogicalAction::ALL.iter().zip(&self.grouped) {
            let mut row = vec![a.to_string()];
            row.extend(g.iter().map(|v| format!("{:.4}", 100.0 * v)));
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

fn dataset_inputs(dataset: &[Trajectory]) -> Vec<[f64; N_FEATURES]> {
    dataset
        .iter()
        .flat_map(|t| t.steps.iter().map(|s| s.normalized))
        .collect()
}

/// Mean normalized observation over all logged steps.
pub fn mean_input(dataset: &[Trajectory]) -> Result<[f64; N_FEATURES]> {
    let xs = dataset_inputs(dataset);
    if xs.is_empty() {
        return Err(Error::Data("dataset has no logged observations".into()));
    }
    let mut m = [0.0; N_FEATURES];
    for x in &xs {
        for k in 0..N_FEATURES {
            m[k] += x[k];
        }
    }
    Ok(m.map(|v| v / xs.len() as f64))
}

/// Mean integrated-gradients attribution over every logged observation.
pub fn aggregate_attributions(
    ckpt: &PolicyCheckpoint,
    dataset: &[Trajectory],
    cfg: &ExplainConfig,
) -> Result<AttributionReport> {
    cfg.validate()?;
    let xs = dataset_inputs(dataset);
    if xs.is_empty() {
        return Err(Error::Data("dataset has no logged observations".into()));
    }
    let baseline = match cfg.baseline {
        Baseline::Zeros => [0.0; N_FEATURES],
        Baseline::DatasetMean => mean_input(dataset)?,
    };
    let per_input: Vec<(AttributionMatrix, f64)> = xs
        .par_iter()
        .map(|x| {
            let attr = integrated_gradients(&ckpt.policy, x, &baseline, cfg.ig_steps)?;
            let r = completeness_residual(&ckpt.policy, x, &baseline, &attr)?;
            Ok((attr, r))
        })
        .collect::<Result<_>>()?;
    let mut mean = [[0.0; N_ACTIONS]; N_FEATURES];
    let mut max_res: f64 = 0.0;
    for (attr, r) in &per_input {
        for k in 0..N_FEATURES {
            for a in 0..N_ACTIONS {
                mean[k][a] += attr[k][a];
            }
        }
        max_res = max_res.max(*r);
    }
    let n = per_input.len() as f64;
    for row in &mut mean {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    let mut grouped = [[0.0; 3]; N_ACTIONS];
    for a in 0..N_ACTIONS {
        grouped[a][0] = mean[PRE_SCORE][a];
        grouped[a][1] = mean[ANXIETY][a];
        grouped[a][2] = (0..N_FEATURES)
            .filter(|&k| k != PRE_SCORE && k != ANXIETY)
            .map(|k| mean[k][a])
            .sum();
    }
    Ok(AttributionReport {
        n_inputs: per_input.len(),
        baseline,
        ig_steps: cfg.ig_steps,
        mean,
        grouped,
        max_completeness_residual: max_res,
    })
}

/// Inclusive integer band with a display label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub label: String,
    pub lo: u32,
    pub hi: u32,
}

impl Band {
    pub fn new(label: &str, lo: u32, hi: u32) -> Self {
        Self {
            label: label.to_string(),
            lo,
            hi,
        }
    }

    pub fn contains(&self, v: u32) -> bool {
        (self.lo..=self.hi).contains(&v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    pub pretest: Vec<Band>,
    pub anxiety: Vec<Band>,
}

impl Default for Bands {
    fn default() -> Self {
        Self {
            pretest: vec![Band::new("Bottom", 0, 2), Band::new("Top", 6, 8)],
            anxiety: vec![Band::new("Low", 9, 13), Band::new("High", 22, 45)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCell {
    pub pretest_band: String,
    pub anxiety_band: String,
    pub n: usize,
    /// Mean probability of each action; `None` when the cell is empty.
    pub mean: Option<[f64; N_ACTIONS]>,
    /// 95% normal-approximation half-widths (0 when `n == 1`).
    pub half_width: Option<[f64; N_ACTIONS]>,
    /// Set when the cell holds a single student and its interval is degenerate.
    pub single_student: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupProbabilityReport {
    pub cells: Vec<GroupCell>,
    /// Students outside every band combination.
    pub excluded: usize,
}

impl GroupProbabilityReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "pretest_band",
            "anxiety_band",
            "n",
            "action",
            "mean",
            "ci_low",
            "ci_high",
            "flag",
        ])
        .expect("in-memory write");
        for c in &self.cells {
            for a in PedagogicalAction::ALL {
                let (mean, lo, hi) = match (c.mean, c.half_width) {
                    (Some(m), Some(h)) => {
                        let i = a.index();
                        (
                            format!("{:.6}", m[i]),
                            format!("{:.6}", m[i] - h[i]),
                            format!("{:.6}", m[i] + h[i]),
                        )
                    }
                    _ => (String::new(), String::new(), String::new()),
                };
                let flag = if c.n == 0 {
                    "absent"
                } else if c.single_student {
                    "single"
                } else {
                    ""
                };
                w.write_record([
                    c.pretest_band.as_str(),
                    &c.anxiety_band,
                    &c.n.to_string(),
                    a.name(),
                    &mean,
                    &lo,
                    &hi,
                    flag,
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Mean action distribution per (pretest band, anxiety band) cell, taken at
/// each student's first logged decision.
pub fn group_action_probs(
    ckpt: &PolicyCheckpoint,
    dataset: &[Trajectory],
    bands: &Bands,
) -> Result<GroupProbabilityReport> {
    let mut members: Vec<Vec<[f64; N_ACTIONS]>> = vec![Vec::new(); bands.pretest.len() * bands.anxiety.len()];
    let mut excluded = 0;
    for t in dataset {
        let Some(first) = t.steps.first() else {
            excluded += 1;
            continue;
        };
        let pre = t.pre_score();
        let anx = first.observation.anxiety;
        let cell = bands.pretest.iter().position(|b| b.contains(pre)).and_then(|i| {
            bands
                .anxiety
                .iter()
                .position(|b| b.contains(anx))
                .map(|j| i * bands.anxiety.len() + j)
        });
        match cell {
            Some(c) => members[c].push(ckpt.distribution_normalized(&first.normalized)?),
            None => excluded += 1,
        }
    }
    let mut cells = Vec::with_capacity(members.len());
    for (i, pb) in bands.pretest.iter().enumerate() {
        for (j, ab) in bands.anxiety.iter().enumerate() {
            let probs = &members[i * bands.anxiety.len() + j];
            let n = probs.len();
            let (mean, half_width) = if n == 0 {
                (None, None)
            } else {
                let mut m = [0.0; N_ACTIONS];
                let mut h = [0.0; N_ACTIONS];
                for a in 0..N_ACTIONS {
                    let col: Vec<f64> = probs.iter().map(|p| p[a]).collect();
                    let (mu, sd) = crate::offline_rl::mean_std(&col);
                    m[a] = mu;
                    h[a] = 1.96 * sd / (n as f64).sqrt();
                }
                (Some(m), Some(h))
            };
            cells.push(GroupCell {
                pretest_band: pb.label.clone(),
                anxiety_band: ab.label.clone(),
                n,
                mean,
                half_width,
                single_student: n == 1,
            });
        }
    }
    Ok(GroupProbabilityReport { cells, excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{Activation, MlpSpec, OutputHead};
    use crate::policy::{policy_spec, Provenance};
    use crate::seed;
    use rand::Rng as _;

    fn random_x(rng: &mut crate::seed::Rng) -> [f64; N_FEATURES] {
        std::array::from_fn(|_| rng.random::<f64>())
    }

    #[test]
    fn zero_path_gives_zero() {
        let net = Mlp::init(policy_spec(&[8], Activation::Gelu), &mut seed::rng(1, &[]));
        let x = [0.3; N_FEATURES];
        let attr = integrated_gradients(&net, &x, &x, 16).unwrap();
        assert!(attr.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_head_is_exact() {
        let spec = MlpSpec::new(N_FEATURES, &[], N_ACTIONS, Activation::Tanh, OutputHead::Linear);
        let net = Mlp::init(spec, &mut seed::rng(2, &[]));
        let mut rng = seed::rng(3, &[]);
        let (x, b) = (random_x(&mut rng), random_x(&mut rng));
        let attr = integrated_gradients(&net, &x, &b, 3).unwrap();
        let w = &net.params.layers[0].weights;
        for k in 0..N_FEATURES {
            for a in 0..N_ACTIONS {
                assert!((attr[k][a] - w[a * N_FEATURES + k] * (x[k] - b[k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn completeness_improves_with_steps() {
        let net = Mlp::init(policy_spec(&[16, 16], Activation::Gelu), &mut seed::rng(4, &[]));
        let mut rng = seed::rng(5, &[]);
        let x = random_x(&mut rng);
        let b = [0.0; N_FEATURES];
        let res: Vec<f64> = [8, 64, 256]
            .iter()
            .map(|&m| completeness_residual(&net, &x, &b, &integrated_gradients(&net, &x, &b, m).unwrap()).unwrap())
            .collect();
        assert!(res[0] >= res[1] && res[1] >= res[2], "{res:?}");
        assert!(res[2] <= 1e-3);
    }

    #[test]
    fn dead_feature_gets_nothing() {
        let mut net = Mlp::init(policy_spec(&[8], Activation::Tanh), &mut seed::rng(6, &[]));
        for row in net.params.layers[0].weights.chunks_exact_mut(N_FEATURES) {
            row[3] = 0.0;
        }
        let mut rng = seed::rng(7, &[]);
        let attr = integrated_gradients(&net, &random_x(&mut rng), &[0.0; N_FEATURES], 32).unwrap();
        assert_eq!(attr[3], [0.0; N_ACTIONS]);
    }

    #[test]
    fn permuted_hidden_units_agree() {
        let net = Mlp::init(policy_spec(&[6], Activation::Gelu), &mut seed::rng(8, &[]));
        let mut perm = net.clone();
        let order = [3, 0, 5, 1, 4, 2];
        for (new, &old) in order.iter().enumerate() {
            let l0 = &net.params.layers[0];
            perm.params.layers[0].weights[new * N_FEATURES..(new + 1) * N_FEATURES]
                .copy_from_slice(&l0.weights[old * N_FEATURES..(old + 1) * N_FEATURES]);
            perm.params.layers[0].biases[new] = l0.biases[old];
            for a in 0..N_ACTIONS {
                perm.params.layers[1].weights[a * 6 + new] = net.params.layers[1].weights[a * 6 + old];
            }
        }
        let mut rng = seed::rng(9, &[]);
        let x = random_x(&mut rng);
        let p = integrated_gradients(&net, &x, &[0.0; N_FEATURES], 64).unwrap();
        let q = integrated_gradients(&perm, &x, &[0.0; N_FEATURES], 64).unwrap();
        for (a, b) in p.iter().flatten().zip(q.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_policy_reports() {
        let ckpt = PolicyCheckpoint::uniform();
        let cfg = crate::simulator::SimulatorConfig::default();
        let data = crate::simulator::collect_episodes(
            &ckpt,
            &cfg,
            &crate::reward::RewardParams::default(),
            3,
            crate::seed::stream::SIMULATE,
            0,
            200,
        )
        .unwrap();
        let report = aggregate_attributions(&ckpt, &data, &ExplainConfig::default()).unwrap();
        assert!(report.mean.iter().flatten().all(|&v| v == 0.0));
        let groups = group_action_probs(&ckpt, &data, &Bands::default()).unwrap();
        assert_eq!(groups.cells.len(), 4);
        for c in &groups.cells {
            if let Some(m) = c.mean {
                assert!(m.iter().all(|&p| (p - 0.25).abs() < 1e-15));
                assert!(c.half_width.unwrap().iter().all(|&h| h.abs() < 1e-12));
            }
        }
        let counted: usize = groups.cells.iter().map(|c| c.n).sum::<usize>() + groups.excluded;
        assert_eq!(counted, data.len());
        assert!(groups.to_csv().lines().count() == 1 + 16);
    }

    #[test]
    fn identical_inputs_match_single_attribution() {
        let net = Mlp::init(policy_spec(&[8], Activation::Gelu), &mut seed::rng(10, &[]));
        let ckpt = PolicyCheckpoint::new(net.clone(), None, Provenance::Bc, vec![]);
        let data = crate::simulator::collect_episodes(
            &PolicyCheckpoint::uniform(),
            &crate::simulator::SimulatorConfig::default(),
            &crate::reward::RewardParams::default(),
            4,
            crate::seed::stream::SIMULATE,
            0,
            1,
        )
        .unwrap();
        let mut one = data[0].clone();
        let first = one.steps[0].clone();
        one.steps = vec![first.clone(); 5];
        let report = aggregate_attributions(&ckpt, &[one], &ExplainConfig::default()).unwrap();
        let single = integrated_gradients(&net, &first.normalized, &[0.0; N_FEATURES], 64).unwrap();
        for (a, b) in report.mean.iter().flatten().zip(single.iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_student_cell_is_flagged() {
        let ckpt = PolicyCheckpoint::uniform();
        let data = crate::simulator::collect_episodes(
            &ckpt,
            &crate::simulator::SimulatorConfig::default(),
            &crate::reward::RewardParams::default(),
            5,
            crate::seed::stream::SIMULATE,
            0,
            1,
        )
        .unwrap();
        let t = &data[0];
        let anx = t.steps[0].observation.anxiety;
        let bands = Bands {
            pretest: vec![Band::new("All", 0, 8)],
            anxiety: vec![Band::new("Here", anx, anx), Band::new("Nowhere", 99, 99)],
        };
        let r = group_action_probs(&ckpt, &data, &bands).unwrap();
        assert!(r.cells[0].single_student);
        assert_eq!(r.cells[0].half_width, Some([0.0; N_ACTIONS]));
        assert_eq!(r.cells[1].mean, None);
    }
}
