use std::fs;

use rltutor_core::domain::N_ACTIONS;
use rltutor_core::offline_rl::{grid_search, Algorithm, GridSpec, OfflineConfig};
use rltutor_core::online_ppo::{checkpoint_path, train_online, PpoConfig};
use rltutor_core::policy::PolicyCheckpoint;
use rltutor_core::reward::RewardParams;
use rltutor_core::runtime::{
    self, read_trajectories, trajectories_to_string, write_trajectories, EvalMode, Experiment, PolicySource,
};
use rltutor_core::simulator::SimulatorConfig;
use rltutor_core::Error;

#[test]
fn resumed_online_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let sim = SimulatorConfig::default();
    let rewards = RewardParams::default();
    let full_cfg = PpoConfig {
        total_students: 60,
        seed: 5,
        ..Default::default()
    };
    let full = train_online(&full_cfg, &sim, &rewards, &dir.path().join("full"), false).unwrap();

    let part_dir = dir.path().join("part");
    let first = PpoConfig {
        total_students: 30,
        ..full_cfg.clone()
    };
    train_online(&first, &sim, &rewards, &part_dir, false).unwrap();
    let resumed = train_online(&full_cfg, &sim, &rewards, &part_dir, true).unwrap();

    assert_eq!(resumed.diagnostics, full.diagnostics);
    for i in 0..=6 {
        let a = fs::read(checkpoint_path(&dir.path().join("full"), i)).unwrap();
        let b = fs::read(checkpoint_path(&part_dir, i)).unwrap();
        assert_eq!(a, b, "checkpoint {i}");
    }
    assert_eq!(
        fs::read(dir.path().join("full/diagnostics.csv")).unwrap(),
        fs::read(part_dir.join("diagnostics.csv")).unwrap()
    );
}

#[test]
fn resume_rejects_changed_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PpoConfig {
        total_students: 10,
        ..Default::default()
    };
    let sim = SimulatorConfig::default();
    let rewards = RewardParams::default();
    train_online(&cfg, &sim, &rewards, dir.path(), false).unwrap();
    let changed = PpoConfig {
        learning_rate: 0.01,
        total_students: 20,
        ..cfg
    };
    let err = train_online(&changed, &sim, &rewards, dir.path(), true).unwrap_err();
    assert!(matches!(err, Error::Config { .. }));
}

#[test]
fn wis_and_rollout_agree_for_the_behavior_policy() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::default().with_seed(77);
    let data = dir.path().join("logs.jsonl");
    runtime::simulate(&exp, &PolicySource::Uniform, 500, &data).unwrap();
    let wis = runtime::evaluate(&exp, &PolicySource::Uniform, &EvalMode::Wis(data)).unwrap();
    let roll = runtime::evaluate(&exp, &PolicySource::Uniform, &EvalMode::Rollout(500)).unwrap();
    let se = roll.stderr.unwrap();
    assert!(
        (wis.estimate - roll.estimate).abs() < 3.0 * se,
        "wis {} rollout {} se {se}",
        wis.estimate,
        roll.estimate
    );
    assert!((wis.ess.unwrap() - 500.0).abs() < 1e-6);
    let again = runtime::evaluate(&exp, &PolicySource::Uniform, &EvalMode::Rollout(500)).unwrap();
    assert_eq!(again, roll);
}

#[test]
fn simulated_pretest_mean_matches_config() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::default();
    let s = runtime::simulate(&exp, &PolicySource::Uniform, 10_000, &dir.path().join("t.jsonl")).unwrap();
    let analytic = exp.simulator.mean_pre_score();
    assert!(
        (s.mean_pre_score.unwrap() - analytic).abs() < 0.1,
        "{s:?} vs {analytic}"
    );
}

#[test]
fn trajectory_files_round_trip_and_reject_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::default().with_seed(3);
    let path = dir.path().join("t.jsonl");
    runtime::simulate(&exp, &PolicySource::Uniform, 20, &path).unwrap();
    let data = read_trajectories(&path).unwrap();
    assert_eq!(data.len(), 20);
    let again = dir.path().join("u.jsonl");
    write_trajectories(&again, &data).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

    // Reordered action header.
    let text = fs::read_to_string(&path).unwrap();
    let swapped = text.replacen(
        "\"DirectHint\",\"Acknowledgment\"",
        "\"Acknowledgment\",\"DirectHint\"",
        1,
    );
    fs::write(&again, swapped).unwrap();
    assert!(matches!(read_trajectories(&again), Err(Error::Data(_))));

    // Probabilities that leave the simplex.
    let mut bad = data.clone();
    bad[3].steps[0].behavior_probs = [0.5; N_ACTIONS];
    fs::write(&again, trajectories_to_string(&bad)).unwrap();
    let err = read_trajectories(&again).unwrap_err().to_string();
    assert!(err.contains(":5:"), "{err}");

    // Missing behavior probabilities.
    let stripped = text.replacen("\"behavior_probs\"", "\"probs\"", 1);
    fs::write(&again, stripped).unwrap();
    assert!(matches!(read_trajectories(&again), Err(Error::Data(_))));
}

#[test]
fn experiment_config_resolves_simulator_relative_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let shipped = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    for f in ["experiment.toml", "simulator.toml"] {
        fs::copy(format!("{shipped}/{f}"), dir.path().join(f)).unwrap();
    }
    let exp = Experiment::load(&dir.path().join("experiment.toml")).unwrap();
    assert_eq!(exp.simulator, SimulatorConfig::default());
    assert_eq!(exp.config.offline.grid, GridSpec::default());
    assert_eq!(exp.config.offline.n_splits, 10);

    fs::remove_file(dir.path().join("simulator.toml")).unwrap();
    let err = Experiment::load(&dir.path().join("experiment.toml")).unwrap_err();
    assert!(
        matches!(&err, Error::Config { path, .. } if path == "experiment.simulator"),
        "{err}"
    );
}

#[test]
fn offline_selection_is_seed_dependent_but_reproducible() {
    let exp = Experiment::default().with_seed(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    runtime::simulate(&exp, &PolicySource::Uniform, 30, &path).unwrap();
    let data = read_trajectories(&path).unwrap();
    let grid = GridSpec::single(&OfflineConfig::new(Algorithm::Pois, &[4], 1, 0.01));
    let (a, ca) = grid_search(&data, &grid, 3, 9, true).unwrap();
    let (b, cb) = grid_search(&data, &grid, 3, 9, false).unwrap();
    let (c, _) = grid_search(&data, &grid, 3, 10, true).unwrap();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    assert_ne!(a.split_seeds, c.split_seeds);
    assert_eq!(ca.provenance, rltutor_core::policy::Provenance::Pois);
    let _ = PolicyCheckpoint::from_text(&ca.to_text()).unwrap();
}
