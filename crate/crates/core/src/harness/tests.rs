use std::path::Path;

use proptest::prelude::*;

use super::*;
use crate::agent::TargetMode;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.output_dir = dir.to_path_buf();
    c.agent.hidden = vec![8];
    c.agent.batch_size = 16;
    c.training.epochs = 3;
    c.training.rollouts_per_epoch = 12;
    c.training.updates_per_epoch = 4;
    c.training.eval_episodes = 2;
    c.training.probe_states = 8;
    c.training.saved_trajectories = 2;
    c.analysis.dp.h = 1.0;
    c.analysis.map_h = 2.0;
    c
}

#[test]
fn default_config_round_trips() {
    let c = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    assert!(c.problems().is_empty());
}

proptest! {
    #[test]
    fn config_round_trip_is_identity(
        seed in 0..=i64::MAX as u64,
        epochs in 0usize..1000,
        n in 2usize..50,
        eta in 0.0f64..100.0,
        alpha in 0.0f64..=1.0,
        mode in 0usize..3,
        ratio in 0.0f64..=1.0,
    ) {
        let mut c = ExperimentConfig::default();
        c.seed = seed;
        c.training.epochs = epochs;
        c.agent.n_critics = n;
        c.agent.eta = eta;
        c.agent.mode = [TargetMode::Base, TargetMode::Ravl, TargetMode::OraclePatch][mode];
        c.model.alpha = alpha;
        c.training.real_ratio = ratio;
        prop_assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}

#[test]
fn overrides_reach_nested_fields() {
    let c = ExperimentConfig::default()
        .with_overrides(&[
            "agent.n_critics=10".into(),
            "agent.mode=ravl".into(),
            "env.rollout_len = 5".into(),
            "model.ensemble.hidden=[16, 16]".into(),
        ])
        .unwrap();
    assert_eq!(c.agent.n_critics, 10);
    assert_eq!(c.agent.mode, TargetMode::Ravl);
    assert_eq!(c.env.rollout_len, 5);
    assert_eq!(c.model.ensemble.hidden, vec![16, 16]);
}

#[test]
fn unknown_keys_are_errors() {
    assert!(matches!(
        ExperimentConfig::from_toml("[agent]\nn_critic = 3\n"),
        Err(HarnessError::Parse(_))
    ));
    assert!(ExperimentConfig::default().with_overrides(&["training.epoch=3".into()]).is_err());
    assert!(ExperimentConfig::default().with_overrides(&["no_equals_sign".into()]).is_err());
}

#[test]
fn validation_lists_every_offending_field() {
    let mut c = ExperimentConfig::default();
    c.agent.n_critics = 1;
    c.model.alpha = 2.0;
    c.training.real_ratio = -0.5;
    c.analysis.dp.h = 0.0;
    let err = c.validate().unwrap_err();
    let fields = err.details();
    for f in ["agent.n_critics", "model.alpha", "training.real_ratio", "analysis.dp.h"] {
        assert!(fields.iter().any(|m| m.starts_with(f)), "{f} missing from {fields:?}");
    }
    assert_eq!(err.kind(), "invalid_config");
    c = ExperimentConfig::default();
    c.seed = u64::MAX;
    assert!(c.problems().iter().any(|m| m.starts_with("seed")));
}

#[test]
fn zero_epochs_still_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.training.epochs = 0;
    let s = run(&c).unwrap();
    assert_eq!(s.epochs_completed, 0);
    for f in ["config.toml", "metrics.csv", "summary.json", "trajectories.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(dir.path().join("checkpoints/final/policy.json").exists());
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    assert_eq!(read_metrics(dir.path()).unwrap().len(), 0);
}

#[test]
fn runs_are_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(&tiny(a.path())).unwrap();
    run(&tiny(b.path())).unwrap();
    let read = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(read_metrics(a.path()).unwrap().len(), 3);
    let snapshot = std::fs::read_to_string(a.path().join("config.toml")).unwrap();
    let mut expected = tiny(a.path());
    expected.output_dir = a.path().to_path_buf();
    assert_eq!(ExperimentConfig::from_toml(&snapshot).unwrap(), expected);
}

#[test]
fn different_seeds_differ() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(&tiny(a.path())).unwrap();
    let mut c = tiny(b.path());
    c.seed = 1;
    run(&c).unwrap();
    let read = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
}

#[test]
fn single_value_sweep_matches_direct_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(dir.path());
    let points = sweep(&base, "agent.eta", &["0.5".into()]).unwrap();
    assert_eq!(points.len(), 1);
    let direct_dir = dir.path().join("direct");
    let mut direct = base.with_overrides(&["agent.eta=0.5".into()]).unwrap();
    direct.output_dir = direct_dir.clone();
    run(&direct).unwrap();
    let read = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(&points[0].output_dir), read(&direct_dir));
    assert!(dir.path().join("sweep_summary.csv").exists());
}

#[test]
fn sweep_rejects_unknown_axis() {
    let dir = tempfile::tempdir().unwrap();
    let err = sweep(&tiny(dir.path()), "agent.etaa", &["1".into()]).unwrap_err();
    assert!(matches!(err, HarnessError::InvalidAxis { .. }));
    let err = sweep(&tiny(dir.path()), "agent", &["1".into()]).unwrap_err();
    assert!(matches!(err, HarnessError::InvalidAxis { .. }));
}

#[test]
fn plotdata_schemas() {
    let dir = tempfile::tempdir().unwrap();
    run(&tiny(dir.path())).unwrap();
    let header = |fig: &str| {
        let p = emit_plotdata(dir.path(), fig, None).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        (text.lines().next().unwrap().to_string(), text.lines().count())
    };
    assert_eq!(header("fig4f"), ("epoch,mean_q,mode".to_string(), 4));
    assert_eq!(header("fig4e").0, "epoch,eval_return,mode");
    assert_eq!(header("fig9").0, "epoch,traj,t,x,y");
    // Two trajectories of k + 1 points per epoch.
    assert_eq!(header("fig9").1, 1 + 3 * 2 * 11);
    assert_eq!(header("fig6").0, "x,y,ensemble_std,reach");
    assert_eq!(header("fig3").0, "epoch,mean_q,max_q,oracle_max_value,mode");
    assert_eq!(header("fig4a").0, "x,y,reward");
    assert_eq!(header("fig4b").0, "episode,t,x,y,mode");
    assert!(matches!(
        emit_plotdata(dir.path(), "fig99", None),
        Err(HarnessError::UnknownFigure(_))
    ));
}

#[test]
fn empty_run_gives_header_only_plotdata() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.training.epochs = 0;
    run(&c).unwrap();
    for fig in ["fig3", "fig4e", "fig4f", "fig9"] {
        let p = emit_plotdata(dir.path(), fig, None).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap().lines().count(), 1, "{fig}");
    }
}

#[test]
fn timing_bench_normalises_to_two_critics() {
    let dir = tempfile::tempdir().unwrap();
    let rows = timing_bench(&tiny(dir.path()), &[2, 4], 2, 1).unwrap();
    assert_eq!(rows[0].n_critics, 2);
    assert_eq!(rows[0].ratio, 1.0);
    assert!(rows[1].median_seconds > 0.0);
    assert!(timing_bench(&tiny(dir.path()), &[1], 2, 1).is_err());
}

#[test]
fn learned_and_interpolated_models_build() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.model.variant = ModelVariant::Interpolated;
    c.model.base = Endpoint::Random;
    c.model.target = Endpoint::True;
    c.model.alpha = 0.5;
    c.model.random_hidden = vec![8];
    let (m, data, rep) = build_model(&c, &mut crate::substream(0, "model")).unwrap();
    assert_eq!(m.variant_name(), "interpolated");
    assert!(data.is_empty() && rep.is_none());

    c.model.variant = ModelVariant::Learned;
    c.model.dataset_size = 200;
    c.model.ensemble.members = 2;
    c.model.ensemble.elites = 1;
    c.model.ensemble.hidden = vec![8];
    c.model.ensemble.epochs = 2;
    let (m, data, rep) = build_model(&c, &mut crate::substream(0, "model")).unwrap();
    assert_eq!(m.variant_name(), "learned");
    assert_eq!(data.len(), 200);
    assert!(rep.is_some());
}

#[test]
fn oracle_patch_needs_true_dynamics() {
    let mut c = ExperimentConfig::default();
    c.agent.mode = TargetMode::OraclePatch;
    c.model.variant = ModelVariant::Learned;
    assert!(c.problems().iter().any(|p| p.starts_with("agent.mode")));
}
