use dualdice::harness::aggregate::{find_summary, read_jsonl, verify_ground_truth, write_jsonl};
use dualdice::harness::config::EnvironmentConfig;
use dualdice::train::Optimizer;
use dualdice::harness::{
    emit_plot_data, rmse_aggregate, run_experiment, EstimatorConfig, EstimatorKind, ExperimentConfig, PanelDimension,
};

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: "small".into(),
        environment: EnvironmentConfig::Random {
            num_states: 6,
            num_actions: 2,
            gamma: 0.9,
            seed: 4,
        },
        trajectories: vec![5, 40],
        horizons: vec![30],
        seeds: (0..6).collect(),
        reward_noise: 0.5,
        ..Default::default()
    };
    for (name, kind) in [
        ("dualdice-exact", EstimatorKind::DualdiceExact),
        ("td-exact", EstimatorKind::TdExact),
        ("is", EstimatorKind::Is),
        ("oracle", EstimatorKind::Oracle),
    ] {
        cfg.estimators.push(EstimatorConfig::new(name, kind));
    }
    let mut dice = EstimatorConfig::new("dualdice", EstimatorKind::Dualdice);
    dice.train.num_steps = 200;
    dice.train.batch_size = 32;
    dice.train.eval_every = 50;
    cfg.estimators.push(dice);
    cfg.record_curves = true;
    cfg
}

#[test]
fn sweep_is_deterministic_across_thread_counts() {
    let cfg = small_config();
    let a = run_experiment(&cfg, Some(1)).unwrap();
    let b = run_experiment(&cfg, Some(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.records.len(), 6 * 2 * 5);
    assert!(a.records.iter().all(|r| r.estimate.is_some()));
    let curve = a.records.iter().find(|r| r.estimator == "dualdice").unwrap().curve.as_ref().unwrap();
    assert_eq!(curve.iter().map(|c| c.0).collect::<Vec<_>>(), vec![50, 100, 150, 200]);
}

#[test]
fn more_data_reduces_exact_error() {
    let result = run_experiment(&small_config(), Some(1)).unwrap();
    let s = rmse_aggregate(&result.records);
    for name in ["dualdice-exact", "td-exact", "oracle"] {
        let small = find_summary(&s, name, 5, 30).unwrap();
        let large = find_summary(&s, name, 40, 30).unwrap();
        assert!(large.rmse < small.rmse, "{name}: {} vs {}", large.rmse, small.rmse);
        assert_eq!(small.count, 6);
    }
}

#[test]
fn results_roundtrip_through_jsonl() {
    let cfg = small_config();
    let result = run_experiment(&cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    write_jsonl(&result, &path).unwrap();
    let back = read_jsonl(&path, "small").unwrap();
    assert_eq!(back, result);
    assert!((verify_ground_truth(&back, &cfg).unwrap() - result.truth).abs() < 1e-12);
    let mut other = cfg.clone();
    other.target_mix = 0.9;
    assert!(verify_ground_truth(&back, &other).is_err());
    let files = emit_plot_data(&back, PanelDimension::Horizon, dir.path()).unwrap();
    assert!(files.iter().any(|f| f.ends_with("curves.csv")));
}

#[test]
fn estimator_failures_become_records() {
    let mut cfg = small_config();
    cfg.estimators.retain(|e| e.kind == EstimatorKind::Dualdice || e.kind == EstimatorKind::DualdiceExact);
    let dice = &mut cfg.estimators[1];
    dice.train.optimizer = Optimizer::Sgd { decay: 0.0 };
    dice.train.lr_nu = 1e12;
    dice.train.lr_zeta = 1e12;
    let result = run_experiment(&cfg, Some(1)).unwrap();
    let diverged: Vec<_> = result.records.iter().filter(|r| r.estimator == "dualdice").collect();
    assert!(diverged.iter().all(|r| r.estimate.is_none() && r.error.as_ref().unwrap().contains("non-finite")));
    let s = rmse_aggregate(&result.records);
    assert!(find_summary(&s, "dualdice", 5, 30).unwrap().rmse.is_nan());
    assert!(result.records.iter().any(|r| r.estimator == "dualdice-exact" && r.estimate.is_some()));
}

#[test]
fn empty_estimator_list_is_rejected() {
    let mut cfg = small_config();
    cfg.estimators.clear();
    assert!(run_experiment(&cfg, None).is_err());
}
