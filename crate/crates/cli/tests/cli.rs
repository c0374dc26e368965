use std::path::Path;
use std::process::{Command, Output};

fn dice(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dice"))
        .args(args)
        .env_remove("DICE_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| {
            let mut it = l.split_whitespace();
            (it.next() == Some(key)).then(|| it.next().unwrap().parse().unwrap())
        })
        .unwrap_or_else(|| panic!("{key} missing in {text}"))
}

fn gen(dir: &Path, name: &str, seed: &str) -> String {
    let path = dir.join(name).to_str().unwrap().to_string();
    let o = dice(&[
        "gen-data", "--env", "random", "--num-states", "6", "--num-actions", "2", "--trajectories", "10",
        "--horizon", "30", "--seed", seed, "--out", &path,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    path
}

#[test]
fn version_is_one_semver_line() {
    let o = dice(&["--version"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1);
    let v = text.split_whitespace().last().unwrap();
    assert_eq!(v.split('.').filter(|p| p.parse::<u64>().is_ok()).count(), 3);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(dice(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(dice(&["frobnicate"]).status.code(), Some(1));
    let o = dice(&["solve-exact", "--data", "x", "--trajectories", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot be used with"));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "not a dataset\n").unwrap();
    let o = dice(&["evaluate", "--data", bad.to_str().unwrap(), "--model", "missing"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn help_documents_formats() {
    for sub in ["gen-data", "solve-exact", "train", "evaluate", "sweep", "plot"] {
        let o = dice(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("--"), "{sub}");
    }
    assert!(stdout(&dice(&["--help"])).contains("dice-dataset v1"));
}

#[test]
fn seeded_commands_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.txt", "3");
    let b = gen(dir.path(), "b.txt", "3");
    let c = gen(dir.path(), "c.txt", "4");
    let (a_text, b_text) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(a_text, b_text);
    assert_ne!(a_text, std::fs::read(&c).unwrap());
    let train = |seed: &str| {
        stdout(&dice(&[
            "train", "--env", "random", "--num-states", "6", "--num-actions", "2", "--data", &a, "--steps",
            "300", "--batch-size", "32", "--seed", seed,
        ]))
    };
    assert_eq!(train("1"), train("1"));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let explicit = gen(dir.path(), "e.txt", "9");
    let path = dir.path().join("f.txt");
    let o = Command::new(env!("CARGO_BIN_EXE_dice"))
        .args([
            "gen-data", "--env", "random", "--num-states", "6", "--num-actions", "2", "--trajectories", "10",
            "--horizon", "30", "--out", path.to_str().unwrap(),
        ])
        .env("DICE_SEED", "9")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read(explicit).unwrap(), std::fs::read(path).unwrap());
}

#[test]
fn train_then_evaluate_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.txt", "0");
    let model = dir.path().join("m.txt");
    let env = ["--env", "random", "--num-states", "6", "--num-actions", "2"];
    let mut args = vec!["train"];
    args.extend(env);
    args.extend(["--data", &data, "--steps", "500", "--batch-size", "64", "--oracle"]);
    args.extend(["--model-out", model.to_str().unwrap()]);
    let trained = stdout(&dice(&args));
    let mut args = vec!["evaluate"];
    args.extend(env);
    args.extend(["--data", &data, "--model", model.to_str().unwrap(), "--oracle"]);
    let evaluated = stdout(&dice(&args));
    assert!((field(&trained, "estimate") - field(&evaluated, "estimate")).abs() < 1e-8);
    let err = field(&evaluated, "estimate_abs_error");
    assert!((err - (field(&evaluated, "estimate") - field(&evaluated, "truth")).abs()).abs() < 1e-8);
}

#[test]
fn solve_exact_json_and_oracle() {
    let o = dice(&[
        "solve-exact", "--env", "random", "--num-states", "6", "--num-actions", "2", "--trajectories", "50",
        "--horizon", "50", "--seed", "2", "--oracle", "--json",
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let truth = v["truth"].as_f64().unwrap();
    for key in ["dualdice_exact", "dualdice_exact_statewise", "td_exact", "is"] {
        let est = v[key].as_f64().unwrap();
        assert!((v[format!("{key}_abs_error")].as_f64().unwrap() - (est - truth).abs()).abs() < 1e-12);
    }
}

#[test]
fn sweep_writes_results_and_plot_reemits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    std::fs::write(
        &cfg,
        r#"
name = "small"
trajectories = [5, 10]
horizons = [20]
seeds = [0, 1]

[environment]
kind = "random"
num_states = 5
num_actions = 2

[[estimators]]
name = "dualdice"
kind = "dualdice-exact"

[[estimators]]
name = "is"
kind = "is"
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let run = |jobs: &str| {
        let o = dice(&[
            "sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", jobs, "--json",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (stdout(&o), std::fs::read(out.join("results.jsonl")).unwrap())
    };
    let (summary, raw) = run("1");
    let v: serde_json::Value = serde_json::from_str(summary.trim()).unwrap();
    assert_eq!(v["cells"].as_array().unwrap().len(), 4);
    assert_eq!(String::from_utf8(raw.clone()).unwrap().lines().count(), 8);
    assert_eq!(run("2").1, raw);
    for f in ["summary.csv", "panel_trajectories_5.svg", "panel_trajectories_10.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let replot = dir.path().join("replot");
    let o = dice(&[
        "plot", "--results", out.join("results.jsonl").to_str().unwrap(), "--out", replot.to_str().unwrap(),
        "--panel", "horizon", "--config", cfg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(replot.join("panel_horizon_20.csv").exists());
}
