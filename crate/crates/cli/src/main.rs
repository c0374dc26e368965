//! `dice`: generate off-policy datasets, solve or train DualDICE, evaluate
//! saved models, and run seeded sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dualdice::baselines::{behavior_cloning, weighted_stepwise_is};
use dualdice::dataset::{sample_trajectories, TrajectoryDataset, TransitionDataset};
use dualdice::envs::{grid_env, random_mdp, taxi_env};
use dualdice::harness::aggregate::{read_jsonl, summary_csv, verify_ground_truth, write_jsonl};
use dualdice::harness::{emit_plot_data, rmse_aggregate, run_experiment, ExperimentConfig, PanelDimension};
use dualdice::mdp::{mixture_policy, optimal_policy, policy_value_exact, StochasticPolicy, TabularMdp};
use dualdice::model::{CorrectionModel, FeatureTable};
use dualdice::tabular::{
    build_empirical_model, ope_from_corrections, solve_dualdice_exact, solve_dualdice_exact_statewise,
    solve_td_exact,
};
use dualdice::train::{estimate_from_model, train, Optimizer, TrainConfig};

const FORMATS: &str = "\
File formats:
  transitions   `dice-dataset v1 <states> <actions> <gamma>`, an optional
                `# <metadata>` line, then `T <s> <a> <r> <s'>` and `I <s0>` lines.
  trajectories  `dice-traj v1 <horizon> <states> <actions>`, then one line per
                trajectory: `s a r` triples followed by the final state.
  model         `dice-model v1 <tabular n | linear n d | mlp n d h...>`, then
                optional `features` rows and the `nu`/`zeta` parameter lines.
  sweep config  TOML; see the README for every key and its default.
  results       JSON lines, one record per (estimator, seed, cell).";

#[derive(Parser)]
#[command(name = "dice", version, about = "Off-policy evaluation with DualDICE", after_help = FORMATS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the behavior policy and save the logged data.
    GenData(GenData),
    /// Closed-form DualDICE and TD corrections on a dataset.
    SolveExact(SolveExact),
    /// Train DualDICE by stochastic saddle-point optimization.
    Train(TrainCmd),
    /// Estimate the target policy value with a saved model.
    Evaluate(Evaluate),
    /// Run a configured sweep and write raw results, summary and plots.
    Sweep(Sweep),
    /// Re-emit plot data from saved sweep results.
    Plot(Plot),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvKind {
    Taxi,
    Grid,
    Random,
}

/// Environment and policies: each policy is the optimal policy mixed with a
/// uniform one.
#[derive(Args, Clone)]
struct EnvArgs {
    #[arg(long, value_enum, default_value = "grid")]
    env: EnvKind,
    /// Grid side length.
    #[arg(long, default_value_t = 10)]
    size: usize,
    #[arg(long, default_value_t = 10)]
    num_states: usize,
    #[arg(long, default_value_t = 2)]
    num_actions: usize,
    /// Seed of the random MDP itself.
    #[arg(long, default_value_t = 0)]
    env_seed: u64,
    /// Overrides the environment's discount.
    #[arg(long)]
    gamma: Option<f64>,
    /// Uniform weight in the behavior policy.
    #[arg(long, default_value_t = 0.7)]
    behavior_mix: f64,
    /// Uniform weight in the target policy.
    #[arg(long, default_value_t = 0.1)]
    target_mix: f64,
}

struct Env {
    mdp: TabularMdp,
    behavior: StochasticPolicy,
    target: StochasticPolicy,
    grid_size: Option<usize>,
}

impl EnvArgs {
    fn build(&self) -> anyhow::Result<Env> {
        let mut mdp = match self.env {
            EnvKind::Taxi => taxi_env(),
            EnvKind::Grid => grid_env(self.size)?,
            EnvKind::Random => random_mdp(self.num_states, self.num_actions, 0.9, self.env_seed)?,
        };
        if let Some(g) = self.gamma {
            mdp = mdp.with_gamma(g)?;
        }
        let base = optimal_policy(&mdp);
        Ok(Env {
            behavior: mixture_policy(&base, self.behavior_mix)?,
            target: mixture_policy(&base, self.target_mix)?,
            grid_size: matches!(self.env, EnvKind::Grid).then_some(self.size),
            mdp,
        })
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    trajectories: usize,
    #[arg(long)]
    horizon: usize,
    #[arg(long, env = "DICE_SEED", default_value_t = 0)]
    seed: u64,
    /// Transitions file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the trajectories (needed by importance sampling).
    #[arg(long)]
    traj_out: Option<PathBuf>,
}

#[derive(Args)]
struct SolveExact {
    #[command(flatten)]
    env: EnvArgs,
    /// Transitions file; otherwise data is generated from the flags below.
    #[arg(long, conflicts_with_all = ["trajectories", "horizon"])]
    data: Option<PathBuf>,
    #[arg(long, required_unless_present = "data")]
    trajectories: Option<usize>,
    #[arg(long, required_unless_present = "data")]
    horizon: Option<usize>,
    #[arg(long, env = "DICE_SEED", default_value_t = 0)]
    seed: u64,
    /// Estimate the behavior policy by cloning instead of using the known one.
    #[arg(long)]
    clone_behavior: bool,
    /// Also print the true value and absolute errors.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ArchArg {
    Tabular,
    Linear,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptArg {
    Adam,
    Sgd,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1.5)]
    penalty_p: f64,
    #[arg(long, value_enum, default_value = "tabular")]
    arch: ArchArg,
    /// Hidden layer widths for the MLP.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    steps: usize,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr_nu: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_zeta: f64,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptArg,
    /// SGD step decay: step `lr / (1 + decay·t)`.
    #[arg(long, default_value_t = 0.0)]
    decay: f64,
    /// Clip corrections to `[0, C]`.
    #[arg(long)]
    zeta_clip: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    eval_every: usize,
    #[arg(long, env = "DICE_SEED", default_value_t = 0)]
    seed: u64,
    /// Where to save the trained model.
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct Evaluate {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Clip corrections to `[0, C]`.
    #[arg(long)]
    zeta_clip: Option<f64>,
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct Sweep {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: one per logical core).
    #[arg(long)]
    jobs: Option<usize>,
    /// Print the per-cell summary as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PanelArg {
    Trajectories,
    Horizon,
}

#[derive(Args)]
struct Plot {
    /// JSON-lines results written by `sweep`.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "trajectories")]
    panel: PanelArg,
    /// Sweep config; when given, the stored ground truth is re-checked.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::SolveExact(a) => solve_exact(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::Plot(a) => plot(a),
    }
}

fn gen_data(a: GenData) -> anyhow::Result<()> {
    let env = a.env.build()?;
    let trajs = sample_trajectories(&env.mdp, &env.behavior, a.trajectories, a.horizon, a.seed)?;
    let mut ds = trajs.to_transitions(env.mdp.gamma());
    ds.metadata = format!(
        "trajectories={} horizon={} seed={} behavior_mix={}",
        a.trajectories, a.horizon, a.seed, a.env.behavior_mix
    );
    match &a.out {
        Some(path) => ds.save(path).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{}", ds.to_text()),
    }
    if let Some(path) = &a.traj_out {
        trajs.save(path).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("{} transitions, {} start states", ds.len(), ds.initial_states.len());
    Ok(())
}

fn load_transitions(path: &Path) -> anyhow::Result<TransitionDataset> {
    TransitionDataset::load(path).with_context(|| format!("reading {}", path.display()))
}

fn check_data(env: &Env, ds: &TransitionDataset) -> anyhow::Result<()> {
    if ds.num_states != env.mdp.num_states() || ds.num_actions != env.mdp.num_actions() {
        bail!(
            "dataset has {}x{} states x actions but the environment has {}x{}",
            ds.num_states,
            ds.num_actions,
            env.mdp.num_states(),
            env.mdp.num_actions()
        );
    }
    Ok(())
}

/// Prints `key value` lines, or one JSON object.
fn report(json: bool, fields: &[(String, f64)]) {
    if json {
        let map: serde_json::Map<String, serde_json::Value> =
            fields.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
        println!("{}", serde_json::Value::Object(map));
    } else {
        for (k, v) in fields {
            println!("{k:<34} {v:.9}");
        }
    }
}

fn solve_exact(a: SolveExact) -> anyhow::Result<()> {
    let env = a.env.build()?;
    let (ds, trajs): (TransitionDataset, Option<TrajectoryDataset>) = match &a.data {
        Some(path) => (load_transitions(path)?, None),
        None => {
            let t = sample_trajectories(
                &env.mdp,
                &env.behavior,
                a.trajectories.expect("required"),
                a.horizon.expect("required"),
                a.seed,
            )?;
            (t.to_transitions(env.mdp.gamma()), Some(t))
        }
    };
    check_data(&env, &ds)?;
    let gamma = ds.gamma;
    let model = build_empirical_model(&ds)?;
    let mu = if a.clone_behavior {
        behavior_cloning(&ds)
    } else {
        env.behavior.clone()
    };
    let sa = solve_dualdice_exact(&model, &env.target, gamma)?;
    let dice = ope_from_corrections(&sa.corrections, &model, false)?;
    let (w_s, _) = solve_dualdice_exact_statewise(&model, &env.target, &mu, gamma)?;
    let dice_s = ope_from_corrections(&w_s, &model, false)?;
    let (w_td, _) = solve_td_exact(&model, &env.target, &mu, gamma)?;
    let td = ope_from_corrections(&w_td, &model, false)?;
    let mut fields = vec![
        ("dualdice_exact".to_string(), dice),
        ("dualdice_exact_statewise".to_string(), dice_s),
        ("td_exact".to_string(), td),
    ];
    if let Some(t) = &trajs {
        fields.push(("is".to_string(), weighted_stepwise_is(t, &env.target, &mu, gamma)?));
    }
    if a.oracle {
        add_oracle(&env, &mut fields)?;
    }
    report(a.json, &fields);
    Ok(())
}

/// Appends the true value and the absolute error of every estimate.
fn add_oracle(env: &Env, fields: &mut Vec<(String, f64)>) -> anyhow::Result<()> {
    let truth = policy_value_exact(&env.mdp, &env.target)?;
    let errors: Vec<(String, f64)> = fields
        .iter()
        .map(|(k, v)| (format!("{k}_abs_error"), (v - truth).abs()))
        .collect();
    fields.push(("truth".to_string(), truth));
    fields.extend(errors);
    Ok(())
}

fn train_cmd(a: TrainCmd) -> anyhow::Result<()> {
    let env = a.env.build()?;
    let ds = load_transitions(&a.data)?;
    check_data(&env, &ds)?;
    let (ns, na) = (ds.num_states, ds.num_actions);
    let features = || match env.grid_size {
        Some(n) if a.arch == ArchArg::Linear => FeatureTable::grid_polynomial(n, na),
        Some(n) => FeatureTable::grid_inputs(n, na),
        None => FeatureTable::state_action_onehot(ns, na),
    };
    let model = match a.arch {
        ArchArg::Tabular => CorrectionModel::tabular(ns * na),
        ArchArg::Linear => CorrectionModel::linear(features()),
        ArchArg::Mlp => CorrectionModel::mlp(features(), a.hidden.clone(), a.seed),
    };
    let config = TrainConfig {
        batch_size: a.batch_size,
        lr_nu: a.lr_nu,
        lr_zeta: a.lr_zeta,
        num_steps: a.steps,
        optimizer: match a.optimizer {
            OptArg::Adam => Optimizer::default(),
            OptArg::Sgd => Optimizer::Sgd { decay: a.decay },
        },
        penalty_p: a.penalty_p,
        seed: a.seed,
        zeta_clip: a.zeta_clip,
        eval_every: a.eval_every,
        exact_expectation: false,
    };
    let out = train(&ds, &env.target, model, &config)?;
    if let Some(path) = &a.model_out {
        std::fs::write(path, out.model.to_text()).with_context(|| format!("writing {}", path.display()))?;
    }
    let empirical = build_empirical_model(&ds)?;
    let mut fields = vec![("estimate".to_string(), estimate_from_model(&out.model, &empirical, a.zeta_clip))];
    if a.oracle {
        add_oracle(&env, &mut fields)?;
    }
    report(a.json, &fields);
    Ok(())
}

fn evaluate(a: Evaluate) -> anyhow::Result<()> {
    let env = a.env.build()?;
    let ds = load_transitions(&a.data)?;
    check_data(&env, &ds)?;
    let text = std::fs::read_to_string(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let model = CorrectionModel::from_text(&text)?;
    if model.num_pairs() != ds.num_states * ds.num_actions {
        bail!("model covers {} pairs but the dataset has {}", model.num_pairs(), ds.num_states * ds.num_actions);
    }
    let empirical = build_empirical_model(&ds)?;
    let mut fields = vec![("estimate".to_string(), estimate_from_model(&model, &empirical, a.zeta_clip))];
    if a.oracle {
        add_oracle(&env, &mut fields)?;
    }
    report(a.json, &fields);
    Ok(())
}

fn sweep(a: Sweep) -> anyhow::Result<()> {
    let config = ExperimentConfig::load(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    if a.jobs == Some(0) {
        bail!("--jobs must be at least 1");
    }
    let result = run_experiment(&config, a.jobs)?;
    std::fs::create_dir_all(&a.out)?;
    write_jsonl(&result, &a.out.join("results.jsonl"))?;
    let summaries = rmse_aggregate(&result.records);
    std::fs::write(a.out.join("summary.csv"), summary_csv(&summaries))?;
    emit_plot_data(&result, config.panel, &a.out)?;
    if a.json {
        println!("{}", serde_json::to_string(&json!({ "truth": result.truth, "cells": summaries }))?);
    } else {
        println!("truth {:.9}", result.truth);
        print!("{}", summary_csv(&summaries));
    }
    let failed = result.records.iter().filter(|r| r.estimate.is_none()).count();
    if failed > 0 {
        eprintln!("{failed} estimator runs failed; see results.jsonl");
    }
    Ok(())
}

fn plot(a: Plot) -> anyhow::Result<()> {
    let name = a.results.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    let result = read_jsonl(&a.results, name).with_context(|| format!("reading {}", a.results.display()))?;
    if let Some(path) = &a.config {
        verify_ground_truth(&result, &ExperimentConfig::load(path)?)?;
    }
    let dimension = match a.panel {
        PanelArg::Trajectories => PanelDimension::Trajectories,
        PanelArg::Horizon => PanelDimension::Horizon,
    };
    for path in emit_plot_data(&result, dimension, &a.out)? {
        println!("{}", path.display());
    }
    Ok(())
}
