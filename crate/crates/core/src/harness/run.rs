//! Sweep execution: one dataset per (seed, horizon), nested prefixes for the
//! trajectory counts, every estimator on every cell.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{
    ArchitectureKind, BehaviorSource, EstimatorConfig, EstimatorKind, ExperimentConfig, Setup,
};
use crate::baselines::{behavior_cloning, td_corrections_stochastic, weighted_stepwise_is};
use crate::dataset::{sample_trajectories, TrajectoryDataset, TransitionDataset};
use crate::error::{DiceError, Result};
use crate::mdp::{policy_value_exact, stationary_distribution, StochasticPolicy};
use crate::model::{Architecture, CorrectionModel, FeatureTable};
use crate::tabular::{
    build_empirical_model, ope_from_corrections, solve_dualdice_exact,
    solve_dualdice_exact_statewise, solve_td_exact, EmpiricalModel,
};
use crate::train::{estimate_from_model, train};

/// One estimator run on one (seed, trajectories, horizon) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub estimator: String,
    pub seed: u64,
    pub trajectories: usize,
    pub horizon: usize,
    /// `None` when the estimator failed on this cell.
    pub estimate: Option<f64>,
    pub truth: f64,
    pub sq_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// `(step, estimate)` pairs from training, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub truth: f64,
    pub records: Vec<CellRecord>,
}

impl ExperimentResult {
    pub fn estimator_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.records {
            if !names.contains(&r.estimator) {
                names.push(r.estimator.clone());
            }
        }
        names
    }
}

/// Everything an estimator may look at for one cell.
pub struct CellData<'a> {
    pub setup: &'a Setup,
    pub trajectories: TrajectoryDataset,
    pub transitions: TransitionDataset,
    pub empirical: EmpiricalModel,
    pub grid_size: Option<usize>,
    pub seed: u64,
}

/// Estimate plus optional training curve.
pub type EstimatorOutput = (f64, Option<Vec<(usize, f64)>>);

fn pair_features(cell: &CellData, arch: ArchitectureKind) -> Option<FeatureTable> {
    let (ns, na) = (cell.setup.mdp.num_states(), cell.setup.mdp.num_actions());
    match (arch, cell.grid_size) {
        (ArchitectureKind::Tabular, _) => None,
        (ArchitectureKind::Linear, Some(n)) => Some(FeatureTable::grid_polynomial(n, na)),
        (ArchitectureKind::Mlp, Some(n)) => Some(FeatureTable::grid_inputs(n, na)),
        (_, None) => Some(FeatureTable::state_action_onehot(ns, na)),
    }
}

fn state_architecture(cell: &CellData, spec: &EstimatorConfig) -> Architecture {
    let ns = cell.setup.mdp.num_states();
    let features = |arch| match (arch, cell.grid_size) {
        (ArchitectureKind::Linear, Some(n)) => FeatureTable::grid_state_polynomial(n),
        (ArchitectureKind::Mlp, Some(n)) => FeatureTable::grid_state_inputs(n),
        _ => FeatureTable::state_onehot(ns),
    };
    match spec.architecture {
        ArchitectureKind::Tabular => Architecture::Tabular { num_pairs: ns },
        ArchitectureKind::Linear => Architecture::Linear {
            features: features(ArchitectureKind::Linear).into(),
        },
        ArchitectureKind::Mlp => Architecture::Mlp {
            features: features(ArchitectureKind::Mlp).into(),
            hidden: spec.hidden.clone(),
        },
    }
}

/// Stochastic DualDICE on the cell's transitions. Takes no behavior policy.
fn run_dualdice(cell: &CellData, spec: &EstimatorConfig, record_curve: bool) -> Result<EstimatorOutput> {
    let mut cfg = spec.train_config();
    cfg.seed = cfg.seed.wrapping_add(cell.seed);
    let na = cell.setup.mdp.num_actions();
    let model = match pair_features(cell, spec.architecture) {
        None => CorrectionModel::tabular(cell.setup.mdp.num_states() * na),
        Some(f) if spec.architecture == ArchitectureKind::Linear => CorrectionModel::linear(f),
        Some(f) => CorrectionModel::mlp(f, spec.hidden.clone(), cfg.seed),
    };
    let out = train(&cell.transitions, &cell.setup.target, model, &cfg)?;
    let clip = if spec.clip_negative {
        Some(cfg.zeta_clip.unwrap_or(f64::INFINITY))
    } else {
        cfg.zeta_clip
    };
    let estimate = estimate_from_model(&out.model, &cell.empirical, clip);
    let curve = record_curve.then(|| out.trace.iter().map(|t| (t.step, t.estimate)).collect());
    Ok((estimate, curve))
}

fn behavior_for(cell: &CellData, spec: &EstimatorConfig) -> StochasticPolicy {
    match spec.behavior {
        BehaviorSource::Known => cell.setup.behavior.clone(),
        BehaviorSource::Cloned => behavior_cloning(&cell.transitions),
    }
}

/// Runs one estimator on one cell.
pub fn run_estimator(
    cell: &CellData,
    spec: &EstimatorConfig,
    oracle_occupancy: &[f64],
    record_curve: bool,
) -> Result<EstimatorOutput> {
    let gamma = cell.setup.mdp.gamma();
    let target = &cell.setup.target;
    let model = &cell.empirical;
    match spec.kind {
        EstimatorKind::DualdiceExact => {
            let sol = solve_dualdice_exact(model, target, gamma)?;
            Ok((ope_from_corrections(&sol.corrections, model, spec.clip_negative)?, None))
        }
        EstimatorKind::Dualdice => run_dualdice(cell, spec, record_curve),
        EstimatorKind::DualdiceExactStatewise => {
            let mu = behavior_for(cell, spec);
            let (w, _) = solve_dualdice_exact_statewise(model, target, &mu, gamma)?;
            Ok((ope_from_corrections(&w, model, spec.clip_negative)?, None))
        }
        EstimatorKind::TdExact => {
            let mu = behavior_for(cell, spec);
            let (w, _) = solve_td_exact(model, target, &mu, gamma)?;
            Ok((ope_from_corrections(&w, model, spec.clip_negative)?, None))
        }
        EstimatorKind::Td => {
            let mu = behavior_for(cell, spec);
            let mut cfg = spec.train_config();
            cfg.seed = cfg.seed.wrapping_add(cell.seed);
            let out = td_corrections_stochastic(
                &cell.transitions,
                target,
                &mu,
                state_architecture(cell, spec),
                &cfg,
            )?;
            Ok((ope_from_corrections(&out.corrections, model, spec.clip_negative)?, None))
        }
        EstimatorKind::Is => {
            let mu = behavior_for(cell, spec);
            Ok((weighted_stepwise_is(&cell.trajectories, target, &mu, gamma)?, None))
        }
        EstimatorKind::Oracle => {
            let mdp = &cell.setup.mdp;
            let value = (0..mdp.num_pairs())
                .map(|p| {
                    let r = if model.support_mask[p] {
                        model.avg_reward[p]
                    } else {
                        mdp.reward_mean()[p]
                    };
                    oracle_occupancy[p] * r
                })
                .sum();
            Ok((value, None))
        }
    }
}

/// Runs every estimator over seeds × horizons × trajectory counts.
///
/// Per (seed, horizon) one set of `max(trajectories)` rollouts is drawn; each
/// trajectory count uses a prefix of it. Estimator failures become records
/// with no estimate. Output order is deterministic: seed, horizon,
/// trajectory count, estimator (all in config order). `jobs` caps the worker
/// threads (`None`: one per logical core).
pub fn run_experiment(config: &ExperimentConfig, jobs: Option<usize>) -> Result<ExperimentResult> {
    config.validate()?;
    if config.estimators.is_empty() {
        return Err(DiceError::Config("no estimators configured".into()));
    }
    let setup = config.setup()?;
    let truth = policy_value_exact(&setup.mdp, &setup.target)?;
    let occupancy = stationary_distribution(&setup.mdp, &setup.target)?.probs;
    let max_n = *config.trajectories.iter().max().expect("validated");
    let groups: Vec<(u64, usize)> = config
        .seeds
        .iter()
        .flat_map(|&s| config.horizons.iter().map(move |&h| (s, h)))
        .collect();
    let work = |&(seed, horizon): &(u64, usize)| -> Result<Vec<CellRecord>> {
        let all = sample_trajectories(&setup.mdp, &setup.behavior, max_n, horizon, seed)?;
        let mut records = Vec::new();
        for &n in &config.trajectories {
            let trajectories = all.prefix(n);
            let transitions = trajectories.to_transitions(setup.mdp.gamma());
            let empirical = build_empirical_model(&transitions)?;
            let cell = CellData {
                setup: &setup,
                trajectories,
                transitions,
                empirical,
                grid_size: config.environment.grid_size(),
                seed,
            };
            for spec in &config.estimators {
                let outcome = run_estimator(&cell, spec, &occupancy, config.record_curves);
                let (estimate, curve, error) = match outcome {
                    Ok((v, c)) if v.is_finite() => (Some(v), c, None),
                    Ok((v, _)) => (None, None, Some(format!("non-finite estimate {v}"))),
                    Err(e) => (None, None, Some(e.to_string())),
                };
                records.push(CellRecord {
                    estimator: spec.name.clone(),
                    seed,
                    trajectories: n,
                    horizon,
                    estimate,
                    truth,
                    sq_error: estimate.map(|v| (v - truth).powi(2)),
                    error,
                    curve,
                });
            }
        }
        Ok(records)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| DiceError::Config(format!("thread pool: {e}")))?;
    let per_group: Vec<Result<Vec<CellRecord>>> = pool.install(|| groups.par_iter().map(work).collect());
    let mut records = Vec::new();
    for group in per_group {
        records.extend(group?);
    }
    Ok(ExperimentResult {
        name: config.name.clone(),
        truth,
        records,
    })
}
