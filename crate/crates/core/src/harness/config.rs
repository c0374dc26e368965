//! Experiment configuration, read from TOML.
//!
//! ```toml
//! name = "taxi"
//! behavior_mix = 0.7
//! target_mix = 0.1
//! trajectories = [50, 100, 200, 400]
//! horizons = [400]
//! seeds = [0, 1, 2]
//!
//! [environment]
//! kind = "taxi"
//!
//! [[estimators]]
//! name = "dualdice"
//! kind = "dualdice-exact-statewise"
//! ```
//!
//! Every field except the estimator list has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::{grid_env, random_mdp, taxi_env};
use crate::error::{DiceError, Result};
use crate::mdp::{mixture_policy, optimal_policy, StochasticPolicy, TabularMdp};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvironmentConfig {
    Taxi,
    Grid {
        #[serde(default = "default_grid_size")]
        size: usize,
    },
    Random {
        num_states: usize,
        num_actions: usize,
        #[serde(default = "default_random_gamma")]
        gamma: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_grid_size() -> usize {
    10
}

fn default_random_gamma() -> f64 {
    0.9
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        EnvironmentConfig::Grid { size: 10 }
    }
}

impl EnvironmentConfig {
    pub fn build(&self) -> Result<TabularMdp> {
        match *self {
            EnvironmentConfig::Taxi => Ok(taxi_env()),
            EnvironmentConfig::Grid { size } => grid_env(size),
            EnvironmentConfig::Random {
                num_states,
                num_actions,
                gamma,
                seed,
            } => random_mdp(num_states, num_actions, gamma, seed),
        }
    }

    pub fn grid_size(&self) -> Option<usize> {
        match *self {
            EnvironmentConfig::Grid { size } => Some(size),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Closed-form DualDICE over state-action pairs.
    DualdiceExact,
    /// Closed-form DualDICE over states, with per-step importance ratios.
    DualdiceExactStatewise,
    /// Closed-form solution of the flow (TD) fixed point.
    TdExact,
    /// Stochastic DualDICE training.
    Dualdice,
    /// Stochastic TD learning of state corrections.
    Td,
    /// Weighted step-wise importance sampling.
    Is,
    /// True `d^π` applied to the observed rewards.
    Oracle,
}

impl EstimatorKind {
    pub fn uses_behavior(self) -> bool {
        matches!(
            self,
            EstimatorKind::DualdiceExactStatewise | EstimatorKind::TdExact | EstimatorKind::Td | EstimatorKind::Is
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureKind {
    #[default]
    Tabular,
    Linear,
    Mlp,
}

/// Where estimators that need `μ` get it from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BehaviorSource {
    #[default]
    Known,
    /// Tabular behavior cloning on the logged transitions.
    Cloned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub name: String,
    pub kind: EstimatorKind,
    /// Overrides `train.penalty_p`.
    #[serde(default)]
    pub penalty_p: Option<f64>,
    #[serde(default)]
    pub architecture: ArchitectureKind,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub behavior: BehaviorSource,
    /// Clip negative corrections before averaging rewards.
    #[serde(default)]
    pub clip_negative: bool,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

impl EstimatorConfig {
    pub fn new(name: &str, kind: EstimatorKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            penalty_p: None,
            architecture: ArchitectureKind::default(),
            hidden: default_hidden(),
            behavior: BehaviorSource::default(),
            clip_negative: false,
            train: TrainConfig::default(),
        }
    }

    /// Training configuration with the penalty override applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        if let Some(p) = self.penalty_p {
            cfg.penalty_p = p;
        }
        cfg
    }
}

/// Which sweep dimension indexes the plot panels; the other one is the
/// x-axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PanelDimension {
    #[default]
    Trajectories,
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub environment: EnvironmentConfig,
    /// Uniform weight mixed into the optimal policy to form `μ`.
    pub behavior_mix: f64,
    /// Uniform weight mixed into the optimal policy to form `π`.
    pub target_mix: f64,
    pub trajectories: Vec<usize>,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
    pub gamma: Option<f64>,
    /// Half-width of the uniform reward noise.
    pub reward_noise: f64,
    pub panel: PanelDimension,
    /// Keep the per-run training traces of stochastic estimators.
    pub record_curves: bool,
    pub estimators: Vec<EstimatorConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            environment: EnvironmentConfig::default(),
            behavior_mix: 0.7,
            target_mix: 0.1,
            trajectories: vec![50, 100, 200, 400],
            horizons: vec![100, 200, 400],
            seeds: (0..20).collect(),
            gamma: None,
            reward_noise: 0.0,
            panel: PanelDimension::default(),
            record_curves: false,
            estimators: Vec::new(),
        }
    }
}

/// Environment and policies built from a config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub mdp: TabularMdp,
    pub behavior: StochasticPolicy,
    pub target: StochasticPolicy,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| DiceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DiceError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        if self.trajectories.is_empty() || self.trajectories.contains(&0) {
            return bad("trajectories must be non-empty and positive".into());
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return bad("horizons must be non-empty and positive".into());
        }
        for (what, m) in [("behavior_mix", self.behavior_mix), ("target_mix", self.target_mix)] {
            if !(0.0..=1.0).contains(&m) {
                return bad(format!("{what} must lie in [0, 1], got {m}"));
            }
        }
        if !(self.reward_noise >= 0.0) {
            return bad("reward_noise must be non-negative".into());
        }
        if let Some(g) = self.gamma {
            if !(0.0..1.0).contains(&g) {
                return bad(format!("gamma must lie in [0, 1), got {g}"));
            }
        }
        let mut names = std::collections::HashSet::new();
        for e in &self.estimators {
            if !names.insert(e.name.as_str()) {
                return bad(format!("duplicate estimator name {:?}", e.name));
            }
            e.train_config()
                .validate()
                .map_err(|err| DiceError::Config(format!("estimator {:?}: {err}", e.name)))?;
        }
        Ok(())
    }

    pub fn setup(&self) -> Result<Setup> {
        let mut mdp = self.environment.build()?;
        if let Some(g) = self.gamma {
            mdp = mdp.with_gamma(g)?;
        }
        if self.reward_noise > 0.0 {
            mdp = mdp.with_reward_noise(self.reward_noise)?;
        }
        let base = optimal_policy(&mdp);
        Ok(Setup {
            behavior: mixture_policy(&base, self.behavior_mix)?,
            target: mixture_policy(&base, self.target_mix)?,
            mdp,
        })
    }
}
