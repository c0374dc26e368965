//! Logged data: transition tuples for the correction estimators and whole
//! trajectories for importance sampling, plus their text formats.
//!
//! Transition file:
//!
//! ```text
//! dice-dataset v1 <num_states> <num_actions> <gamma>
//! # <metadata>            (optional)
//! T <s> <a> <r> <s'>      (one per transition)
//! I <s0>                  (one per sampled initial state)
//! ```
//!
//! Trajectory file:
//!
//! ```text
//! dice-traj v1 <horizon> <num_states> <num_actions>
//! <s0> <a0> <r0> <s1> <a1> <r1> ... <sH>     (one trajectory per line)
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{parse_err, DiceError, Result};
use crate::mdp::{StochasticPolicy, TabularMdp};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub transitions: Vec<Transition>,
    pub initial_states: Vec<usize>,
    /// Free-form description of how the data was produced. Not used by any estimator.
    pub metadata: String,
}

impl TransitionDataset {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        transitions: Vec<Transition>,
        initial_states: Vec<usize>,
    ) -> Result<Self> {
        let ds = Self {
            num_states,
            num_actions,
            gamma,
            transitions,
            initial_states,
            metadata: String::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.transitions.iter().enumerate() {
            if t.state >= self.num_states
                || t.next_state >= self.num_states
                || t.action >= self.num_actions
            {
                return Err(DiceError::InvalidArgument(format!(
                    "transition {i} has out-of-range indices"
                )));
            }
            if !t.reward.is_finite() {
                return Err(DiceError::InvalidArgument(format!(
                    "transition {i} has a non-finite reward"
                )));
            }
        }
        if let Some(&s) = self.initial_states.iter().find(|&&s| s >= self.num_states) {
            return Err(DiceError::InvalidArgument(format!(
                "initial state {s} out of range"
            )));
        }
        if !self.transitions.is_empty() && self.initial_states.is_empty() {
            return Err(DiceError::InvalidArgument(
                "initial states are required when transitions are present".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Mean logged reward.
    pub fn mean_reward(&self) -> f64 {
        if self.transitions.is_empty() {
            return 0.0;
        }
        self.transitions.iter().map(|t| t.reward).sum::<f64>() / self.transitions.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(32 * (self.transitions.len() + 2));
        writeln!(
            out,
            "dice-dataset v1 {} {} {}",
            self.num_states,
            self.num_actions,
            fmt_real(self.gamma)
        )
        .unwrap();
        if !self.metadata.is_empty() {
            writeln!(out, "# {}", self.metadata.replace('\n', " ")).unwrap();
        }
        for t in &self.transitions {
            writeln!(
                out,
                "T {} {} {} {}",
                t.state,
                t.action,
                fmt_real(t.reward),
                t.next_state
            )
            .unwrap();
        }
        for s in &self.initial_states {
            writeln!(out, "I {s}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "dice-dataset" || fields[1] != "v1" {
            return Err(parse_err(1, format!("bad header {header:?}")));
        }
        let num_states = parse_field(fields[2], 1)?;
        let num_actions = parse_field(fields[3], 1)?;
        let gamma: f64 = parse_field(fields[4], 1)?;
        let mut ds = Self {
            num_states,
            num_actions,
            gamma,
            transitions: Vec::new(),
            initial_states: Vec::new(),
            metadata: String::new(),
        };
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                ds.metadata = meta.trim().to_string();
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["T", s, a, r, n] => ds.transitions.push(Transition {
                    state: parse_field(s, lineno)?,
                    action: parse_field(a, lineno)?,
                    reward: parse_field(r, lineno)?,
                    next_state: parse_field(n, lineno)?,
                }),
                ["I", s] => ds.initial_states.push(parse_field(s, lineno)?),
                _ => return Err(parse_err(lineno, format!("unrecognized record {line:?}"))),
            }
        }
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse()
        .map_err(|_| parse_err(line, format!("cannot parse {s:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub final_state: usize,
}

impl Trajectory {
    pub fn initial_state(&self) -> usize {
        self.steps.first().map(|s| s.state).unwrap_or(self.final_state)
    }

    fn next_state_of(&self, t: usize) -> usize {
        self.steps.get(t + 1).map(|s| s.state).unwrap_or(self.final_state)
    }
}

/// Fixed-horizon trajectories collected by one behavior policy.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryDataset {
    pub fn validate(&self) -> Result<()> {
        for (i, traj) in self.trajectories.iter().enumerate() {
            if traj.steps.len() != self.horizon {
                return Err(DiceError::InvalidArgument(format!(
                    "trajectory {i} has length {}, expected {}",
                    traj.steps.len(),
                    self.horizon
                )));
            }
            let bad = traj
                .steps
                .iter()
                .any(|st| st.state >= self.num_states || st.action >= self.num_actions)
                || traj.final_state >= self.num_states;
            if bad {
                return Err(DiceError::InvalidArgument(format!(
                    "trajectory {i} has out-of-range indices"
                )));
            }
        }
        Ok(())
    }

    /// First `n` trajectories.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            trajectories: self.trajectories[..n.min(self.trajectories.len())].to_vec(),
            ..self.clone()
        }
    }

    /// Flattens into transition tuples with the trajectory start states as
    /// the initial-state sample.
    pub fn to_transitions(&self, gamma: f64) -> TransitionDataset {
        let mut transitions = Vec::with_capacity(self.trajectories.len() * self.horizon);
        let mut initial_states = Vec::with_capacity(self.trajectories.len());
        for traj in &self.trajectories {
            initial_states.push(traj.initial_state());
            for (t, st) in traj.steps.iter().enumerate() {
                transitions.push(Transition {
                    state: st.state,
                    action: st.action,
                    reward: st.reward,
                    next_state: traj.next_state_of(t),
                });
            }
        }
        TransitionDataset {
            num_states: self.num_states,
            num_actions: self.num_actions,
            gamma,
            transitions,
            initial_states,
            metadata: String::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "dice-traj v1 {} {} {}",
            self.horizon, self.num_states, self.num_actions
        )
        .unwrap();
        for traj in &self.trajectories {
            let mut fields = Vec::with_capacity(3 * traj.steps.len() + 1);
            for st in &traj.steps {
                fields.push(st.state.to_string());
                fields.push(st.action.to_string());
                fields.push(fmt_real(st.reward));
            }
            fields.push(traj.final_state.to_string());
            writeln!(out, "{}", fields.join(" ")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "dice-traj" || fields[1] != "v1" {
            return Err(parse_err(1, format!("bad header {header:?}")));
        }
        let horizon: usize = parse_field(fields[2], 1)?;
        let num_states = parse_field(fields[3], 1)?;
        let num_actions = parse_field(fields[4], 1)?;
        let mut trajectories = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.is_empty() {
                continue;
            }
            if parts.len() != 3 * horizon + 1 {
                return Err(parse_err(
                    lineno,
                    format!("expected {} fields, got {}", 3 * horizon + 1, parts.len()),
                ));
            }
            let steps = parts[..3 * horizon]
                .chunks(3)
                .map(|c| {
                    Ok(Step {
                        state: parse_field(c[0], lineno)?,
                        action: parse_field(c[1], lineno)?,
                        reward: parse_field(c[2], lineno)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            trajectories.push(Trajectory {
                steps,
                final_state: parse_field(parts[3 * horizon], lineno)?,
            });
        }
        let ds = Self {
            num_states,
            num_actions,
            horizon,
            trajectories,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Generator for trajectory `index` of a collection seeded with `seed`.
/// Each trajectory has its own stream, so a collection of `n` trajectories is
/// a prefix of any larger collection with the same seed.
pub fn trajectory_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Rolls out `num_trajectories` fixed-horizon trajectories of `policy`.
pub fn sample_trajectories(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    num_trajectories: usize,
    horizon: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    mdp.check_policy(policy)?;
    if num_trajectories == 0 || horizon == 0 {
        return Err(DiceError::InvalidArgument(
            "trajectory count and horizon must be at least 1".into(),
        ));
    }
    let trajectories = (0..num_trajectories)
        .map(|i| {
            let mut rng = trajectory_rng(seed, i);
            let mut s = mdp.sample_initial(&mut rng);
            let mut steps = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let a = policy.sample(s, &mut rng);
                let reward = mdp.sample_reward(s, a, &mut rng);
                steps.push(Step {
                    state: s,
                    action: a,
                    reward,
                });
                s = mdp.sample_next(s, a, &mut rng);
            }
            Trajectory {
                steps,
                final_state: s,
            }
        })
        .collect();
    Ok(TrajectoryDataset {
        num_states: mdp.num_states(),
        num_actions: mdp.num_actions(),
        horizon,
        trajectories,
    })
}

/// `num_trajectories × horizon` logged transitions of `policy`, plus the
/// trajectory start states. Pure function of its arguments.
pub fn sample_dataset(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    num_trajectories: usize,
    horizon: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    let trajs = sample_trajectories(mdp, policy, num_trajectories, horizon, seed)?;
    let mut ds = trajs.to_transitions(mdp.gamma());
    ds.metadata = format!(
        "rollouts trajectories={num_trajectories} horizon={horizon} seed={seed}"
    );
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::grid_env;
    use crate::mdp::mixture_policy;

    #[test]
    fn counts_and_determinism() {
        let mdp = grid_env(5).unwrap();
        let pi = StochasticPolicy::uniform(25, 4);
        let a = sample_dataset(&mdp, &pi, 50, 40, 3).unwrap();
        assert_eq!(a.len(), 2000);
        assert_eq!(a.initial_states.len(), 50);
        let b = sample_dataset(&mdp, &pi, 50, 40, 3).unwrap();
        assert_eq!(a, b);
        let c = sample_dataset(&mdp, &pi, 50, 40, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn smaller_collections_are_prefixes() {
        let mdp = grid_env(4).unwrap();
        let pi = mixture_policy(&StochasticPolicy::uniform(16, 4), 0.5).unwrap();
        let big = sample_trajectories(&mdp, &pi, 20, 7, 11).unwrap();
        let small = sample_trajectories(&mdp, &pi, 5, 7, 11).unwrap();
        assert_eq!(big.prefix(5), small);
    }

    #[test]
    fn consecutive_transitions_chain() {
        let mdp = grid_env(4).unwrap();
        let pi = StochasticPolicy::uniform(16, 4);
        let ds = sample_dataset(&mdp, &pi, 3, 10, 0).unwrap();
        for traj in ds.transitions.chunks(10) {
            for w in traj.windows(2) {
                assert_eq!(w[0].next_state, w[1].state);
            }
        }
    }

    #[test]
    fn rejects_zero_sizes() {
        let mdp = grid_env(3).unwrap();
        let pi = StochasticPolicy::uniform(9, 4);
        assert!(sample_dataset(&mdp, &pi, 0, 5, 0).is_err());
        assert!(sample_dataset(&mdp, &pi, 5, 0, 0).is_err());
    }

    #[test]
    fn text_format_is_exact() {
        let ds = TransitionDataset::new(
            3,
            2,
            0.99,
            vec![
                Transition { state: 0, action: 1, reward: 0.1 + 0.2, next_state: 2 },
                Transition { state: 2, action: 0, reward: -1.0 / 3.0, next_state: 1 },
            ],
            vec![0, 2],
        )
        .unwrap();
        let text = ds.to_text();
        assert!(text.starts_with("dice-dataset v1 3 2 "));
        assert_eq!(TransitionDataset::from_text(&text).unwrap(), ds);
    }

    #[test]
    fn rejects_malformed_text() {
        assert!(TransitionDataset::from_text("dice-dataset v2 1 1 0.9\n").is_err());
        assert!(TransitionDataset::from_text("dice-dataset v1 2 1 0.9\nT 0 0 1.0 5\nI 0\n").is_err());
        assert!(TransitionDataset::from_text("dice-dataset v1 2 1 0.9\nX 1\n").is_err());
        assert!(TransitionDataset::from_text("dice-dataset v1 2 1 0.9\nT 0 0 1.0 1\n").is_err());
    }

    #[test]
    fn trajectory_text_roundtrip() {
        let mdp = grid_env(3).unwrap().with_reward_noise(0.3).unwrap();
        let pi = StochasticPolicy::uniform(9, 4);
        let trajs = sample_trajectories(&mdp, &pi, 4, 6, 9).unwrap();
        let text = trajs.to_text();
        assert!(text.starts_with("dice-traj v1 6 "));
        assert_eq!(TrajectoryDataset::from_text(&text).unwrap(), trajs);
    }
}
