//! Comparison estimators: weighted step-wise importance sampling, stochastic
//! TD learning of state corrections, and tabular behavior cloning.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::dataset::{TrajectoryDataset, TransitionDataset};
use crate::error::{DiceError, Result};
use crate::mdp::StochasticPolicy;
use crate::model::{Architecture, Network};
use crate::tabular::{build_empirical_model, CorrectionTable};
use crate::train::{Stepper, TrainConfig};

fn ratio(target: &StochasticPolicy, behavior: &StochasticPolicy, s: usize, a: usize) -> Result<f64> {
    let (p, m) = (target.prob(s, a), behavior.prob(s, a));
    if m <= 0.0 {
        if p > 0.0 {
            return Err(DiceError::UnsupportedAction { state: s, action: a });
        }
        return Ok(0.0);
    }
    Ok(p / m)
}

fn check_dims(policy: &StochasticPolicy, num_states: usize, num_actions: usize) -> Result<()> {
    if policy.num_states() != num_states || policy.num_actions() != num_actions {
        return Err(DiceError::ShapeMismatch("policy dimensions differ from the data".into()));
    }
    Ok(())
}

/// Per-step self-normalized importance sampling:
/// `(Σ_t γ^t Σ_i w_it r_it / Σ_i w_it) / Σ_t γ^t` with cumulative ratios
/// `w_it = Π_{k≤t} π(a_k|s_k)/μ(a_k|s_k)`. Steps where every weight is zero
/// contribute nothing to the numerator.
pub fn weighted_stepwise_is(
    trajs: &TrajectoryDataset,
    target: &StochasticPolicy,
    behavior: &StochasticPolicy,
    gamma: f64,
) -> Result<f64> {
    if trajs.trajectories.is_empty() {
        return Err(DiceError::EmptyDataset);
    }
    trajs.validate()?;
    check_dims(target, trajs.num_states, trajs.num_actions)?;
    check_dims(behavior, trajs.num_states, trajs.num_actions)?;
    let h = trajs.horizon;
    let mut num = vec![0.0; h];
    let mut den = vec![0.0; h];
    for traj in &trajs.trajectories {
        let mut w = 1.0;
        for (t, st) in traj.steps.iter().enumerate() {
            w *= ratio(target, behavior, st.state, st.action)?;
            num[t] += w * st.reward;
            den[t] += w;
        }
    }
    let mut value = 0.0;
    let mut discount = 0.0;
    let mut g = 1.0;
    for t in 0..h {
        if den[t] > 0.0 {
            value += g * num[t] / den[t];
        }
        discount += g;
        g *= gamma;
    }
    Ok(value / discount)
}

/// Tabular maximum likelihood with add-one smoothing:
/// `μ̂(a|s) = (n(s,a) + 1) / (n(s) + |A|)`; unvisited states get uniform rows.
pub fn behavior_cloning(dataset: &TransitionDataset) -> StochasticPolicy {
    let (ns, na) = (dataset.num_states, dataset.num_actions);
    let mut counts = vec![1.0; ns * na];
    for t in &dataset.transitions {
        counts[t.state * na + t.action] += 1.0;
    }
    for row in counts.chunks_mut(na) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|c| *c /= total);
    }
    StochasticPolicy::new(ns, na, counts).expect("normalized rows")
}

/// Result of stochastic TD learning of state corrections.
#[derive(Debug, Clone)]
pub struct TdOutput {
    /// `w(s)·π(a|s)/μ(a|s)` over the observed pairs.
    pub corrections: CorrectionTable,
    /// Learned `w(s)` (after the nonnegativity projection).
    pub state_corrections: Vec<f64>,
    pub network: Network,
    /// Mean over updates of the within-batch variance of the inflow term
    /// `γ·w(s)·π(a|s)/μ(a|s)`.
    pub update_variance: f64,
}

/// Stochastic TD learning of state corrections `w(s)`, driving the empirical
/// flow residual
/// `(1−γ)β(s') + γ E[w(s)π(a|s)/μ(a|s) | s'] − w(s')` to zero.
///
/// Each sampled transition `(s, a, s')` moves mass `γρ(s,a)w(s)` into `s'`
/// and removes `w(s)` from `s`; each sampled start state adds `1−γ`. For a
/// table this is exactly the expected fixed point solved by
/// [`crate::tabular::solve_td_exact`]; for other architectures the per-state
/// residuals are back-propagated as a semi-gradient. Outputs are projected
/// onto `w ≥ 0` (parameters for tables, outputs otherwise).
///
/// Uses `batch_size`, `lr_nu` (as the step size), `num_steps`, `optimizer`
/// and `seed` from `config`.
pub fn td_corrections_stochastic(
    dataset: &TransitionDataset,
    target: &StochasticPolicy,
    behavior: &StochasticPolicy,
    arch: Architecture,
    config: &TrainConfig,
) -> Result<TdOutput> {
    config.validate()?;
    if dataset.is_empty() || dataset.initial_states.is_empty() {
        return Err(DiceError::EmptyDataset);
    }
    dataset.validate()?;
    let (ns, na) = (dataset.num_states, dataset.num_actions);
    check_dims(target, ns, na)?;
    check_dims(behavior, ns, na)?;
    if arch.num_pairs() != ns {
        return Err(DiceError::ShapeMismatch(
            "TD architecture must be indexed by states".into(),
        ));
    }
    let mut rho = vec![0.0; ns * na];
    for t in &dataset.transitions {
        rho[t.state * na + t.action] = ratio(target, behavior, t.state, t.action)?;
    }
    let tabular = matches!(arch, Architecture::Tabular { .. });
    let mut net = Network::new(arch, config.seed);
    if tabular {
        net.params_mut().iter_mut().for_each(|w| *w = 1.0);
    }
    let mut stepper = Stepper::new(config.optimizer, config.lr_nu, net.params().len());
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
    let b = config.batch_size;
    let inv_b = 1.0 / b as f64;
    let gamma = dataset.gamma;
    let mut slot = vec![usize::MAX; ns];
    let mut states: Vec<usize> = Vec::new();
    let mut variance_sum = 0.0;
    let mut sampled = Vec::with_capacity(b);
    for step in 0..config.num_steps {
        sampled.clear();
        for _ in 0..b {
            let t = &dataset.transitions[rng.gen_range(0..dataset.len())];
            sampled.push((t.state, t.next_state, rho[t.state * na + t.action]));
        }
        let starts: Vec<usize> = (0..b)
            .map(|_| dataset.initial_states[rng.gen_range(0..dataset.initial_states.len())])
            .collect();
        states.clear();
        for &s in sampled.iter().flat_map(|(s, s2, _)| [s, s2]).chain(&starts) {
            if slot[s] == usize::MAX {
                slot[s] = states.len();
                states.push(s);
            }
        }
        let fwd = net.forward(&states);
        let w: Vec<f64> = fwd.outputs().iter().map(|v| v.max(0.0)).collect();
        // residual[k]: expected-update contribution at state `states[k]`.
        let mut residual = vec![0.0; states.len()];
        let (mut mean, mut sq) = (0.0, 0.0);
        for &(s, s2, r) in &sampled {
            let ws = w[slot[s]];
            let inflow = gamma * r * ws;
            residual[slot[s]] -= ws * inv_b;
            residual[slot[s2]] += inflow * inv_b;
            mean += inflow;
            sq += inflow * inflow;
        }
        mean *= inv_b;
        variance_sum += (sq * inv_b - mean * mean).max(0.0);
        for &s0 in &starts {
            residual[slot[s0]] += (1.0 - gamma) * inv_b;
        }
        let mut direction = vec![0.0; net.params().len()];
        let neg: Vec<f64> = residual.iter().map(|r| -r).collect();
        net.backward(&fwd, &neg, &mut direction);
        stepper.apply(net.params_mut(), &direction, step);
        if tabular {
            net.params_mut().iter_mut().for_each(|w| *w = w.max(0.0));
        }
        if net.params().iter().any(|p| !p.is_finite()) {
            return Err(DiceError::NonFinite {
                step,
                nu_norm: net.param_norm(),
                zeta_norm: 0.0,
            });
        }
        for &s in &states {
            slot[s] = usize::MAX;
        }
    }
    let state_corrections: Vec<f64> = net
        .eval_many(&(0..ns).collect::<Vec<_>>())
        .into_iter()
        .map(|w| w.max(0.0))
        .collect();
    let empirical = build_empirical_model(dataset)?;
    let mut values = vec![None; ns * na];
    for p in empirical.observed_pairs() {
        values[p] = Some(state_corrections[p / na] * rho[p]);
    }
    Ok(TdOutput {
        corrections: CorrectionTable {
            num_states: ns,
            num_actions: na,
            values,
        },
        state_corrections,
        network: net,
        update_variance: variance_sum / config.num_steps.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Step, Trajectory, Transition};

    fn traj(steps: &[(usize, usize, f64)], last: usize) -> Trajectory {
        Trajectory {
            steps: steps
                .iter()
                .map(|&(state, action, reward)| Step { state, action, reward })
                .collect(),
            final_state: last,
        }
    }

    #[test]
    fn self_normalization_by_hand() {
        // ratios 2 (action 0) and 0 (action 1) at state 0.
        let mu = StochasticPolicy::new(1, 2, vec![0.5, 0.5]).unwrap();
        let pi = StochasticPolicy::new(1, 2, vec![1.0, 0.0]).unwrap();
        let data = TrajectoryDataset {
            num_states: 1,
            num_actions: 2,
            horizon: 1,
            trajectories: vec![traj(&[(0, 0, 1.0)], 0), traj(&[(0, 1, 5.0)], 0)],
        };
        for gamma in [0.0, 0.5, 0.99] {
            assert!((weighted_stepwise_is(&data, &pi, &mu, gamma).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn on_policy_is_discounted_average() {
        let mu = StochasticPolicy::uniform(2, 2);
        let data = TrajectoryDataset {
            num_states: 2,
            num_actions: 2,
            horizon: 2,
            trajectories: vec![
                traj(&[(0, 0, 1.0), (1, 1, 2.0)], 0),
                traj(&[(1, 0, 3.0), (0, 1, 0.0)], 1),
            ],
        };
        let est = weighted_stepwise_is(&data, &mu, &mu, 0.5).unwrap();
        let expected = (2.0 + 0.5 * 1.0) / 1.5;
        assert!((est - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_behavior_probability_is_located() {
        let mu = StochasticPolicy::new(2, 2, vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        let pi = StochasticPolicy::uniform(2, 2);
        let data = TrajectoryDataset {
            num_states: 2,
            num_actions: 2,
            horizon: 1,
            trajectories: vec![traj(&[(1, 1, 1.0)], 0)],
        };
        assert!(matches!(
            weighted_stepwise_is(&data, &pi, &mu, 0.9),
            Err(DiceError::UnsupportedAction { state: 1, action: 1 })
        ));
    }

    #[test]
    fn cloning_with_add_one_smoothing() {
        let t = Transition { state: 0, action: 2, reward: 0.0, next_state: 0 };
        let ds = TransitionDataset::new(2, 4, 0.9, vec![t; 10], vec![0]).unwrap();
        let mu = behavior_cloning(&ds);
        assert!((mu.prob(0, 2) - 11.0 / 14.0).abs() < 1e-15);
        assert!((mu.prob(0, 0) - 1.0 / 14.0).abs() < 1e-15);
        assert_eq!(mu.row(1), &[0.25; 4]);
    }
}
