//! Tabular MDPs, stochastic policies and exact occupancy/value oracles.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DiceError, Result};
use crate::linalg;

const ROW_TOL: f64 = 1e-10;

/// Finite MDP with discounted criterion.
///
/// Transitions are stored as sparse rows indexed by `s * num_actions + a`;
/// every accessor that takes a pair index uses the same flattening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    transitions: Vec<Vec<(usize, f64)>>,
    reward_mean: Vec<f64>,
    reward_noise: Vec<f64>,
    initial_dist: Vec<f64>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<Vec<(usize, f64)>>,
        reward_mean: Vec<f64>,
        reward_noise: Vec<f64>,
        initial_dist: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(DiceError::InvalidArgument(
                "state and action counts must be positive".into(),
            ));
        }
        let n = num_states * num_actions;
        if transitions.len() != n || reward_mean.len() != n || reward_noise.len() != n {
            return Err(DiceError::ShapeMismatch(format!(
                "expected {n} state-action rows"
            )));
        }
        if initial_dist.len() != num_states {
            return Err(DiceError::ShapeMismatch(format!(
                "initial distribution has {} entries, expected {num_states}",
                initial_dist.len()
            )));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(DiceError::InvalidArgument(format!(
                "gamma must lie in [0, 1), got {gamma}"
            )));
        }
        let mut transitions = transitions;
        for (idx, row) in transitions.iter_mut().enumerate() {
            row.retain(|&(_, p)| p != 0.0);
            let mut total = 0.0;
            for &(next, p) in row.iter() {
                if next >= num_states || !(p >= 0.0) {
                    return Err(DiceError::InvalidArgument(format!(
                        "bad transition entry ({next}, {p}) in row {idx}"
                    )));
                }
                total += p;
            }
            if (total - 1.0).abs() > ROW_TOL {
                return Err(DiceError::InvalidArgument(format!(
                    "transition row {idx} sums to {total}"
                )));
            }
        }
        check_distribution(&initial_dist, "initial distribution")?;
        if reward_noise.iter().any(|&s| !(s >= 0.0)) || reward_mean.iter().any(|r| !r.is_finite()) {
            return Err(DiceError::InvalidArgument("bad reward table".into()));
        }
        Ok(Self {
            num_states,
            num_actions,
            transitions,
            reward_mean,
            reward_noise,
            initial_dist,
            gamma,
        })
    }

    /// Builds from a dense `T[s][a][s']` tensor flattened row-major.
    pub fn from_dense(
        num_states: usize,
        num_actions: usize,
        transition: &[f64],
        reward_mean: Vec<f64>,
        initial_dist: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if transition.len() != num_states * num_actions * num_states {
            return Err(DiceError::ShapeMismatch("dense transition tensor".into()));
        }
        let rows = transition
            .chunks(num_states)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &p)| p != 0.0)
                    .map(|(s, &p)| (s, p))
                    .collect()
            })
            .collect();
        let noise = vec![0.0; num_states * num_actions];
        Self::new(
            num_states,
            num_actions,
            rows,
            reward_mean,
            noise,
            initial_dist,
            gamma,
        )
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    /// Sparse next-state distribution of `(s, a)`.
    pub fn next_states(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.transitions[self.pair(s, a)]
    }

    pub fn transition_prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.next_states(s, a)
            .iter()
            .filter(|&&(n, _)| n == next)
            .map(|&(_, p)| p)
            .sum()
    }

    pub fn reward_mean(&self) -> &[f64] {
        &self.reward_mean
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward_mean[self.pair(s, a)]
    }

    pub fn reward_noise(&self) -> &[f64] {
        &self.reward_noise
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// Copy with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(DiceError::InvalidArgument(format!(
                "gamma must lie in [0, 1), got {gamma}"
            )));
        }
        let mut out = self.clone();
        out.gamma = gamma;
        Ok(out)
    }

    /// Copy with uniform reward noise of half-width `sigma` on every pair.
    pub fn with_reward_noise(&self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(DiceError::InvalidArgument("reward noise must be >= 0".into()));
        }
        let mut out = self.clone();
        out.reward_noise = vec![sigma; self.num_pairs()];
        Ok(out)
    }

    /// Reward draw `R̄(s,a) + U[-σ, σ]`.
    pub fn sample_reward<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> f64 {
        let idx = self.pair(s, a);
        let sigma = self.reward_noise[idx];
        if sigma > 0.0 {
            self.reward_mean[idx] + rng.gen_range(-sigma..=sigma)
        } else {
            self.reward_mean[idx]
        }
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let row = self.next_states(s, a);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(next, p) in row {
            acc += p;
            if u < acc {
                return next;
            }
        }
        row.last().map(|&(n, _)| n).unwrap_or(s)
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.initial_dist, rng)
    }

    pub fn check_policy(&self, policy: &StochasticPolicy) -> Result<()> {
        if policy.num_states() != self.num_states || policy.num_actions() != self.num_actions {
            return Err(DiceError::ShapeMismatch(format!(
                "policy is {}x{}, mdp is {}x{}",
                policy.num_states(),
                policy.num_actions(),
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }

    /// State-to-state kernel `P_π(s, s') = Σ_a π(a|s) T(s'|s,a)`, row-major dense.
    pub fn state_kernel(&self, policy: &StochasticPolicy) -> Vec<f64> {
        let ns = self.num_states;
        let mut p = vec![0.0; ns * ns];
        for s in 0..ns {
            for a in 0..self.num_actions {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                for &(next, t) in self.next_states(s, a) {
                    p[s * ns + next] += pa * t;
                }
            }
        }
        p
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0)) {
        return Err(DiceError::InvalidArgument(format!("{what} has negative entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(DiceError::InvalidArgument(format!("{what} sums to {total}")));
    }
    Ok(())
}

pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Per-state action distribution `π(a|s)`, rows flattened state-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticPolicy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl StochasticPolicy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(DiceError::InvalidArgument("empty policy".into()));
        }
        if probs.len() != num_states * num_actions {
            return Err(DiceError::ShapeMismatch(format!(
                "policy table has {} entries, expected {}",
                probs.len(),
                num_states * num_actions
            )));
        }
        for (s, row) in probs.chunks(num_actions).enumerate() {
            check_distribution(row, &format!("policy row {s}"))?;
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(DiceError::InvalidArgument(format!(
                    "action {a} out of range at state {s}"
                )));
            }
            probs[s * num_actions + a] = 1.0;
        }
        Self::new(actions.len(), num_actions, probs)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_index(self.row(s), rng)
    }
}

/// `(1 − w)·base + w·uniform`.
pub fn mixture_policy(base: &StochasticPolicy, uniform_weight: f64) -> Result<StochasticPolicy> {
    if !(0.0..=1.0).contains(&uniform_weight) {
        return Err(DiceError::InvalidArgument(format!(
            "uniform weight must lie in [0, 1], got {uniform_weight}"
        )));
    }
    let share = uniform_weight / base.num_actions as f64;
    let probs = base
        .probs
        .iter()
        .map(|&p| (1.0 - uniform_weight) * p + share)
        .collect();
    Ok(StochasticPolicy {
        num_states: base.num_states,
        num_actions: base.num_actions,
        probs,
    })
}

/// Normalized distribution over state-action pairs, flattened state-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateActionDistribution {
    pub num_states: usize,
    pub num_actions: usize,
    pub probs: Vec<f64>,
}

impl StateActionDistribution {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    /// State marginal.
    pub fn state_marginal(&self) -> Vec<f64> {
        self.probs
            .chunks(self.num_actions)
            .map(|row| row.iter().sum())
            .collect()
    }
}

/// Discounted state occupancy `d(s) = (1−γ)β(s) + γ Σ d(s₀) P_π(s₀, s)`.
pub fn state_occupancy(mdp: &TabularMdp, policy: &StochasticPolicy) -> Result<Vec<f64>> {
    mdp.check_policy(policy)?;
    let ns = mdp.num_states();
    let g = mdp.gamma();
    let kernel = mdp.state_kernel(policy);
    // (I − γ P_πᵀ) d = (1−γ) β
    let mut a = vec![0.0; ns * ns];
    for i in 0..ns {
        for j in 0..ns {
            a[i * ns + j] = -g * kernel[j * ns + i];
        }
        a[i * ns + i] += 1.0;
    }
    let rhs: Vec<f64> = mdp.initial_dist().iter().map(|b| (1.0 - g) * b).collect();
    let (d, _) = linalg::solve_dense(ns, &a, &rhs)?;
    Ok(d)
}

/// Normalized discounted stationary distribution `d^π(s,a) = d^π(s) π(a|s)`.
///
/// The state-action flow equation factors through the state marginal, so the
/// solve is done over states and lifted.
pub fn stationary_distribution(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
) -> Result<StateActionDistribution> {
    let ds = state_occupancy(mdp, policy)?;
    let na = mdp.num_actions();
    let mut probs = vec![0.0; mdp.num_pairs()];
    for (s, &d) in ds.iter().enumerate() {
        for a in 0..na {
            probs[s * na + a] = (d * policy.prob(s, a)).max(0.0);
        }
    }
    Ok(StateActionDistribution {
        num_states: mdp.num_states(),
        num_actions: na,
        probs,
    })
}

/// `‖d − (1−γ)β_π − γ (P^π)ᵀ d‖∞` over state-action pairs.
pub fn flow_residual(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    dist: &StateActionDistribution,
) -> f64 {
    let na = mdp.num_actions();
    let g = mdp.gamma();
    let mut inflow = vec![0.0; mdp.num_states()];
    for s in 0..mdp.num_states() {
        for a in 0..na {
            let d = dist.get(s, a);
            for &(next, t) in mdp.next_states(s, a) {
                inflow[next] += d * t;
            }
        }
    }
    let mut worst = 0.0_f64;
    for s in 0..mdp.num_states() {
        for a in 0..na {
            let rhs = policy.prob(s, a) * ((1.0 - g) * mdp.initial_dist()[s] + g * inflow[s]);
            worst = worst.max((dist.get(s, a) - rhs).abs());
        }
    }
    worst
}

/// `ρ(π) = Σ d^π(s,a) R̄(s,a)`.
pub fn policy_value_exact(mdp: &TabularMdp, policy: &StochasticPolicy) -> Result<f64> {
    let d = stationary_distribution(mdp, policy)?;
    Ok(d.probs
        .iter()
        .zip(mdp.reward_mean())
        .map(|(d, r)| d * r)
        .sum())
}

/// `(1−γ) βᵀ (I − γ P_π)⁻¹ r_π`, the Bellman-side computation of the same value.
pub fn policy_value_bellman(mdp: &TabularMdp, policy: &StochasticPolicy) -> Result<f64> {
    let v = state_values(mdp, policy)?;
    let g = mdp.gamma();
    Ok((1.0 - g) * v.iter().zip(mdp.initial_dist()).map(|(v, b)| v * b).sum::<f64>())
}

/// Unnormalized discounted state values of `policy`.
pub fn state_values(mdp: &TabularMdp, policy: &StochasticPolicy) -> Result<Vec<f64>> {
    mdp.check_policy(policy)?;
    let ns = mdp.num_states();
    let g = mdp.gamma();
    let kernel = mdp.state_kernel(policy);
    let mut a: Vec<f64> = kernel.iter().map(|p| -g * p).collect();
    for i in 0..ns {
        a[i * ns + i] += 1.0;
    }
    let r: Vec<f64> = (0..ns)
        .map(|s| {
            (0..mdp.num_actions())
                .map(|act| policy.prob(s, act) * mdp.reward(s, act))
                .sum()
        })
        .collect();
    let (v, _) = linalg::solve_dense(ns, &a, &r)?;
    Ok(v)
}

/// Optimal action values by value iteration, stopped once the sup-norm
/// update falls below `tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Vec<f64> {
    let na = mdp.num_actions();
    let g = mdp.gamma();
    let mut v = vec![0.0; mdp.num_states()];
    let mut q = vec![0.0; mdp.num_pairs()];
    loop {
        for s in 0..mdp.num_states() {
            for a in 0..na {
                let backup: f64 = mdp.next_states(s, a).iter().map(|&(n, p)| p * v[n]).sum();
                q[s * na + a] = mdp.reward(s, a) + g * backup;
            }
        }
        let mut delta = 0.0_f64;
        for (s, vs) in v.iter_mut().enumerate() {
            let best = q[s * na..(s + 1) * na]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - *vs).abs());
            *vs = best;
        }
        if delta < tol {
            return q;
        }
    }
}

/// Deterministic greedy policy from value iteration (residual < 1e-10).
/// Ties within 1e-9 go to the lowest action index.
pub fn optimal_policy(mdp: &TabularMdp) -> StochasticPolicy {
    let q = value_iteration(mdp, 1e-10);
    let na = mdp.num_actions();
    let actions: Vec<usize> = q
        .chunks(na)
        .map(|row| {
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let tie = 1e-9 * best.abs().max(1.0);
            row.iter().position(|&x| x >= best - tie).unwrap_or(0)
        })
        .collect();
    StochasticPolicy::deterministic(na, &actions).expect("greedy actions are in range")
}
