//! Closed-form tabular solvers: empirical models, exact DualDICE (over
//! state-action pairs and over states) and the exact TD/flow baseline.
//!
//! All solvers reduce to a least-squares problem on the flow equation. With
//! `M = I − γP̂^π` restricted to the observed rows and `D = diag(d̂)`, the
//! minimum-norm solution of the normal equations `MᵀDMν = (1−γ)β_π` has
//! Bellman residuals `w = Mν` with `u = D w` solving `min ‖Mᵀu − (1−γ)β_π‖`.
//! That system is `|observed| × |observed|` and well conditioned, so it is
//! what gets factorized; `ν` is then recovered as the minimum-norm solution
//! of `Mν = w`.

use serde::{Deserialize, Serialize};

use crate::dataset::TransitionDataset;
use crate::error::{DiceError, Result};
use crate::linalg::{self, RowLeastSquares, SparseRow};
use crate::mdp::{StochasticPolicy, TabularMdp};

/// Empirical data distribution and conditional model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalModel {
    pub num_states: usize,
    pub num_actions: usize,
    /// `d̂^D(s,a)`, sums to one.
    pub weight: Vec<f64>,
    /// `P̂(s'|s,a)` as sparse rows; empty for unobserved pairs.
    pub cond_next: Vec<Vec<(usize, f64)>>,
    /// `r̂(s,a)`; zero for unobserved pairs.
    pub avg_reward: Vec<f64>,
    /// `β̂(s)` from the sampled initial states.
    pub init_weight: Vec<f64>,
    pub support_mask: Vec<bool>,
}

impl EmpiricalModel {
    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn observed_pairs(&self) -> impl Iterator<Item = usize> + '_ {
        self.support_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
    }

    pub fn state_weight(&self) -> Vec<f64> {
        self.weight
            .chunks(self.num_actions)
            .map(|row| row.iter().sum())
            .collect()
    }

    /// Model with exact conditionals: `d̂ = data_dist`, `P̂ = T`, `r̂ = R̄`,
    /// `β̂ = β`. Used as the infinite-data limit in tests and oracles.
    pub fn population(mdp: &TabularMdp, data_dist: &[f64]) -> Result<Self> {
        let n = mdp.num_pairs();
        if data_dist.len() != n {
            return Err(DiceError::ShapeMismatch(format!(
                "data distribution has {} entries, expected {n}",
                data_dist.len()
            )));
        }
        let total: f64 = data_dist.iter().sum();
        if !(total > 0.0) || data_dist.iter().any(|&p| !(p >= 0.0)) {
            return Err(DiceError::InvalidArgument("bad data distribution".into()));
        }
        let weight: Vec<f64> = data_dist.iter().map(|p| p / total).collect();
        let support_mask: Vec<bool> = weight.iter().map(|&w| w > 0.0).collect();
        let cond_next = (0..n)
            .map(|i| {
                if support_mask[i] {
                    let (s, a) = (i / mdp.num_actions(), i % mdp.num_actions());
                    mdp.next_states(s, a).to_vec()
                } else {
                    Vec::new()
                }
            })
            .collect();
        let avg_reward = (0..n)
            .map(|i| if support_mask[i] { mdp.reward_mean()[i] } else { 0.0 })
            .collect();
        Ok(Self {
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
            weight,
            cond_next,
            avg_reward,
            init_weight: mdp.initial_dist().to_vec(),
            support_mask,
        })
    }
}

/// Counts transitions into an [`EmpiricalModel`].
pub fn build_empirical_model(dataset: &TransitionDataset) -> Result<EmpiricalModel> {
    if dataset.is_empty() {
        return Err(DiceError::EmptyDataset);
    }
    dataset.validate()?;
    let na = dataset.num_actions;
    let n = dataset.num_states * na;
    let mut counts = vec![0usize; n];
    let mut reward_sum = vec![0.0; n];
    let mut next_counts: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for t in &dataset.transitions {
        let i = t.state * na + t.action;
        counts[i] += 1;
        reward_sum[i] += t.reward;
        match next_counts[i].iter_mut().find(|(s, _)| *s == t.next_state) {
            Some(entry) => entry.1 += 1,
            None => next_counts[i].push((t.next_state, 1)),
        }
    }
    let total = dataset.len() as f64;
    let weight = counts.iter().map(|&c| c as f64 / total).collect();
    let avg_reward = counts
        .iter()
        .zip(&reward_sum)
        .map(|(&c, &r)| if c > 0 { r / c as f64 } else { 0.0 })
        .collect();
    let cond_next = next_counts
        .into_iter()
        .zip(&counts)
        .map(|(mut row, &c)| {
            row.sort_unstable_by_key(|&(s, _)| s);
            row.into_iter()
                .map(|(s, k)| (s, k as f64 / c as f64))
                .collect()
        })
        .collect();
    let mut init_weight = vec![0.0; dataset.num_states];
    for &s in &dataset.initial_states {
        init_weight[s] += 1.0;
    }
    let n0 = dataset.initial_states.len().max(1) as f64;
    init_weight.iter_mut().for_each(|w| *w /= n0);
    Ok(EmpiricalModel {
        num_states: dataset.num_states,
        num_actions: na,
        weight,
        cond_next,
        avg_reward,
        init_weight,
        support_mask: counts.iter().map(|&c| c > 0).collect(),
    })
}

/// Correction values per state-action pair; `None` where the data never
/// visited the pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionTable {
    pub num_states: usize,
    pub num_actions: usize,
    pub values: Vec<Option<f64>>,
}

impl CorrectionTable {
    pub fn get(&self, s: usize, a: usize) -> Option<f64> {
        self.values[s * self.num_actions + a]
    }

    /// `Σ d̂(s,a) ŵ(s,a)` over observed pairs.
    pub fn weighted_mean(&self, model: &EmpiricalModel) -> f64 {
        model
            .observed_pairs()
            .map(|i| model.weight[i] * self.values[i].unwrap_or(0.0))
            .sum()
    }

    /// Largest deviation from `reference` over defined entries.
    pub fn max_abs_diff(&self, reference: &[f64]) -> f64 {
        self.values
            .iter()
            .zip(reference)
            .filter_map(|(v, r)| v.map(|v| (v - r).abs()))
            .fold(0.0, f64::max)
    }
}

/// Diagnostics from an exact solve.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    /// The full normal matrix is singular (some pairs or states unobserved),
    /// so the minimum-norm least-squares solution was returned.
    pub rank_deficient: bool,
    pub unobserved: usize,
    pub ridge_applied: bool,
}

#[derive(Debug, Clone)]
pub struct DualDiceSolution {
    /// `ν` over all state-action pairs.
    pub nu: Vec<f64>,
    pub corrections: CorrectionTable,
    pub diagnostics: SolveDiagnostics,
}

fn check_policy_dims(model: &EmpiricalModel, policy: &StochasticPolicy) -> Result<()> {
    if policy.num_states() != model.num_states || policy.num_actions() != model.num_actions {
        return Err(DiceError::ShapeMismatch(
            "policy and model dimensions differ".into(),
        ));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(DiceError::InvalidArgument(format!(
            "gamma must lie in [0, 1), got {gamma}"
        )));
    }
    Ok(())
}

fn merge_row(mut row: SparseRow) -> SparseRow {
    row.sort_unstable_by_key(|&(c, _)| c);
    let mut out: SparseRow = Vec::with_capacity(row.len());
    for (c, v) in row {
        match out.last_mut() {
            Some(last) if last.0 == c => last.1 += v,
            _ => out.push((c, v)),
        }
    }
    out.retain(|&(_, v)| v != 0.0);
    out
}

/// Rows `e_i − γ Σ P̂(s'|i) π(a'|s') e_(s',a')` of `I − γP̂^π` for observed pairs.
fn bellman_rows(model: &EmpiricalModel, target: &StochasticPolicy, gamma: f64) -> (Vec<usize>, Vec<SparseRow>) {
    let na = model.num_actions;
    let observed: Vec<usize> = model.observed_pairs().collect();
    let rows = observed
        .iter()
        .map(|&i| {
            let mut row = vec![(i, 1.0)];
            for &(next, p) in &model.cond_next[i] {
                for a2 in 0..na {
                    let pa = target.prob(next, a2);
                    if pa > 0.0 {
                        row.push((next * na + a2, -gamma * p * pa));
                    }
                }
            }
            merge_row(row)
        })
        .collect();
    (observed, rows)
}

/// `(1−γ) β̂(s) π(a|s)` over all pairs.
fn initial_pair_weights(model: &EmpiricalModel, target: &StochasticPolicy, gamma: f64) -> Vec<f64> {
    let na = model.num_actions;
    let mut b = vec![0.0; model.num_pairs()];
    for (s, &beta) in model.init_weight.iter().enumerate() {
        if beta > 0.0 {
            for a in 0..na {
                b[s * na + a] = (1.0 - gamma) * beta * target.prob(s, a);
            }
        }
    }
    b
}

/// Exact minimizer of the DualDICE objective
/// `J(ν) = ½ Σ d̂(s,a)·((I − γP̂^π)ν)(s,a)² − (1−γ) Σ β̂(s)π(a|s)ν(s,a)`
/// with corrections equal to the Bellman residuals `(I − γP̂^π)ν`.
///
/// Takes no behavior policy. Unobserved pairs get no correction.
pub fn solve_dualdice_exact(
    model: &EmpiricalModel,
    target: &StochasticPolicy,
    gamma: f64,
) -> Result<DualDiceSolution> {
    check_policy_dims(model, target)?;
    check_gamma(gamma)?;
    let n = model.num_pairs();
    let (observed, rows) = bellman_rows(model, target, gamma);
    if observed.is_empty() {
        return Err(DiceError::EmptyDataset);
    }
    let b = initial_pair_weights(model, target, gamma);
    let ls = RowLeastSquares::new(&rows, n)?;
    let flow = ls.solve_transposed(&rows, &b)?;
    let w_obs: Vec<f64> = observed
        .iter()
        .zip(&flow)
        .map(|(&i, &u)| u / model.weight[i])
        .collect();
    let nu = ls.min_norm(&rows, &w_obs, n)?;
    let mut values = vec![None; n];
    for (&i, &w) in observed.iter().zip(&w_obs) {
        values[i] = Some(w);
    }
    Ok(DualDiceSolution {
        nu,
        corrections: CorrectionTable {
            num_states: model.num_states,
            num_actions: model.num_actions,
            values,
        },
        diagnostics: SolveDiagnostics {
            rank_deficient: observed.len() < n,
            unobserved: n - observed.len(),
            ridge_applied: ls.factor.ridge_applied,
        },
    })
}

/// Value of the empirical DualDICE objective `J(ν)` over observed pairs.
pub fn dualdice_objective(
    model: &EmpiricalModel,
    target: &StochasticPolicy,
    gamma: f64,
    nu: &[f64],
) -> f64 {
    let (observed, rows) = bellman_rows(model, target, gamma);
    let residual = linalg::mul_rows(&rows, nu);
    let quad: f64 = observed
        .iter()
        .zip(&residual)
        .map(|(&i, r)| 0.5 * model.weight[i] * r * r)
        .sum();
    let b = initial_pair_weights(model, target, gamma);
    quad - b.iter().zip(nu).map(|(b, v)| b * v).sum::<f64>()
}

/// Per-pair importance ratio `π(a|s)/μ(a|s)`, failing where μ is zero and π
/// is not. Checked on the states in `states`.
fn importance_ratios(
    target: &StochasticPolicy,
    behavior: &StochasticPolicy,
    states: impl Iterator<Item = usize>,
) -> Result<Vec<f64>> {
    let na = target.num_actions();
    let mut ratio = vec![0.0; target.num_states() * na];
    for s in states {
        for a in 0..na {
            let (p, m) = (target.prob(s, a), behavior.prob(s, a));
            if p > 0.0 && m <= 0.0 {
                return Err(DiceError::UnsupportedAction { state: s, action: a });
            }
            if m > 0.0 {
                ratio[s * na + a] = p / m;
            }
        }
    }
    Ok(ratio)
}

/// Importance-weighted empirical state kernel
/// `Ĝ(s, s') = Σ_a (d̂(s,a)/d̂(s)) (π(a|s)/μ(a|s)) P̂(s'|s,a)`, as sparse rows
/// for observed states, together with the list of those states.
struct StateKernel {
    states: Vec<usize>,
    rows: Vec<SparseRow>,
    ratio: Vec<f64>,
    state_weight: Vec<f64>,
}

fn state_kernel(
    model: &EmpiricalModel,
    target: &StochasticPolicy,
    behavior: &StochasticPolicy,
) -> Result<StateKernel> {
    check_policy_dims(model, target)?;
    check_policy_dims(model, behavior)?;
    let na = model.num_actions;
    let state_weight = model.state_weight();
    let states: Vec<usize> = (0..model.num_states)
        .filter(|&s| state_weight[s] > 0.0)
        .collect();
    let ratio = importance_ratios(target, behavior, states.iter().copied())?;
    let rows = states
        .iter()
        .map(|&s| {
            let mut row = Vec::new();
            for a in 0..na {
                let i = s * na + a;
                if !model.support_mask[i] || ratio[i] == 0.0 {
                    continue;
                }
                let c = model.weight[i] / state_weight[s] * ratio[i];
                for &(next, p) in &model.cond_next[i] {
                    row.push((next, c * p));
                }
            }
            merge_row(row)
        })
        .collect();
    Ok(StateKernel {
        states,
        rows,
        ratio,
        state_weight,
    })
}

fn lift_state_corrections(
    model: &EmpiricalModel,
    kernel: &StateKernel,
    state_corr: &[(usize, f64)],
) -> CorrectionTable {
    let na = model.num_actions;
    let mut values = vec![None; model.num_pairs()];
    for &(s, w) in state_corr {
        for a in 0..na {
            let i = s * na + a;
            if model.support_mask[i] {
                values[i] = Some(w * kernel.ratio[i]);
            }
        }
    }
    CorrectionTable {
        num_states: model.num_states,
        num_actions: na,
        values,
    }
}

/// DualDICE solved over `|S|` variables `ν(s)`, with the per-step ratio
/// `π(a|s)/μ(a|s)` inside the backup; `w(s,a) = w(s)·π(a|s)/μ(a|s)`.
pub fn solve_dualdice_exact_statewise(
    model: &EmpiricalModel,
    target: &StochasticPolicy,
    behavior: &StochasticPolicy,
    gamma: f64,
) -> Result<(CorrectionTable, SolveDiagnostics)> {
    check_gamma(gamma)?;
    let kernel = state_kernel(model, target, behavior)?;
    if kernel.states.is_empty() {
        return Err(DiceError::EmptyDataset);
    }
    let ns = model.num_states;
    let rows: Vec<SparseRow> = kernel
        .states
        .iter()
        .zip(&kernel.rows)
        .map(|(&s, g)| {
            let mut row: SparseRow = g.iter().map(|&(c, v)| (c, -gamma * v)).collect();
            row.push((s, 1.0));
            merge_row(row)
        })
        .collect();
    let b: Vec<f64> = model.init_weight.iter().map(|w| (1.0 - gamma) * w).collect();
    let ls = RowLeastSquares::new(&rows, ns)?;
    let flow = ls.solve_transposed(&rows, &b)?;
    let state_corr: Vec<(usize, f64)> = kernel
        .states
        .iter()
        .zip(&flow)
        .map(|(&s, &u)| (s, u / kernel.state_weight[s]))
        .collect();
    Ok((
        lift_state_corrections(model, &kernel, &state_corr),
        SolveDiagnostics {
            rank_deficient: kernel.states.len() < ns,
            unobserved: ns - kernel.states.len(),
            ridge_applied: ls.factor.ridge_applied,
        },
    ))
}

/// Exact TD baseline: solves the flow fixed point
/// `d̂(s)w(s) = (1−γ)β̂(s) + γ Σ_{s₀} Ĝ(s₀, s) d̂(s₀)w(s₀)` on the observed
/// states and lifts by `π/μ`.
pub fn solve_td_exact(
    model: &EmpiricalModel,
    target: &StochasticPolicy,
    behavior: &StochasticPolicy,
    gamma: f64,
) -> Result<(CorrectionTable, SolveDiagnostics)> {
    check_gamma(gamma)?;
    let kernel = state_kernel(model, target, behavior)?;
    let k = kernel.states.len();
    if k == 0 {
        return Err(DiceError::EmptyDataset);
    }
    let mut index = vec![usize::MAX; model.num_states];
    for (j, &s) in kernel.states.iter().enumerate() {
        index[s] = j;
    }
    // A[j][i] = δ_ij − γ Ĝ(s_i, s_j)
    let mut a = vec![0.0; k * k];
    for (i, row) in kernel.rows.iter().enumerate() {
        for &(next, g) in row {
            let j = index[next];
            if j != usize::MAX {
                a[j * k + i] -= gamma * g;
            }
        }
    }
    for j in 0..k {
        a[j * k + j] += 1.0;
    }
    let b: Vec<f64> = kernel
        .states
        .iter()
        .map(|&s| (1.0 - gamma) * model.init_weight[s])
        .collect();
    let (flow, ridge_applied) = linalg::solve_dense(k, &a, &b)?;
    let state_corr: Vec<(usize, f64)> = kernel
        .states
        .iter()
        .zip(&flow)
        .map(|(&s, &u)| (s, u / kernel.state_weight[s]))
        .collect();
    Ok((
        lift_state_corrections(model, &kernel, &state_corr),
        SolveDiagnostics {
            rank_deficient: ridge_applied,
            unobserved: model.num_states - k,
            ridge_applied,
        },
    ))
}

/// `Σ d̂(s,a)·ŵ(s,a)·r̂(s,a)` over observed pairs. With `clip_negative`,
/// negative corrections are replaced by zero first.
pub fn ope_from_corrections(
    corrections: &CorrectionTable,
    model: &EmpiricalModel,
    clip_negative: bool,
) -> Result<f64> {
    if corrections.num_states != model.num_states || corrections.num_actions != model.num_actions {
        return Err(DiceError::ShapeMismatch(
            "correction table and model dimensions differ".into(),
        ));
    }
    Ok(model
        .observed_pairs()
        .map(|i| {
            let mut w = corrections.values[i].unwrap_or(0.0);
            if clip_negative {
                w = w.max(0.0);
            }
            model.weight[i] * w * model.avg_reward[i]
        })
        .sum())
}
