//! Independent oracles: dense matrix inversions built straight from the MDP
//! tables, without going through the library's sparse solvers.
#![allow(dead_code)]

use dualdice::dataset::{sample_dataset, TransitionDataset};
use dualdice::envs::{random_mdp, random_policy};
use dualdice::mdp::{StochasticPolicy, TabularMdp};
use dualdice::model::{CorrectionModel, FeatureTable};
use dualdice::penalty::PenaltyFunction;
use dualdice::train::{minibatch_loss, minibatch_loss_and_grad, Batch};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `P_π[(s,a), (s',a')] = T(s'|s,a)·π(a'|s')`.
pub fn pair_transition(mdp: &TabularMdp, pi: &StochasticPolicy) -> DMatrix<f64> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let n = ns * na;
    DMatrix::from_fn(n, n, |i, j| {
        let (s, a) = (i / na, i % na);
        let (s2, a2) = (j / na, j % na);
        mdp.transition_prob(s, a, s2) * pi.prob(s2, a2)
    })
}

/// `d^π = (1−γ)(I − γP_πᵀ)⁻¹(β⊗π)` by dense LU.
pub fn occupancy(mdp: &TabularMdp, pi: &StochasticPolicy) -> Vec<f64> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let n = ns * na;
    let g = mdp.gamma();
    let p = pair_transition(mdp, pi);
    let a = DMatrix::identity(n, n) - p.transpose() * g;
    let b = DVector::from_fn(n, |i, _| (1.0 - g) * mdp.initial_dist()[i / na] * pi.prob(i / na, i % na));
    a.lu().solve(&b).expect("nonsingular").iter().copied().collect()
}

/// `ρ(π) = Σ d^π(s,a)·R̄(s,a)`.
pub fn value(mdp: &TabularMdp, pi: &StochasticPolicy) -> f64 {
    occupancy(mdp, pi).iter().zip(mdp.reward_mean()).map(|(d, r)| d * r).sum()
}

/// `(1−γ)·E_β[Q^π(s0, a0)]` from `Q = (I − γP_π)⁻¹R`, a second route to `ρ(π)`.
pub fn value_via_q(mdp: &TabularMdp, pi: &StochasticPolicy) -> f64 {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let n = ns * na;
    let g = mdp.gamma();
    let a = DMatrix::identity(n, n) - pair_transition(mdp, pi) * g;
    let q = a.lu().solve(&DVector::from_column_slice(mdp.reward_mean())).unwrap();
    (0..n).map(|i| (1.0 - g) * mdp.initial_dist()[i / na] * pi.prob(i / na, i % na) * q[i]).sum()
}

/// Positive random distribution over `n` entries.
pub fn random_distribution(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.05).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

pub const FD_STEP: f64 = 1e-5;

/// Largest relative error (over ν and ζ) between analytic gradients and
/// central differences with step `1e-5`.
pub fn worst_relative_error(model: &CorrectionModel, batch: &Batch, penalty: &PenaltyFunction, gamma: f64) -> f64 {
    let analytic = minibatch_loss_and_grad(batch, model, penalty, gamma).unwrap();
    let loss = minibatch_loss(batch, model, penalty, gamma).unwrap();
    assert!((analytic.loss - loss).abs() <= 1e-12 * (1.0 + loss.abs()));
    let mut worst: f64 = 0.0;
    for which in 0..2 {
        let grad = if which == 0 { &analytic.grad_nu } else { &analytic.grad_zeta };
        let mut numeric = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let params = if which == 0 { m.nu.params_mut() } else { m.zeta.params_mut() };
                params[i] += delta;
                minibatch_loss(batch, &m, penalty, gamma).unwrap()
            };
            numeric[i] = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        }
        let diff: f64 = grad.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = grad.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
        worst = worst.max(diff / scale);
    }
    worst
}

pub fn randomize(model: &mut CorrectionModel, rng: &mut ChaCha8Rng, scale: f64) {
    for p in model.nu.params_mut().iter_mut().chain(model.zeta.params_mut().iter_mut()) {
        *p = rng.gen_range(-scale..scale);
    }
}

pub fn gradient_fixture(draw: u64) -> (TransitionDataset, StochasticPolicy) {
    let mdp = random_mdp(5, 2, 0.9, draw).unwrap();
    let mu = random_policy(5, 2, 0.3, draw + 1);
    let pi = random_policy(5, 2, 0.3, draw + 2);
    (sample_dataset(&mdp, &mu, 4, 20, draw).unwrap(), pi)
}

/// Worst gradient error over 10 random draws of parameters, batch and
/// penalty exponent.
pub fn worst_gradient_error(make: impl Fn(u64) -> CorrectionModel, scale: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for draw in 0..10u64 {
        let (ds, pi) = gradient_fixture(draw);
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        let mut model = make(draw);
        randomize(&mut model, &mut rng, scale);
        let p = [1.25, 1.5, 2.0, 3.0, 4.0][draw as usize % 5];
        let penalty = PenaltyFunction::new(p).unwrap();
        let batch = Batch::sample(&ds, &pi, 16, draw % 2 == 0, &mut rng);
        worst = worst.max(worst_relative_error(&model, &batch, &penalty, 0.9));
    }
    worst
}

pub fn linear_model(draw: u64) -> CorrectionModel {
    let mut rng = ChaCha8Rng::seed_from_u64(draw + 77);
    let values = (0..10 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    CorrectionModel::linear(FeatureTable::new(10, 4, values).unwrap())
}

pub fn mlp_model(draw: u64) -> CorrectionModel {
    CorrectionModel::mlp(FeatureTable::state_action_onehot(5, 2), vec![6, 4], draw)
}
