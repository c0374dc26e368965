//! Stochastic minimax optimization of the DualDICE objective
//!
//! `J(ν, ζ) = E_D[(ν(s,a) − γν(s',a'))ζ(s,a) − f*(ζ(s,a))] − (1−γ)E_β[ν(s₀,a₀)]`
//!
//! with `a' ~ π(s')`, `a₀ ~ π(s₀)`: gradient descent on `ν`, ascent on `ζ`.
//! Nothing here reads behavior-policy probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::dataset::TransitionDataset;
use crate::error::{DiceError, Result};
use crate::mdp::StochasticPolicy;
use crate::model::{Architecture, CorrectionModel};
use crate::penalty::PenaltyFunction;
use crate::tabular::{build_empirical_model, EmpiricalModel};

/// A minibatch of transitions with target actions attached.
///
/// `next` lists `(transition index, next pair, weight)`; with sampled actions
/// each transition has one entry of weight 1, with exact expectations one
/// entry per action weighted by `π(a'|s')`. `initial` holds `(pair, weight)`
/// entries whose weights sum to `num_initial`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub pairs: Vec<usize>,
    pub next: Vec<(usize, usize, f64)>,
    pub initial: Vec<(usize, f64)>,
    pub num_initial: usize,
}

impl Batch {
    /// Draws `batch_size` transitions and as many initial states, with
    /// replacement, and attaches target actions.
    pub fn sample<R: Rng + ?Sized>(
        dataset: &TransitionDataset,
        target: &StochasticPolicy,
        batch_size: usize,
        exact_expectation: bool,
        rng: &mut R,
    ) -> Self {
        let mut batch = Self::default();
        batch.resample(dataset, target, batch_size, exact_expectation, rng);
        batch
    }

    /// Same as [`Batch::sample`], reusing this batch's buffers.
    pub fn resample<R: Rng + ?Sized>(
        &mut self,
        dataset: &TransitionDataset,
        target: &StochasticPolicy,
        batch_size: usize,
        exact_expectation: bool,
        rng: &mut R,
    ) {
        let na = dataset.num_actions;
        self.pairs.clear();
        self.next.clear();
        self.initial.clear();
        let n = dataset.transitions.len();
        for i in 0..batch_size {
            let t = &dataset.transitions[rng.gen_range(0..n)];
            self.pairs.push(t.state * na + t.action);
            push_target_actions(target, t.next_state, exact_expectation, rng, |pair, w| {
                self.next.push((i, pair, w))
            });
        }
        let n0 = dataset.initial_states.len();
        for _ in 0..batch_size {
            let s0 = dataset.initial_states[rng.gen_range(0..n0)];
            push_target_actions(target, s0, exact_expectation, rng, |pair, w| {
                self.initial.push((pair, w))
            });
        }
        self.num_initial = batch_size;
    }

    /// Every transition and initial state of the dataset once, with the
    /// target-action expectation taken exactly.
    pub fn full(dataset: &TransitionDataset, target: &StochasticPolicy) -> Self {
        let na = dataset.num_actions;
        let mut batch = Self::default();
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        for (i, t) in dataset.transitions.iter().enumerate() {
            batch.pairs.push(t.state * na + t.action);
            push_target_actions(target, t.next_state, true, &mut unused, |pair, w| {
                batch.next.push((i, pair, w))
            });
        }
        for &s0 in &dataset.initial_states {
            push_target_actions(target, s0, true, &mut unused, |pair, w| {
                batch.initial.push((pair, w))
            });
        }
        batch.num_initial = dataset.initial_states.len();
        batch
    }
}

fn push_target_actions<R: Rng + ?Sized>(
    target: &StochasticPolicy,
    state: usize,
    exact: bool,
    rng: &mut R,
    mut push: impl FnMut(usize, f64),
) {
    let na = target.num_actions();
    if exact {
        for (a, &p) in target.row(state).iter().enumerate() {
            if p > 0.0 {
                push(state * na + a, p);
            }
        }
    } else {
        push(state * na + target.sample(state, rng), 1.0);
    }
}

/// Loss value with gradients with respect to the ν and ζ parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_nu: Vec<f64>,
    pub grad_zeta: Vec<f64>,
}

/// Deduplicates pair indices; returns the unique pairs and, for each input,
/// its position among them.
fn unique_pairs(pairs: impl Iterator<Item = usize>, num_pairs: usize) -> (Vec<usize>, Vec<usize>) {
    let mut slot = vec![usize::MAX; num_pairs];
    let mut uniq = Vec::new();
    let idx = pairs
        .map(|p| {
            if slot[p] == usize::MAX {
                slot[p] = uniq.len();
                uniq.push(p);
            }
            slot[p]
        })
        .collect();
    (uniq, idx)
}

fn check_batch(batch: &Batch, model: &CorrectionModel) -> Result<()> {
    if batch.pairs.is_empty() || batch.num_initial == 0 {
        return Err(DiceError::EmptyBatch);
    }
    let n = model.num_pairs();
    let bad = batch.pairs.iter().copied()
        .chain(batch.next.iter().map(|e| e.1))
        .chain(batch.initial.iter().map(|e| e.0))
        .any(|p| p >= n);
    if bad || batch.next.iter().any(|e| e.0 >= batch.pairs.len()) {
        return Err(DiceError::ShapeMismatch("batch refers to pairs outside the model".into()));
    }
    Ok(())
}

/// Empirical objective `Ĵ(ν, ζ)` on a batch.
pub fn minibatch_loss(
    batch: &Batch,
    model: &CorrectionModel,
    penalty: &PenaltyFunction,
    gamma: f64,
) -> Result<f64> {
    check_batch(batch, model)?;
    let nu = model.nu.eval_many(&batch.pairs);
    let zeta = model.zeta.eval_many(&batch.pairs);
    let next_pairs: Vec<usize> = batch.next.iter().map(|e| e.1).collect();
    let nu_next = model.nu.eval_many(&next_pairs);
    let init_pairs: Vec<usize> = batch.initial.iter().map(|e| e.0).collect();
    let nu_init = model.nu.eval_many(&init_pairs);
    let mut backup = vec![0.0; batch.pairs.len()];
    for (e, v) in batch.next.iter().zip(&nu_next) {
        backup[e.0] += e.2 * v;
    }
    let b = batch.pairs.len() as f64;
    let main: f64 = (0..batch.pairs.len())
        .map(|i| (nu[i] - gamma * backup[i]) * zeta[i] - penalty.conjugate(zeta[i]))
        .sum::<f64>()
        / b;
    let init: f64 = batch.initial.iter().zip(&nu_init).map(|(e, v)| e.1 * v).sum::<f64>()
        / batch.num_initial as f64;
    Ok(main - (1.0 - gamma) * init)
}

/// `Ĵ` and its gradients in one pass.
pub fn minibatch_loss_and_grad(
    batch: &Batch,
    model: &CorrectionModel,
    penalty: &PenaltyFunction,
    gamma: f64,
) -> Result<LossGrad> {
    check_batch(batch, model)?;
    if let (Architecture::Tabular { .. }, Architecture::Tabular { .. }) =
        (model.nu.architecture(), model.zeta.architecture())
    {
        let mut grad_nu = vec![0.0; model.nu.params().len()];
        let mut grad_zeta = vec![0.0; model.zeta.params().len()];
        let loss = tabular_loss_and_grad(batch, model, penalty, gamma, &mut grad_nu, &mut grad_zeta);
        return Ok(LossGrad { loss, grad_nu, grad_zeta });
    }
    let bsz = batch.pairs.len();
    let inv_b = 1.0 / bsz as f64;
    let inv_n0 = 1.0 / batch.num_initial as f64;
    let (nu_pairs, nu_idx) = unique_pairs(
        batch.pairs.iter().copied()
            .chain(batch.next.iter().map(|e| e.1))
            .chain(batch.initial.iter().map(|e| e.0)),
        model.num_pairs(),
    );
    let (zeta_pairs, zeta_idx) = unique_pairs(batch.pairs.iter().copied(), model.num_pairs());
    let nu_fwd = model.nu.forward(&nu_pairs);
    let zeta_fwd = model.zeta.forward(&zeta_pairs);
    let nu_out = nu_fwd.outputs();
    let zeta_out = zeta_fwd.outputs();

    let (idx_cur, rest) = nu_idx.split_at(bsz);
    let (idx_next, idx_init) = rest.split_at(batch.next.len());
    let mut backup = vec![0.0; bsz];
    for (e, &k) in batch.next.iter().zip(idx_next) {
        backup[e.0] += e.2 * nu_out[k];
    }
    let mut up_nu = vec![0.0; nu_pairs.len()];
    let mut up_zeta = vec![0.0; zeta_pairs.len()];
    let mut main = 0.0;
    for i in 0..bsz {
        let z = zeta_out[zeta_idx[i]];
        let residual = nu_out[idx_cur[i]] - gamma * backup[i];
        let (conj, conj_prime) = penalty.conjugate_with_prime(z);
        main += residual * z - conj;
        up_nu[idx_cur[i]] += z * inv_b;
        up_zeta[zeta_idx[i]] += (residual - conj_prime) * inv_b;
    }
    for (e, &k) in batch.next.iter().zip(idx_next) {
        up_nu[k] -= gamma * e.2 * zeta_out[zeta_idx[e.0]] * inv_b;
    }
    let mut init = 0.0;
    for (e, &k) in batch.initial.iter().zip(idx_init) {
        init += e.1 * nu_out[k];
        up_nu[k] -= (1.0 - gamma) * e.1 * inv_n0;
    }
    let mut grad_nu = vec![0.0; model.nu.params().len()];
    let mut grad_zeta = vec![0.0; model.zeta.params().len()];
    model.nu.backward(&nu_fwd, &up_nu, &mut grad_nu);
    model.zeta.backward(&zeta_fwd, &up_zeta, &mut grad_zeta);
    Ok(LossGrad {
        loss: main * inv_b - (1.0 - gamma) * init * inv_n0,
        grad_nu,
        grad_zeta,
    })
}

/// Table-indexed version of [`minibatch_loss_and_grad`]; gradients are
/// accumulated into the (zeroed) buffers.
fn tabular_loss_and_grad(
    batch: &Batch,
    model: &CorrectionModel,
    penalty: &PenaltyFunction,
    gamma: f64,
    grad_nu: &mut [f64],
    grad_zeta: &mut [f64],
) -> f64 {
    let nu = model.nu.params();
    let zeta = model.zeta.params();
    let inv_b = 1.0 / batch.pairs.len() as f64;
    let inv_n0 = 1.0 / batch.num_initial as f64;
    let mut backup = vec![0.0; batch.pairs.len()];
    for &(k, p2, w) in &batch.next {
        backup[k] += w * nu[p2];
    }
    let mut main = 0.0;
    for (&p, &backup) in batch.pairs.iter().zip(&backup) {
        let z = zeta[p];
        let residual = nu[p] - gamma * backup;
        let (conj, conj_prime) = penalty.conjugate_with_prime(z);
        main += residual * z - conj;
        grad_nu[p] += z * inv_b;
        grad_zeta[p] += (residual - conj_prime) * inv_b;
    }
    for &(k, p2, w) in &batch.next {
        grad_nu[p2] -= gamma * w * zeta[batch.pairs[k]] * inv_b;
    }
    let mut init = 0.0;
    for &(p0, w) in &batch.initial {
        init += w * nu[p0];
        grad_nu[p0] -= (1.0 - gamma) * w * inv_n0;
    }
    main * inv_b - (1.0 - gamma) * init * inv_n0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain SGD with step `lr / (1 + decay·t)` at step `t`.
    Sgd { decay: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_nu: f64,
    pub lr_zeta: f64,
    pub num_steps: usize,
    pub optimizer: Optimizer,
    pub penalty_p: f64,
    pub seed: u64,
    /// Bound `C` on the corrections; `ζ` outputs are clipped to `[0, C]`.
    pub zeta_clip: Option<f64>,
    pub eval_every: usize,
    /// Average over `π(a'|s')` instead of sampling one action.
    pub exact_expectation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            lr_nu: 1e-3,
            lr_zeta: 1e-4,
            num_steps: 100_000,
            optimizer: Optimizer::default(),
            penalty_p: 1.5,
            seed: 0,
            zeta_clip: None,
            eval_every: 1000,
            exact_expectation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DiceError::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_nu > 0.0) || !(self.lr_zeta > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.penalty_p > 1.0) {
            return bad("penalty_p must exceed 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if let Some(c) = self.zeta_clip {
            if !(c > 0.0) {
                return bad("zeta_clip must be positive");
            }
        }
        match self.optimizer {
            Optimizer::Sgd { decay } if !(decay >= 0.0) => bad("sgd decay must be non-negative"),
            Optimizer::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                bad("adam needs beta1, beta2 in [0, 1) and eps > 0")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// Number of completed updates.
    pub step: usize,
    /// Minibatch objective at the last update.
    pub loss: f64,
    /// `Σ d̂(s,a) ζ(s,a) r̂(s,a)` over the dataset.
    pub estimate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: CorrectionModel,
    pub trace: Vec<TracePoint>,
}

pub(crate) struct Stepper {
    optimizer: Optimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Stepper {
    pub(crate) fn new(optimizer: Optimizer, lr: f64, n: usize) -> Self {
        let v = match optimizer {
            Optimizer::Adam { .. } => vec![0.0; n],
            Optimizer::Sgd { .. } => Vec::new(),
        };
        Self { optimizer, lr, m: v.clone(), v }
    }

    /// Moves `params` along `direction` (a descent direction) at step `t`.
    pub(crate) fn apply(&mut self, params: &mut [f64], direction: &[f64], t: usize) {
        match self.optimizer {
            Optimizer::Sgd { decay } => {
                let lr = self.lr / (1.0 + decay * t as f64);
                for (p, g) in params.iter_mut().zip(direction) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let k = (t + 1) as i32;
                let c1 = 1.0 - beta1.powi(k);
                let c2 = 1.0 - beta2.powi(k);
                for i in 0..params.len() {
                    let g = direction[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Runs `num_steps` simultaneous updates: descent on `ν`, ascent on `ζ`.
pub fn train(
    dataset: &TransitionDataset,
    target: &StochasticPolicy,
    model: CorrectionModel,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if dataset.is_empty() || dataset.initial_states.is_empty() {
        return Err(DiceError::EmptyDataset);
    }
    dataset.validate()?;
    if target.num_states() != dataset.num_states || target.num_actions() != dataset.num_actions {
        return Err(DiceError::ShapeMismatch("target policy and dataset dimensions differ".into()));
    }
    if model.num_pairs() != dataset.num_states * dataset.num_actions {
        return Err(DiceError::ShapeMismatch("model and dataset dimensions differ".into()));
    }
    let penalty = PenaltyFunction::new(config.penalty_p)?;
    let empirical = build_empirical_model(dataset)?;
    let gamma = dataset.gamma;
    let mut model = model;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
    let mut nu_step = Stepper::new(config.optimizer, config.lr_nu, model.nu.params().len());
    let mut zeta_step = Stepper::new(config.optimizer, config.lr_zeta, model.zeta.params().len());
    let mut batch = Batch::default();
    let mut trace = Vec::new();
    for t in 0..config.num_steps {
        batch.resample(dataset, target, config.batch_size, config.exact_expectation, &mut rng);
        let LossGrad { loss, grad_nu, mut grad_zeta } =
            minibatch_loss_and_grad(&batch, &model, &penalty, gamma)?;
        grad_zeta.iter_mut().for_each(|g| *g = -*g);
        nu_step.apply(model.nu.params_mut(), &grad_nu, t);
        zeta_step.apply(model.zeta.params_mut(), &grad_zeta, t);
        let finite = loss.is_finite()
            && model.nu.params().iter().all(|p| p.is_finite())
            && model.zeta.params().iter().all(|p| p.is_finite());
        if !finite {
            return Err(DiceError::NonFinite {
                step: t,
                nu_norm: model.nu.param_norm(),
                zeta_norm: model.zeta.param_norm(),
            });
        }
        let done = t + 1;
        if done % config.eval_every == 0 || done == config.num_steps {
            trace.push(TracePoint {
                step: done,
                loss,
                estimate: estimate_from_model(&model, &empirical, config.zeta_clip),
            });
        }
    }
    Ok(TrainOutput { model, trace })
}

/// `ζ` at the given pairs, clipped to `[0, C]` when a bound is given.
pub fn corrections_from_model(model: &CorrectionModel, pairs: &[usize], clip: Option<f64>) -> Vec<f64> {
    let mut out = model.zeta.eval_many(pairs);
    if let Some(c) = clip {
        out.iter_mut().for_each(|w| *w = w.clamp(0.0, c));
    }
    out
}

/// `Σ d̂(s,a)·ζ(s,a)·r̂(s,a)` over the observed pairs of `empirical`.
pub fn estimate_from_model(model: &CorrectionModel, empirical: &EmpiricalModel, clip: Option<f64>) -> f64 {
    let pairs: Vec<usize> = empirical.observed_pairs().collect();
    corrections_from_model(model, &pairs, clip)
        .iter()
        .zip(&pairs)
        .map(|(w, &p)| empirical.weight[p] * w * empirical.avg_reward[p])
        .sum()
}

/// Data-weighted mean of `|f*'(ζ(s,a)) − (ν(s,a) − γ Ê[ν(s',a')])|`, the
/// empirical backup averaging over the observed next states and `π(a'|s')`.
/// Zero at the saddle point of the empirical objective.
pub fn kkt_residual(
    model: &CorrectionModel,
    empirical: &EmpiricalModel,
    target: &StochasticPolicy,
    penalty: &PenaltyFunction,
    gamma: f64,
) -> f64 {
    let na = empirical.num_actions;
    let nu = model.nu.eval_many(&(0..model.num_pairs()).collect::<Vec<_>>());
    let pairs: Vec<usize> = empirical.observed_pairs().collect();
    let zeta = model.zeta.eval_many(&pairs);
    pairs
        .iter()
        .zip(&zeta)
        .map(|(&p, &z)| {
            let backup: f64 = empirical.cond_next[p]
                .iter()
                .map(|&(s2, prob)| {
                    prob * target.row(s2).iter().enumerate().map(|(a2, pa)| pa * nu[s2 * na + a2]).sum::<f64>()
                })
                .sum();
            empirical.weight[p] * (penalty.conjugate_prime(z) - (nu[p] - gamma * backup)).abs()
        })
        .sum()
}
