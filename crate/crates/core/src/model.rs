//! Function families for `ν` and `ζ` over state-action pairs: tables, linear
//! models on fixed features, and small tanh MLPs with hand-written
//! reverse-mode gradients.
//!
//! Every family maps a pair index to a scalar. Parameters are a flat vector;
//! gradients are accumulated as vector-Jacobian products against per-pair
//! upstream sensitivities.

use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::grid_coords;
use crate::error::{parse_err, DiceError, Result};

/// Fixed per-pair input features, row-major `num_pairs × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    num_pairs: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureTable {
    pub fn new(num_pairs: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_pairs * dim || dim == 0 {
            return Err(DiceError::ShapeMismatch(format!(
                "feature table needs {num_pairs}×{dim} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DiceError::InvalidArgument("non-finite feature".into()));
        }
        Ok(Self {
            num_pairs,
            dim,
            values,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.num_pairs
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, pair: usize) -> &[f64] {
        &self.values[pair * self.dim..(pair + 1) * self.dim]
    }

    /// `[onehot(s), onehot(a)]`.
    pub fn state_action_onehot(num_states: usize, num_actions: usize) -> Self {
        let dim = num_states + num_actions;
        let mut values = vec![0.0; num_states * num_actions * dim];
        for s in 0..num_states {
            for a in 0..num_actions {
                let row = (s * num_actions + a) * dim;
                values[row + s] = 1.0;
                values[row + num_states + a] = 1.0;
            }
        }
        Self {
            num_pairs: num_states * num_actions,
            dim,
            values,
        }
    }

    /// One indicator per state; for state-indexed models.
    pub fn state_onehot(num_states: usize) -> Self {
        let mut values = vec![0.0; num_states * num_states];
        for s in 0..num_states {
            values[s * num_states + s] = 1.0;
        }
        Self {
            num_pairs: num_states,
            dim: num_states,
            values,
        }
    }

    /// `[1, x̃, ỹ, x̃², x̃ỹ, ỹ²]` per grid state, `x̃ = x/(n−1)`.
    pub fn grid_state_polynomial(size: usize) -> Self {
        let scale = (size.max(2) - 1) as f64;
        let values = (0..size * size)
            .flat_map(|s| {
                let (x, y) = grid_coords(size, s);
                let (x, y) = (x as f64 / scale, y as f64 / scale);
                [1.0, x, y, x * x, x * y, y * y]
            })
            .collect();
        Self {
            num_pairs: size * size,
            dim: 6,
            values,
        }
    }

    /// `[x̃, ỹ]` per grid state, scaled to `[−1, 1]`.
    pub fn grid_state_inputs(size: usize) -> Self {
        let scale = (size.max(2) - 1) as f64;
        let values = (0..size * size)
            .flat_map(|s| {
                let (x, y) = grid_coords(size, s);
                [2.0 * x as f64 / scale - 1.0, 2.0 * y as f64 / scale - 1.0]
            })
            .collect();
        Self {
            num_pairs: size * size,
            dim: 2,
            values,
        }
    }

    /// Per-action quadratic polynomial in the scaled grid coordinates
    /// `x̃ = x/(n−1)`, `ỹ = y/(n−1)`: the block for action `a` holds
    /// `[1, x̃, ỹ, x̃², x̃ỹ, ỹ²]`, all other blocks are zero.
    pub fn grid_polynomial(size: usize, num_actions: usize) -> Self {
        const BLOCK: usize = 6;
        let dim = BLOCK * num_actions;
        let scale = (size.max(2) - 1) as f64;
        let num_pairs = size * size * num_actions;
        let mut values = vec![0.0; num_pairs * dim];
        for s in 0..size * size {
            let (x, y) = grid_coords(size, s);
            let (x, y) = (x as f64 / scale, y as f64 / scale);
            for a in 0..num_actions {
                let row = (s * num_actions + a) * dim + a * BLOCK;
                values[row..row + BLOCK].copy_from_slice(&[1.0, x, y, x * x, x * y, y * y]);
            }
        }
        Self {
            num_pairs,
            dim,
            values,
        }
    }

    /// Network inputs for the grid: `[x̃, ỹ, onehot(a)]` with coordinates
    /// scaled to `[−1, 1]`.
    pub fn grid_inputs(size: usize, num_actions: usize) -> Self {
        let dim = 2 + num_actions;
        let scale = (size.max(2) - 1) as f64;
        let num_pairs = size * size * num_actions;
        let mut values = vec![0.0; num_pairs * dim];
        for s in 0..size * size {
            let (x, y) = grid_coords(size, s);
            for a in 0..num_actions {
                let row = (s * num_actions + a) * dim;
                values[row] = 2.0 * x as f64 / scale - 1.0;
                values[row + 1] = 2.0 * y as f64 / scale - 1.0;
                values[row + 2 + a] = 1.0;
            }
        }
        Self {
            num_pairs,
            dim,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Tabular { num_pairs: usize },
    Linear { features: Arc<FeatureTable> },
    /// Tanh hidden layers of the given widths and a linear scalar output.
    Mlp {
        features: Arc<FeatureTable>,
        hidden: Vec<usize>,
    },
}

impl Architecture {
    pub fn num_pairs(&self) -> usize {
        match self {
            Architecture::Tabular { num_pairs } => *num_pairs,
            Architecture::Linear { features } | Architecture::Mlp { features, .. } => {
                features.num_pairs()
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Architecture::Tabular { .. } => "tabular",
            Architecture::Linear { .. } => "linear",
            Architecture::Mlp { .. } => "mlp",
        }
    }

    /// `(fan_in, fan_out)` of each dense layer, input to output.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match self {
            Architecture::Mlp { features, hidden } => {
                let mut sizes = vec![features.dim()];
                sizes.extend(hidden);
                sizes.push(1);
                sizes.windows(2).map(|w| (w[0], w[1])).collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Architecture::Tabular { num_pairs } => *num_pairs,
            Architecture::Linear { features } => features.dim(),
            Architecture::Mlp { .. } => self
                .layer_shapes()
                .iter()
                .map(|(i, o)| i * o + o)
                .sum(),
        }
    }
}

/// Cached activations of an MLP forward pass over a list of pairs.
struct MlpTape {
    /// `acts[0]` are the inputs; `acts[l]` the output of layer `l`.
    acts: Vec<Array2<f64>>,
}

/// Outputs of a forward pass over a list of pairs.
pub struct Forward {
    pairs: Vec<usize>,
    outputs: Vec<f64>,
    tape: Option<MlpTape>,
}

impl Forward {
    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }
}

/// A scalar function of state-action pairs with flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    params: Vec<f64>,
}

impl Network {
    /// Zero parameters (tabular/linear) or the default random MLP init.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut params = vec![0.0; arch.num_params()];
        if let Architecture::Mlp { .. } = arch {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut offset = 0;
            for (fan_in, fan_out) in arch.layer_shapes() {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for p in &mut params[offset..offset + fan_in * fan_out] {
                    *p = rng.gen_range(-bound..=bound);
                }
                offset += fan_in * fan_out + fan_out;
            }
        }
        Self { arch, params }
    }

    pub fn with_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.num_params() {
            return Err(DiceError::ShapeMismatch(format!(
                "{} network needs {} parameters, got {}",
                arch.kind_name(),
                arch.num_params(),
                params.len()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_pairs(&self) -> usize {
        self.arch.num_pairs()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_norm(&self) -> f64 {
        self.params.iter().map(|p| p * p).sum::<f64>().sqrt()
    }

    pub fn eval(&self, pair: usize) -> f64 {
        match &self.arch {
            Architecture::Tabular { .. } => self.params[pair],
            Architecture::Linear { features } => dot(features.row(pair), &self.params),
            Architecture::Mlp { .. } => self.eval_many(&[pair])[0],
        }
    }

    pub fn eval_many(&self, pairs: &[usize]) -> Vec<f64> {
        match &self.arch {
            Architecture::Mlp { .. } => {
                let tape = self.mlp_forward(pairs);
                tape.acts.last().unwrap().column(0).to_vec()
            }
            _ => pairs.iter().map(|&p| self.eval(p)).collect(),
        }
    }

    /// Evaluates at `pairs`, keeping what the backward pass needs.
    pub fn forward(&self, pairs: &[usize]) -> Forward {
        match &self.arch {
            Architecture::Mlp { .. } => {
                let tape = self.mlp_forward(pairs);
                Forward {
                    pairs: pairs.to_vec(),
                    outputs: tape.acts.last().unwrap().column(0).to_vec(),
                    tape: Some(tape),
                }
            }
            _ => Forward {
                pairs: pairs.to_vec(),
                outputs: self.eval_many(pairs),
                tape: None,
            },
        }
    }

    /// Adds `Σ_k upstream[k] · ∂f(pairs[k])/∂θ` into `grad`, for the pairs of
    /// a previous [`Network::forward`].
    pub fn backward(&self, fwd: &Forward, upstream: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(fwd.pairs.len(), upstream.len());
        debug_assert_eq!(grad.len(), self.params.len());
        match &self.arch {
            Architecture::Tabular { .. } => {
                for (&p, &u) in fwd.pairs.iter().zip(upstream) {
                    grad[p] += u;
                }
            }
            Architecture::Linear { features } => {
                for (&p, &u) in fwd.pairs.iter().zip(upstream) {
                    if u != 0.0 {
                        for (g, &x) in grad.iter_mut().zip(features.row(p)) {
                            *g += u * x;
                        }
                    }
                }
            }
            Architecture::Mlp { .. } => {
                let tape = fwd.tape.as_ref().expect("forward pass without tape");
                self.mlp_backward(tape, upstream, grad);
            }
        }
    }

    /// `forward` followed by `backward`.
    pub fn accumulate_grad(&self, pairs: &[usize], upstream: &[f64], grad: &mut [f64]) {
        let fwd = self.forward(pairs);
        self.backward(&fwd, upstream, grad);
    }

    fn layer_views(&self) -> Vec<(Array2<f64>, Array1<f64>)> {
        let mut offset = 0;
        self.arch
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let w = Array2::from_shape_vec(
                    (fan_out, fan_in),
                    self.params[offset..offset + fan_in * fan_out].to_vec(),
                )
                .expect("layer shape");
                offset += fan_in * fan_out;
                let b = Array1::from(self.params[offset..offset + fan_out].to_vec());
                offset += fan_out;
                (w, b)
            })
            .collect()
    }

    fn mlp_forward(&self, pairs: &[usize]) -> MlpTape {
        let Architecture::Mlp { features, .. } = &self.arch else {
            unreachable!("mlp_forward on a non-MLP network")
        };
        let mut x = Array2::zeros((pairs.len(), features.dim()));
        for (mut row, &p) in x.axis_iter_mut(Axis(0)).zip(pairs) {
            row.assign(&ndarray::ArrayView1::from(features.row(p)));
        }
        let layers = self.layer_views();
        let last = layers.len() - 1;
        let mut acts = vec![x];
        for (l, (w, b)) in layers.iter().enumerate() {
            let mut z = acts[l].dot(&w.t());
            z += b;
            if l < last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        MlpTape { acts }
    }

    fn mlp_backward(&self, tape: &MlpTape, upstream: &[f64], grad: &mut [f64]) {
        let layers = self.layer_views();
        let shapes = self.arch.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for &(fan_in, fan_out) in &shapes {
            offsets.push(offset);
            offset += fan_in * fan_out + fan_out;
        }
        let mut delta = Array2::from_shape_vec((upstream.len(), 1), upstream.to_vec())
            .expect("upstream shape");
        for l in (0..layers.len()).rev() {
            let (fan_in, fan_out) = shapes[l];
            let input = &tape.acts[l];
            let gw = delta.t().dot(input);
            let gb = delta.sum_axis(Axis(0));
            let off = offsets[l];
            for (g, v) in grad[off..off + fan_in * fan_out].iter_mut().zip(gw.iter()) {
                *g += v;
            }
            for (g, v) in grad[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]
                .iter_mut()
                .zip(gb.iter())
            {
                *g += v;
            }
            if l > 0 {
                let mut back = delta.dot(&layers[l].0);
                back.zip_mut_with(input, |d, &h| *d *= 1.0 - h * h);
                delta = back;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The pair `(ν, ζ)` trained by the saddle-point optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionModel {
    pub nu: Network,
    pub zeta: Network,
}

impl CorrectionModel {
    pub fn new(arch: Architecture, seed: u64) -> Self {
        Self {
            nu: Network::new(arch.clone(), seed),
            zeta: Network::new(arch, seed.wrapping_add(1)),
        }
    }

    pub fn tabular(num_pairs: usize) -> Self {
        Self::new(Architecture::Tabular { num_pairs }, 0)
    }

    pub fn linear(features: FeatureTable) -> Self {
        Self::new(
            Architecture::Linear {
                features: Arc::new(features),
            },
            0,
        )
    }

    pub fn mlp(features: FeatureTable, hidden: Vec<usize>, seed: u64) -> Self {
        Self::new(
            Architecture::Mlp {
                features: Arc::new(features),
                hidden,
            },
            seed,
        )
    }

    pub fn num_pairs(&self) -> usize {
        self.nu.num_pairs()
    }

    /// Text form: a `dice-model v1 <kind> <dims...>` header, the feature table
    /// for linear/MLP models, then the ν and ζ parameters.
    pub fn to_text(&self) -> String {
        let arch = self.nu.architecture();
        let mut out = String::new();
        match arch {
            Architecture::Tabular { num_pairs } => {
                writeln!(out, "dice-model v1 tabular {num_pairs}").unwrap();
            }
            Architecture::Linear { features } => {
                writeln!(out, "dice-model v1 linear {} {}", features.num_pairs(), features.dim())
                    .unwrap();
            }
            Architecture::Mlp { features, hidden } => {
                let widths: Vec<String> = hidden.iter().map(|h| h.to_string()).collect();
                writeln!(
                    out,
                    "dice-model v1 mlp {} {} {}",
                    features.num_pairs(),
                    features.dim(),
                    widths.join(" ")
                )
                .unwrap();
            }
        }
        if let Architecture::Linear { features } | Architecture::Mlp { features, .. } = arch {
            for p in 0..features.num_pairs() {
                writeln!(out, "features {}", join_reals(features.row(p))).unwrap();
            }
        }
        writeln!(out, "nu {}", join_reals(self.nu.params())).unwrap();
        writeln!(out, "zeta {}", join_reals(self.zeta.params())).unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "empty model file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() < 4 || fields[0] != "dice-model" || fields[1] != "v1" {
            return Err(parse_err(hline, "expected `dice-model v1 <kind> <dims...>`"));
        }
        let dims: Vec<usize> = fields[3..]
            .iter()
            .map(|d| d.parse().map_err(|_| parse_err(hline, "bad dimension")))
            .collect::<Result<_>>()?;
        let mut read_features = |num_pairs: usize, dim: usize| -> Result<FeatureTable> {
            let mut values = Vec::with_capacity(num_pairs * dim);
            for _ in 0..num_pairs {
                let (n, line) = lines
                    .next()
                    .ok_or_else(|| parse_err(hline, "missing feature rows"))?;
                let row = parse_tagged(n, line, "features")?;
                if row.len() != dim {
                    return Err(parse_err(n, "feature row has the wrong width"));
                }
                values.extend(row);
            }
            FeatureTable::new(num_pairs, dim, values)
        };
        let arch = match (fields[2], dims.as_slice()) {
            ("tabular", [n]) => Architecture::Tabular { num_pairs: *n },
            ("linear", [n, d]) => Architecture::Linear {
                features: Arc::new(read_features(*n, *d)?),
            },
            ("mlp", [n, d, hidden @ ..]) => Architecture::Mlp {
                features: Arc::new(read_features(*n, *d)?),
                hidden: hidden.to_vec(),
            },
            _ => return Err(parse_err(hline, "unknown model kind or wrong dimensions")),
        };
        let mut next_params = |tag: &str| -> Result<Vec<f64>> {
            let (n, line) = lines
                .next()
                .ok_or_else(|| parse_err(hline, format!("missing `{tag}` line")))?;
            parse_tagged(n, line, tag)
        };
        let nu = next_params("nu")?;
        let zeta = next_params("zeta")?;
        Ok(Self {
            nu: Network::with_params(arch.clone(), nu)?,
            zeta: Network::with_params(arch, zeta)?,
        })
    }
}

fn join_reals(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:.16e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_tagged(line_no: usize, line: &str, tag: &str) -> Result<Vec<f64>> {
    let mut it = line.split_whitespace();
    if it.next() != Some(tag) {
        return Err(parse_err(line_no, format!("expected `{tag}` line")));
    }
    it.map(|v| {
        v.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| parse_err(line_no, format!("bad number `{v}`")))
    })
    .collect()
}
