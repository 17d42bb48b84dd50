//! Parameterized relative-action-value functions `state → λ ∈ ℝ^m`.
//!
//! Three families share one flat parameter vector layout so that gradients,
//! optimizers, finite-difference checks and checkpoints treat them alike:
//!
//! * tabular: `θ[s·m + a]`
//! * linear: `W (m × d)` row-major, then `b (m)`
//! * mlp: per layer `W (out × in)` row-major then `b (out)`; tanh hidden
//!   layers and a linear output layer
//!
//! Any family can squash its output through `c_q · sigmoid(·)` so that every
//! λ lies in `[0, c_q]`.

mod checkpoint;
mod gradcheck;

use rand::Rng;

use crate::envs::StateId;
use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{
    finite_difference_check, relative_error, FdOptions, FdReport, FdRow, FnObjective, Objective,
};

/// Half-width of the uniform parameter initialization.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Tabular,
    Linear,
    Mlp,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Tabular => 0,
            ModelKind::Linear => 1,
            ModelKind::Mlp => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::Tabular),
            1 => Some(ModelKind::Linear),
            2 => Some(ModelKind::Mlp),
            _ => None,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular" => Ok(ModelKind::Tabular),
            "linear" => Ok(ModelKind::Linear),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(Error::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Tabular => "tabular",
            ModelKind::Linear => "linear",
            ModelKind::Mlp => "mlp",
        })
    }
}

/// Model input: a dense state id (one-hot for linear/mlp) or raw features.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    State(StateId),
    Features(&'a [f64]),
}

impl From<StateId> for Input<'_> {
    fn from(s: StateId) -> Self {
        Input::State(s)
    }
}

impl<'a> From<&'a [f64]> for Input<'a> {
    fn from(x: &'a [f64]) -> Self {
        Input::Features(x)
    }
}

/// Flat gradient aligned with a model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradVector {
    pub values: Vec<f64>,
    /// Number of per-sample gradients accumulated into `values`.
    pub count: usize,
}

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        GradVector {
            values: vec![0.0; len],
            count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add_assign(&mut self, other: &GradVector) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        self.count += other.count;
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|v| *v *= k);
    }

    pub fn inf_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaModel {
    kind: ModelKind,
    /// `[input, hidden..., m]`; tabular uses `[states, m]`.
    dims: Vec<usize>,
    squash: Option<f64>,
    params: Vec<f64>,
}

struct Trace {
    /// Activations per layer, `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
    /// Final linear outputs before squashing.
    logits: Vec<f64>,
}

impl LambdaModel {
    pub fn tabular(states: usize, actions: usize) -> Self {
        Self::zeroed(ModelKind::Tabular, vec![states, actions])
    }

    pub fn linear(features: usize, actions: usize) -> Self {
        Self::zeroed(ModelKind::Linear, vec![features, actions])
    }

    /// `layers` is `[input, hidden..., actions]`.
    pub fn mlp(layers: &[usize]) -> Result<Self> {
        if layers.len() < 2 || layers.contains(&0) {
            return Err(Error::InvalidParameter(format!("bad mlp layer widths {layers:?}")));
        }
        Ok(Self::zeroed(ModelKind::Mlp, layers.to_vec()))
    }

    /// Rebuilds a model from its parts, checking the parameter count.
    pub fn from_parts(kind: ModelKind, dims: Vec<usize>, squash: Option<f64>, params: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 || (kind != ModelKind::Mlp && dims.len() != 2) || dims.contains(&0) {
            return Err(Error::InvalidParameter(format!("bad dims {dims:?} for {kind:?}")));
        }
        let expected = param_count(kind, &dims);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        if let Some(c) = squash {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidParameter(format!("squash bound {c} must be positive")));
            }
        }
        Ok(LambdaModel {
            kind,
            dims,
            squash,
            params,
        })
    }

    fn zeroed(kind: ModelKind, dims: Vec<usize>) -> Self {
        let n = param_count(kind, &dims);
        LambdaModel {
            kind,
            dims,
            squash: None,
            params: vec![0.0; n],
        }
    }

    /// Squash outputs into `[0, c_q]`.
    pub fn with_squash(mut self, c_q: f64) -> Self {
        self.squash = Some(c_q);
        self
    }

    /// Uniform `[-INIT_SCALE, INIT_SCALE]` initialization.
    pub fn init_uniform<R: Rng + ?Sized>(mut self, rng: &mut R) -> Self {
        for p in &mut self.params {
            *p = rng.random_range(-INIT_SCALE..=INIT_SCALE);
        }
        self
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn squash(&self) -> Option<f64> {
        self.squash
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn action_count(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// λ-vector for `input`.
    pub fn forward<'a>(&self, input: impl Into<Input<'a>>) -> Result<Vec<f64>> {
        let input = input.into();
        if self.kind == ModelKind::Tabular {
            let s = self.tabular_state(input)?;
            let m = self.action_count();
            let mut out = self.params[s * m..(s + 1) * m].to_vec();
            if let Some(c) = self.squash {
                out.iter_mut().for_each(|z| *z = c * sigmoid(*z));
            }
            return Ok(out);
        }
        let trace = self.trace(input)?;
        Ok(self.squashed(trace.logits))
    }

    /// `∇_θ (upstream · λ(input))`.
    pub fn backward<'a>(&self, input: impl Into<Input<'a>>, upstream: &[f64]) -> Result<GradVector> {
        let mut grad = GradVector::zeros(self.params.len());
        self.backward_into(input, upstream, &mut grad.values)?;
        grad.count = 1;
        Ok(grad)
    }

    /// Adds `∇_θ (upstream · λ(input))` into `out`.
    pub fn backward_into<'a>(&self, input: impl Into<Input<'a>>, upstream: &[f64], out: &mut [f64]) -> Result<()> {
        let input = input.into();
        let m = self.action_count();
        if upstream.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: upstream.len(),
            });
        }
        if out.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: out.len(),
            });
        }
        if !upstream.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("upstream gradient"));
        }

        if self.kind == ModelKind::Tabular {
            let s = self.tabular_state(input)?;
            for a in 0..m {
                let z = self.params[s * m + a];
                out[s * m + a] += upstream[a] * self.squash_slope(z);
            }
            return Ok(());
        }

        let trace = self.trace(input)?;
        // gradient w.r.t. the final linear outputs
        let mut delta: Vec<f64> = trace
            .logits
            .iter()
            .zip(upstream)
            .map(|(&z, &u)| u * self.squash_slope(z))
            .collect();

        let offsets = layer_offsets(&self.dims);
        let layers = self.dims.len() - 1;
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w_off = offsets[l];
            let b_off = w_off + n_in * n_out;
            let x = &trace.acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                out[b_off + o] += d;
                let row = w_off + o * n_in;
                match (l, input) {
                    (0, Input::State(s)) => out[row + s] += d,
                    _ => {
                        for (i, &xi) in x.iter().enumerate() {
                            out[row + i] += d * xi;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            // back through W and the tanh of layer l's input
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &self.params[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            for (p, &a) in prev.iter_mut().zip(x) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
        Ok(())
    }

    fn tabular_state(&self, input: Input<'_>) -> Result<StateId> {
        match input {
            Input::State(s) if s < self.dims[0] => Ok(s),
            Input::State(s) => Err(Error::DimensionMismatch {
                expected: self.dims[0],
                got: s + 1,
            }),
            Input::Features(_) => Err(Error::InvalidParameter(
                "tabular models take state ids, not features".into(),
            )),
        }
    }

    fn trace(&self, input: Input<'_>) -> Result<Trace> {
        let d = self.dims[0];
        let x0 = match input {
            Input::State(s) => {
                if s >= d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: s + 1,
                    });
                }
                let mut v = vec![0.0; d];
                v[s] = 1.0;
                v
            }
            Input::Features(x) => {
                if x.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: x.len(),
                    });
                }
                x.to_vec()
            }
        };
        let offsets = layer_offsets(&self.dims);
        let layers = self.dims.len() - 1;
        let mut acts = vec![x0];
        let mut logits = Vec::new();
        for l in 0..layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w_off = offsets[l];
            let b_off = w_off + n_in * n_out;
            let x = &acts[l];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &self.params[w_off + o * n_in..w_off + (o + 1) * n_in];
                    let dot = match (l, input) {
                        (0, Input::State(s)) => row[s],
                        _ => row.iter().zip(x).map(|(w, xi)| w * xi).sum(),
                    };
                    dot + self.params[b_off + o]
                })
                .collect();
            if l + 1 == layers {
                logits = z;
            } else {
                acts.push(z.into_iter().map(f64::tanh).collect());
            }
        }
        Ok(Trace { acts, logits })
    }

    fn squashed(&self, mut z: Vec<f64>) -> Vec<f64> {
        if let Some(c) = self.squash {
            z.iter_mut().for_each(|v| *v = c * sigmoid(*v));
        }
        z
    }

    fn squash_slope(&self, z: f64) -> f64 {
        match self.squash {
            Some(c) => {
                let s = sigmoid(z);
                c * s * (1.0 - s)
            }
            None => 1.0,
        }
    }
}

fn param_count(kind: ModelKind, dims: &[usize]) -> usize {
    match kind {
        ModelKind::Tabular => dims[0] * dims[1],
        _ => dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum(),
    }
}

fn layer_offsets(dims: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(dims.len() - 1);
    let mut acc = 0;
    for w in dims.windows(2) {
        offsets.push(acc);
        acc += w[0] * w[1] + w[1];
    }
    offsets
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Plain SGD with optional heavy-ball momentum. Steps go *against* the
/// gradient; pass a negated ascent direction to maximize.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(learning_rate: f64) -> Self {
        Sgd {
            learning_rate,
            momentum: 0.0,
            velocity: Vec::new(),
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn step(&mut self, model: &mut LambdaModel, grad: &GradVector) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_update(model, grad, self.learning_rate);
        }
        check_grad(model, grad)?;
        if self.velocity.len() != grad.len() {
            self.velocity = vec![0.0; grad.len()];
        }
        for ((p, v), g) in model.params.iter_mut().zip(&mut self.velocity).zip(&grad.values) {
            *v = self.momentum * *v + g;
            *p -= self.learning_rate * *v;
        }
        Ok(())
    }
}

fn check_grad(model: &LambdaModel, grad: &GradVector) -> Result<()> {
    if grad.len() != model.param_count() {
        return Err(Error::DimensionMismatch {
            expected: model.param_count(),
            got: grad.len(),
        });
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(())
}

/// `θ ← θ − lr · grad`.
pub fn sgd_update(model: &mut LambdaModel, grad: &GradVector, learning_rate: f64) -> Result<()> {
    check_grad(model, grad)?;
    for (p, g) in model.params.iter_mut().zip(&grad.values) {
        *p -= learning_rate * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_tabular_outputs_zero() {
        let model = LambdaModel::tabular(4, 3);
        assert_eq!(model.forward(2).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn linear_identity_row() {
        let mut model = LambdaModel::linear(4, 3);
        // W row 1, column 2
        model.params_mut()[4 + 2] = 1.0;
        let x = [0.0, 0.0, 1.0, 0.0];
        assert_eq!(model.forward(&x[..]).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(model.forward(2).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn mlp_matches_hand_rolled_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = LambdaModel::mlp(&[2, 4, 3]).unwrap().init_uniform(&mut rng);
        let p = model.params();
        let x = [0.3, -1.2];
        // W1 (4×2), b1 (4), W2 (3×4), b2 (3)
        let h: Vec<f64> = (0..4)
            .map(|j| (p[j * 2] * x[0] + p[j * 2 + 1] * x[1] + p[8 + j]).tanh())
            .collect();
        let expect: Vec<f64> = (0..3)
            .map(|k| (0..4).map(|j| p[12 + k * 4 + j] * h[j]).sum::<f64>() + p[24 + k])
            .collect();
        let got = model.forward(&x[..]).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
        assert_eq!(model.param_count(), 27);
    }

    #[test]
    fn squash_keeps_outputs_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = LambdaModel::mlp(&[3, 5, 4]).unwrap().with_squash(0.5).init_uniform(&mut rng);
        model.params_mut().iter_mut().for_each(|p| *p *= 400.0);
        for s in 0..3 {
            let lam = model.forward(s).unwrap();
            assert!(lam.iter().all(|&l| (0.0..=0.5).contains(&l)), "{lam:?}");
        }
    }

    #[test]
    fn forward_dimension_errors() {
        let model = LambdaModel::linear(3, 2);
        assert!(matches!(
            model.forward(&[1.0, 2.0][..]),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
        assert!(model.forward(3).is_err());
        assert!(LambdaModel::tabular(2, 2).forward(&[0.0, 1.0][..]).is_err());
    }

    #[test]
    fn backward_zero_and_one_hot() {
        let model = LambdaModel::tabular(3, 2);
        let g = model.backward(1, &[0.0, 0.0]).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
        let g = model.backward(1, &[0.0, 1.0]).unwrap();
        let mut expect = vec![0.0; 6];
        expect[3] = 1.0;
        assert_eq!(g.values, expect);
        assert!(matches!(
            model.backward(1, &[f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
        assert!(model.backward(1, &[1.0]).is_err());
    }

    #[test]
    fn sgd_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = LambdaModel::linear(2, 2).init_uniform(&mut rng);
        let before = model.params().to_vec();
        sgd_update(&mut model, &GradVector::zeros(6), 0.1).unwrap();
        assert_eq!(model.params(), &before[..]);
        let grad = GradVector {
            values: before.clone(),
            count: 1,
        };
        sgd_update(&mut model, &grad, 1.0).unwrap();
        assert!(model.params().iter().all(|&p| p == 0.0));
        let bad = GradVector {
            values: vec![f64::INFINITY; 6],
            count: 1,
        };
        assert!(sgd_update(&mut model, &bad, 1.0).is_err());
    }

    #[test]
    fn sequential_updates_equal_summed_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = LambdaModel::linear(3, 2).init_uniform(&mut rng);
        let g1 = GradVector {
            values: (0..8).map(|i| i as f64 * 0.25 - 1.0).collect(),
            count: 1,
        };
        let g2 = GradVector {
            values: (0..8).map(|i| 0.5 - i as f64 * 0.125).collect(),
            count: 1,
        };
        let mut seq = base.clone();
        sgd_update(&mut seq, &g1, 0.1).unwrap();
        sgd_update(&mut seq, &g2, 0.1).unwrap();
        let mut sum = g1.clone();
        sum.add_assign(&g2);
        let mut once = base;
        sgd_update(&mut once, &sum, 0.1).unwrap();
        for (a, b) in seq.params().iter().zip(once.params()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_zero_matches_plain_sgd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = LambdaModel::tabular(2, 2).init_uniform(&mut rng);
        let g = GradVector {
            values: vec![1.0, -2.0, 0.5, 0.0],
            count: 1,
        };
        let mut a = base.clone();
        let mut b = base;
        Sgd::new(0.1).step(&mut a, &g).unwrap();
        sgd_update(&mut b, &g, 0.1).unwrap();
        assert_eq!(a, b);
        let mut opt = Sgd::new(0.1).with_momentum(0.9);
        let before = a.params().to_vec();
        opt.step(&mut a, &g).unwrap();
        opt.step(&mut a, &g).unwrap();
        // second step moves 1.9× the first
        assert!((before[0] - a.params()[0] - 0.1 * (1.0 + 1.9)).abs() < 1e-12);
    }
}
