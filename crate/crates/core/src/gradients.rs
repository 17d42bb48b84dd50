//! Losses and gradients.
//!
//! Trajectory estimators (`rpg`, `rpg_exact`, `lpg`) return the gradient of
//! a surrogate *objective* to be maximized. Supervised losses (`hinge`,
//! `cross_entropy`) return the gradient of a loss to be minimized.

use std::collections::BTreeMap;

use crate::envs::{ActionId, StateId, Trajectory};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::Step;
use crate::model::{finite_difference_check, FdOptions, FdReport, GradVector, Input, LambdaModel, ModelKind, Objective};
use crate::policy::{softmax, Policy};

/// Default hinge margin.
pub const DEFAULT_MARGIN: f64 = 1.0;

/// Per-coordinate running mean and variance (Welford).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WelfordVec {
    pub count: usize,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl WelfordVec {
    pub fn new(len: usize) -> Self {
        WelfordVec {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    /// Chan et al. parallel merge.
    pub fn merge(&mut self, other: &WelfordVec) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.count += other.count;
    }

    /// Unbiased per-coordinate variance; `None` below two samples.
    pub fn variance(&self) -> Option<Vec<f64>> {
        (self.count >= 2).then(|| {
            let d = (self.count - 1) as f64;
            self.m2.iter().map(|s| s / d).collect()
        })
    }
}

/// A gradient together with the scalar it differentiates and the spread of
/// its per-sample contributions.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEstimate {
    pub grad: GradVector,
    pub loss: f64,
    pub stats: WelfordVec,
}

fn check_model_state(model: &LambdaModel, state: StateId) -> Result<()> {
    // linear/mlp take a one-hot of the state id; all kinds need it in range
    if state >= model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: state + 1,
        });
    }
    Ok(())
}

/// Shared loop: per step, `upstream(λ, action) -> (objective term, ∂/∂λ)`
/// scaled by `r(τ)`, accumulated and backpropagated.
fn trajectory_estimate<F>(model: &LambdaModel, traj: &Trajectory, mut term: F) -> Result<GradEstimate>
where
    F: FnMut(&[f64], ActionId) -> (f64, Vec<f64>),
{
    let r = traj.reward();
    let mut grad = GradVector::zeros(model.param_count());
    let mut value = 0.0;
    for step in traj.steps() {
        check_model_state(model, step.state)?;
        let lambda = model.forward(step.state)?;
        if step.action >= lambda.len() {
            return Err(Error::ActionOutOfRange {
                action: step.action,
                count: lambda.len(),
            });
        }
        let (v, mut up) = term(&lambda, step.action);
        value += v * r;
        up.iter_mut().for_each(|u| *u *= r);
        model.backward_into(step.state, &up, &mut grad.values)?;
    }
    grad.count = 1;
    let mut stats = WelfordVec::new(grad.len());
    stats.push(&grad.values);
    Ok(GradEstimate {
        grad,
        loss: value,
        stats,
    })
}

/// Ranking policy gradient estimate for one trajectory:
/// `Σ_t ∇_θ Σ_{j≠i} (λ_i − λ_j)/2 · r(τ)`.
pub fn rpg_trajectory_grad(model: &LambdaModel, traj: &Trajectory) -> Result<GradEstimate> {
    trajectory_estimate(model, traj, |lambda, i| {
        let m = lambda.len();
        let value = lambda
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, lj)| (lambda[i] - lj) / 2.0)
            .sum();
        let mut up = vec![-0.5; m];
        up[i] = (m as f64 - 1.0) / 2.0;
        (value, up)
    })
}

/// Same estimator before the first-order Taylor step:
/// `Σ_t ∇_θ Σ_{j≠i} log σ(λ_i − λ_j) · r(τ)`.
pub fn rpg_exact_grad(model: &LambdaModel, traj: &Trajectory) -> Result<GradEstimate> {
    trajectory_estimate(model, traj, |lambda, i| {
        let mut up = vec![0.0; lambda.len()];
        let mut value = 0.0;
        for j in (0..lambda.len()).filter(|&j| j != i) {
            let x = lambda[i] - lambda[j];
            value += log_sigmoid(x);
            // d/dx log σ(x) = σ(−x)
            let g = crate::model::sigmoid(-x);
            up[i] += g;
            up[j] -= g;
        }
        (value, up)
    })
}

/// Listwise (REINFORCE-with-softmax) estimate:
/// `Σ_t ∇_θ log softmax(λ)_i · r(τ)`.
pub fn lpg_trajectory_grad(model: &LambdaModel, traj: &Trajectory) -> Result<GradEstimate> {
    trajectory_estimate(model, traj, |lambda, i| {
        let p = softmax(lambda, 1.0);
        let mut up: Vec<f64> = p.iter().map(|v| -v).collect();
        up[i] += 1.0;
        (log_softmax_at(lambda, i), up)
    })
}

fn log_sigmoid(x: f64) -> f64 {
    // −softplus(−x)
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

fn log_softmax_at(lambda: &[f64], i: usize) -> f64 {
    let max = lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + lambda.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lambda[i] - lse
}

fn check_batch(model: &LambdaModel, batch: &[(StateId, ActionId)]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    for &(s, a) in batch {
        check_model_state(model, s)?;
        if a >= model.action_count() {
            return Err(Error::ActionOutOfRange {
                action: a,
                count: model.action_count(),
            });
        }
    }
    Ok(())
}

fn supervised_estimate<F>(model: &LambdaModel, batch: &[(StateId, ActionId)], mut term: F) -> Result<GradEstimate>
where
    F: FnMut(&[f64], ActionId) -> (f64, Vec<f64>),
{
    check_batch(model, batch)?;
    let b = batch.len() as f64;
    let mut grad = GradVector::zeros(model.param_count());
    let mut stats = WelfordVec::new(grad.len());
    let mut loss = 0.0;
    let mut sample = vec![0.0; grad.len()];
    for &(s, a) in batch {
        let lambda = model.forward(s)?;
        let (v, up) = term(&lambda, a);
        loss += v;
        sample.iter_mut().for_each(|x| *x = 0.0);
        model.backward_into(s, &up, &mut sample)?;
        stats.push(&sample);
        for (g, x) in grad.values.iter_mut().zip(&sample) {
            *g += x / b;
        }
    }
    grad.count = batch.len();
    Ok(GradEstimate {
        grad,
        loss: loss / b,
        stats,
    })
}

/// Mean over the batch of `Σ_{j≠i} max(0, margin + λ_j − λ_i)`; the
/// subgradient at the kink is 0.
pub fn hinge_loss_and_grad(model: &LambdaModel, batch: &[(StateId, ActionId)], margin: f64) -> Result<GradEstimate> {
    supervised_estimate(model, batch, |lambda, i| {
        let mut up = vec![0.0; lambda.len()];
        let mut v = 0.0;
        for j in (0..lambda.len()).filter(|&j| j != i) {
            let h = margin + lambda[j] - lambda[i];
            if h > 0.0 {
                v += h;
                up[j] += 1.0;
                up[i] -= 1.0;
            }
        }
        (v, up)
    })
}

/// Smallest `|margin + λ_j − λ_i|` over the batch.
pub fn hinge_kink_distance(model: &LambdaModel, batch: &[(StateId, ActionId)], margin: f64) -> f64 {
    let mut best = f64::INFINITY;
    for &(s, i) in batch {
        if let Ok(lambda) = model.forward(s) {
            for j in (0..lambda.len()).filter(|&j| j != i) {
                best = best.min((margin + lambda[j] - lambda[i]).abs());
            }
        }
    }
    best
}

/// Mean negative log-softmax of the target action.
pub fn cross_entropy_loss_and_grad(model: &LambdaModel, batch: &[(StateId, ActionId)]) -> Result<GradEstimate> {
    supervised_estimate(model, batch, |lambda, i| {
        let mut up = softmax(lambda, 1.0);
        up[i] -= 1.0;
        (-log_softmax_at(lambda, i), up)
    })
}

/// `∇_θ log softmax(λ(s))_a`, the per-step score of the listwise policy.
pub fn log_policy_grad(model: &LambdaModel, state: StateId, action: ActionId) -> Result<GradVector> {
    let lambda = model.forward(state)?;
    let mut up: Vec<f64> = softmax(&lambda, 1.0).iter().map(|p| -p).collect();
    up[action] += 1.0;
    model.backward(state, &up)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLikelihoodCheck {
    /// `(1/T) Σ_t log π(a_t|s_t)`
    pub lhs: f64,
    /// `Σ_{(s,a)} p(s,a|τ) log π(a|s)` with in-trajectory frequencies
    pub rhs: f64,
    pub abs_diff: f64,
}

/// Evaluates both sides of the per-trajectory log-likelihood decomposition.
pub fn loglikelihood_decomposition_check<P: Policy + ?Sized>(policy: &P, traj: &Trajectory) -> Result<LogLikelihoodCheck> {
    if traj.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let t = traj.len() as f64;
    let log_pi = |s: StateId, a: ActionId| -> Result<f64> { Ok(policy.action_probs(Input::State(s))?[a].ln()) };
    let mut lhs = 0.0;
    let mut counts: BTreeMap<(StateId, ActionId), usize> = BTreeMap::new();
    for step in traj.steps() {
        lhs += log_pi(step.state, step.action)?;
        *counts.entry((step.state, step.action)).or_default() += 1;
    }
    lhs /= t;
    let mut rhs = 0.0;
    for (&(s, a), &c) in &counts {
        rhs += (c as f64 / t) * log_pi(s, a)?;
    }
    Ok(LogLikelihoodCheck {
        lhs,
        rhs,
        abs_diff: (lhs - rhs).abs(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorKind {
    /// Trajectory policy gradient; bound `T² C² R_max²`.
    PolicyGradient,
    /// Per-sample supervised gradient; bound `C²`.
    Supervised,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceReport {
    pub samples: usize,
    pub per_dim_variance: Vec<f64>,
    pub max_variance: f64,
    pub bound: f64,
    pub within_bound: bool,
}

/// Empirical per-coordinate variance over `estimates` (each contributes its
/// per-sample statistics) against the analytic upper bound.
pub fn grad_variance_report(
    estimates: &[GradEstimate],
    c_hat: f64,
    horizon: usize,
    r_max: f64,
    kind: EstimatorKind,
) -> Result<VarianceReport> {
    let mut acc = WelfordVec::default();
    for e in estimates {
        acc.merge(&e.stats);
    }
    let per_dim_variance = acc.variance().ok_or(Error::InsufficientSamples {
        needed: 2,
        got: acc.count,
    })?;
    let max_variance = per_dim_variance.iter().copied().fold(0.0, f64::max);
    let bound = match kind {
        EstimatorKind::PolicyGradient => (horizon as f64 * c_hat * r_max).powi(2),
        EstimatorKind::Supervised => c_hat * c_hat,
    };
    Ok(VarianceReport {
        samples: acc.count,
        per_dim_variance,
        max_variance,
        bound,
        within_bound: max_variance <= bound,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Rpg,
    RpgExact,
    Lpg,
    Hinge,
    Xent,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Rpg,
        LossKind::RpgExact,
        LossKind::Lpg,
        LossKind::Hinge,
        LossKind::Xent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Rpg => "rpg",
            LossKind::RpgExact => "rpg-exact",
            LossKind::Lpg => "lpg",
            LossKind::Hinge => "hinge",
            LossKind::Xent => "xent",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss '{s}'")))
    }
}

/// Data a [`LossKind`] is evaluated on, packaged as an [`Objective`] for
/// finite-difference checking.
#[derive(Clone, Debug)]
pub enum LossObjective {
    Trajectory { kind: LossKind, traj: Trajectory },
    Hinge { batch: Vec<(StateId, ActionId)>, margin: f64 },
    Xent { batch: Vec<(StateId, ActionId)> },
}

impl LossObjective {
    pub fn estimate(&self, model: &LambdaModel) -> Result<GradEstimate> {
        match self {
            LossObjective::Trajectory { kind, traj } => match kind {
                LossKind::Rpg => rpg_trajectory_grad(model, traj),
                LossKind::RpgExact => rpg_exact_grad(model, traj),
                _ => lpg_trajectory_grad(model, traj),
            },
            LossObjective::Hinge { batch, margin } => hinge_loss_and_grad(model, batch, *margin),
            LossObjective::Xent { batch } => cross_entropy_loss_and_grad(model, batch),
        }
    }
}

impl Objective for LossObjective {
    fn value(&self, model: &LambdaModel) -> f64 {
        self.estimate(model).map(|e| e.loss).unwrap_or(f64::NAN)
    }

    fn gradient(&self, model: &LambdaModel) -> Vec<f64> {
        self.estimate(model)
            .map(|e| e.grad.values)
            .unwrap_or_else(|_| vec![f64::NAN; model.param_count()])
    }

    fn kink_distance(&self, model: &LambdaModel) -> f64 {
        match self {
            LossObjective::Hinge { batch, margin } => hinge_kink_distance(model, batch, *margin),
            _ => f64::INFINITY,
        }
    }
}

/// A random model of `kind` (6 states, 3 actions) with parameters uniform
/// in [−1, 1], and random data for `loss`.
pub fn random_draw<R: Rng + ?Sized>(loss: LossKind, kind: ModelKind, rng: &mut R) -> Result<(LambdaModel, LossObjective)> {
    const STATES: usize = 6;
    const ACTIONS: usize = 3;
    let mut model = match kind {
        ModelKind::Tabular => LambdaModel::tabular(STATES, ACTIONS),
        ModelKind::Linear => LambdaModel::linear(STATES, ACTIONS),
        ModelKind::Mlp => LambdaModel::mlp(&[STATES, 5, ACTIONS])?,
    };
    model.params_mut().iter_mut().for_each(|p| *p = rng.random_range(-1.0..=1.0));
    let objective = match loss {
        LossKind::Hinge | LossKind::Xent => {
            let batch: Vec<_> = (0..8)
                .map(|_| (rng.random_range(0..STATES), rng.random_range(0..ACTIONS)))
                .collect();
            if loss == LossKind::Hinge {
                LossObjective::Hinge {
                    batch,
                    margin: DEFAULT_MARGIN,
                }
            } else {
                LossObjective::Xent { batch }
            }
        }
        _ => LossObjective::Trajectory {
            kind: loss,
            traj: Trajectory::from_steps((0..5).map(|_| Step {
                state: rng.random_range(0..STATES),
                action: rng.random_range(0..ACTIONS),
                reward: rng.random_range(0.1..1.0),
            })),
        },
    };
    Ok((model, objective))
}

/// Finite-difference checks of `loss` on `trials` independent random draws.
pub fn random_gradcheck(loss: LossKind, kind: ModelKind, trials: usize, seed: u64, opts: FdOptions) -> Result<Vec<FdReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| {
            let (model, obj) = random_draw(loss, kind, &mut rng)?;
            Ok(finite_difference_check(&model, &obj, opts))
        })
        .collect()
}
