//! Two-stage off-policy learning: explore, keep trajectories whose reward
//! clears a threshold, and fit the λ-model to them by supervised learning.

mod train;
pub(crate) use train::{clock_start, seconds_since};

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;

pub use train::{
    derive_seed, evaluate, train, train_with, Algorithm, EvalMode, EvalRecord, EvalResult, ExplorerKind, RunLog,
    TrainRunConfig,
};

use crate::envs::{ActionId, EnvState, StateId, Trajectory, TrajectoryKey};
use crate::error::{Error, Result};
use crate::gradients::{cross_entropy_loss_and_grad, hinge_loss_and_grad, GradEstimate};
use crate::model::{sgd_update, LambdaModel, Sgd};
use crate::policy::{greedy, sample_index, softmax};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapingMode {
    Fixed,
    /// One threshold per initial state, raised to the best reward seen from it.
    Adaptive,
}

impl std::str::FromStr for ShapingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(ShapingMode::Fixed),
            "adaptive" => Ok(ShapingMode::Adaptive),
            other => Err(Error::Config(format!("unknown shaping mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for ShapingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShapingMode::Fixed => "fixed",
            ShapingMode::Adaptive => "adaptive",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapingConfig {
    /// `c`; in adaptive mode, the floor every per-root threshold starts at.
    pub threshold: f64,
    pub mode: ShapingMode,
}

/// Trajectory reward shaping `w(τ) = 1 iff r(τ) ≥ c`.
#[derive(Clone, Debug)]
pub struct Shaper {
    config: ShapingConfig,
    per_root: HashMap<StateId, f64>,
}

impl Shaper {
    pub fn new(config: ShapingConfig) -> Self {
        Shaper {
            config,
            per_root: HashMap::new(),
        }
    }

    pub fn config(&self) -> ShapingConfig {
        self.config
    }

    /// Current threshold for trajectories starting at `root`.
    pub fn threshold_for(&self, root: StateId) -> f64 {
        match self.config.mode {
            ShapingMode::Fixed => self.config.threshold,
            ShapingMode::Adaptive => self.per_root.get(&root).copied().unwrap_or(self.config.threshold),
        }
    }

    /// The indicator `w(τ)`. In adaptive mode the root's threshold is first
    /// raised to `max(c(s₁), r(τ))`.
    pub fn shape(&mut self, traj: &Trajectory) -> bool {
        let r = traj.reward();
        match self.config.mode {
            ShapingMode::Fixed => r >= self.config.threshold,
            ShapingMode::Adaptive => {
                let Some(root) = traj.initial_state() else {
                    return false;
                };
                let c = self.per_root.entry(root).or_insert(self.config.threshold);
                *c = c.max(r);
                r >= *c
            }
        }
    }
}

/// `w(τ)` for a fixed threshold.
pub fn shape(traj: &Trajectory, threshold: f64) -> bool {
    traj.reward() >= threshold
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: StateId,
    pub action: ActionId,
    pub reward: f64,
    pub next_state: StateId,
    pub done: bool,
}

/// One supervised target together with the trajectory it was cut from.
#[derive(Clone, Debug)]
pub struct NearOptimalPair {
    pub state: StateId,
    pub action: ActionId,
    pub source: Arc<Trajectory>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BufferCounters {
    pub episodes: usize,
    pub env_steps: usize,
    pub inserts: usize,
}

/// Regular transition FIFO plus the near-optimal (state, action) FIFO.
#[derive(Clone, Debug)]
pub struct ReplayBuffers {
    regular: VecDeque<Transition>,
    regular_capacity: usize,
    near_optimal: VecDeque<NearOptimalPair>,
    near_optimal_capacity: usize,
    keys: BTreeSet<TrajectoryKey>,
    unique_trajectories: bool,
    pub counters: BufferCounters,
}

impl ReplayBuffers {
    pub fn new(regular_capacity: usize, near_optimal_capacity: usize) -> Result<Self> {
        if regular_capacity == 0 || near_optimal_capacity == 0 {
            return Err(Error::Config("buffer capacities must be positive".into()));
        }
        Ok(ReplayBuffers {
            regular: VecDeque::new(),
            regular_capacity,
            near_optimal: VecDeque::new(),
            near_optimal_capacity,
            keys: BTreeSet::new(),
            unique_trajectories: false,
            counters: BufferCounters::default(),
        })
    }

    /// Store each distinct near-optimal trajectory once instead of every
    /// time it is seen.
    pub fn with_unique_trajectories(mut self, on: bool) -> Self {
        self.unique_trajectories = on;
        self
    }

    pub fn push_transition(&mut self, t: Transition) {
        if self.regular.len() == self.regular_capacity {
            self.regular.pop_front();
        }
        self.regular.push_back(t);
        self.counters.env_steps += 1;
    }

    pub fn regular_len(&self) -> usize {
        self.regular.len()
    }

    pub fn near_optimal_len(&self) -> usize {
        self.near_optimal.len()
    }

    pub fn near_optimal(&self) -> impl ExactSizeIterator<Item = &NearOptimalPair> {
        self.near_optimal.iter()
    }

    pub fn distinct_near_optimal(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self) -> &BTreeSet<TrajectoryKey> {
        &self.keys
    }

    /// Rebuilds the last `len` transitions of the regular buffer as a
    /// trajectory.
    pub fn last_episode(&self, len: usize) -> Result<Trajectory> {
        if len > self.regular.len() {
            return Err(Error::InsufficientSamples {
                needed: len,
                got: self.regular.len(),
            });
        }
        let start = self.regular.len() - len;
        let mut traj = Trajectory::new();
        for t in self.regular.range(start..) {
            traj.push(t.state, t.action, t.reward);
        }
        Ok(traj)
    }

    /// Appends every (state, action) of `traj` when `w(τ) = 1`; returns
    /// whether anything was stored.
    pub fn insert_if_near_optimal(&mut self, traj: &Trajectory, shaper: &mut Shaper) -> bool {
        if traj.is_empty() || !shaper.shape(traj) {
            return false;
        }
        let fresh = self.keys.insert(traj.key());
        if self.unique_trajectories && !fresh {
            return false;
        }
        let source = Arc::new(traj.clone());
        for step in traj.steps() {
            if self.near_optimal.len() == self.near_optimal_capacity {
                self.near_optimal.pop_front();
            }
            self.near_optimal.push_back(NearOptimalPair {
                state: step.state,
                action: step.action,
                source: Arc::clone(&source),
            });
        }
        self.counters.inserts += 1;
        true
    }

    /// Uniform draw with replacement of `size` (state, action) targets.
    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Vec<(StateId, ActionId)> {
        if self.near_optimal.is_empty() {
            return Vec::new();
        }
        (0..size)
            .map(|_| {
                let p = &self.near_optimal[rng.random_range(0..self.near_optimal.len())];
                (p.state, p.action)
            })
            .collect()
    }

    /// Every stored target, in insertion order.
    pub fn all_targets(&self) -> Vec<(StateId, ActionId)> {
        self.near_optimal.iter().map(|p| (p.state, p.action)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SupervisedLoss {
    Hinge,
    Xent,
}

impl std::str::FromStr for SupervisedLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(SupervisedLoss::Hinge),
            "xent" => Ok(SupervisedLoss::Xent),
            other => Err(Error::Config(format!("unknown supervised loss '{other}'"))),
        }
    }
}

impl std::fmt::Display for SupervisedLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SupervisedLoss::Hinge => "hinge",
            SupervisedLoss::Xent => "xent",
        })
    }
}

/// Behaviour policy used to collect experience.
#[derive(Clone, Debug)]
pub enum Explorer {
    Random,
    /// ε-greedy over the learner's λ.
    EpsGreedy { eps: f64 },
    /// Separate stochastic listwise agent, fit by cross-entropy to the
    /// near-optimal buffer.
    Epg { model: LambdaModel, learning_rate: f64 },
}

impl Explorer {
    pub fn act<R: Rng + ?Sized>(&self, learner: &LambdaModel, state: StateId, m: usize, rng: &mut R) -> Result<ActionId> {
        Ok(match self {
            Explorer::Random => rng.random_range(0..m),
            Explorer::EpsGreedy { eps } => {
                if rng.random::<f64>() < *eps {
                    rng.random_range(0..m)
                } else {
                    greedy(&learner.forward(state)?)
                }
            }
            Explorer::Epg { model, .. } => sample_index(&softmax(&model.forward(state)?, 1.0), rng),
        })
    }

    /// Cross-entropy step for the EPG agent; a no-op for the others.
    pub fn update<R: Rng + ?Sized>(&mut self, buffers: &ReplayBuffers, batch_size: usize, rng: &mut R) -> Result<()> {
        if let Explorer::Epg { model, learning_rate } = self {
            let batch = buffers.sample_batch(batch_size, rng);
            if !batch.is_empty() {
                let est = cross_entropy_loss_and_grad(model, &batch)?;
                sgd_update(model, &est.grad, *learning_rate)?;
            }
        }
        Ok(())
    }
}

/// Takes one explorer action in `env` and stores the transition.
pub fn explore_step<R: Rng + ?Sized>(
    explorer: &Explorer,
    learner: &LambdaModel,
    env: &mut EnvState,
    buffers: &mut ReplayBuffers,
    rng: &mut R,
) -> Result<Transition> {
    let state = env.state();
    let m = env.spec().actions_at(state);
    let action = explorer.act(learner, state, m, rng)?;
    let out = env.step(action)?;
    let t = Transition {
        state,
        action,
        reward: out.reward,
        next_state: out.next_state,
        done: out.done,
    };
    buffers.push_transition(t);
    Ok(t)
}

/// One SGD step on a uniformly drawn batch of near-optimal targets.
/// `Ok(None)` when the buffer is still empty.
pub fn supervision_update<R: Rng + ?Sized>(
    model: &mut LambdaModel,
    buffers: &ReplayBuffers,
    loss: SupervisedLoss,
    batch_size: usize,
    opt: &mut Sgd,
    margin: f64,
    rng: &mut R,
) -> Result<Option<GradEstimate>> {
    let batch = buffers.sample_batch(batch_size, rng);
    if batch.is_empty() {
        return Ok(None);
    }
    let est = match loss {
        SupervisedLoss::Hinge => hinge_loss_and_grad(model, &batch, margin)?,
        SupervisedLoss::Xent => cross_entropy_loss_and_grad(model, &batch)?,
    };
    opt.step(model, &est.grad)?;
    Ok(Some(est))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PurityAudit {
    pub checked: usize,
    pub violations: usize,
}

/// Samples stored targets and checks that their source trajectory clears
/// `threshold`. On deterministic MDPs the source is replayed through a fresh
/// environment and the replayed reward is used.
pub fn audit_purity<R: Rng + ?Sized>(
    buffers: &ReplayBuffers,
    spec: &Arc<crate::envs::MdpSpec>,
    threshold: f64,
    samples: usize,
    rng: &mut R,
) -> Result<PurityAudit> {
    let pool: Vec<&NearOptimalPair> = buffers.near_optimal().collect();
    let mut audit = PurityAudit {
        checked: 0,
        violations: 0,
    };
    if pool.is_empty() {
        return Ok(audit);
    }
    let deterministic = spec.is_deterministic();
    for _ in 0..samples {
        let pair = pool.choose(rng).expect("nonempty pool");
        let src = &pair.source;
        let on_path = src.steps().iter().any(|s| s.state == pair.state && s.action == pair.action);
        let reward = if deterministic {
            let mut env = EnvState::reset(Arc::clone(spec), 0);
            env.reset_to(src.initial_state().expect("nonempty source"))?;
            let mut replay = Trajectory::new();
            for a in src.actions() {
                let s = env.state();
                let out = env.step(a)?;
                replay.push(s, a, out.reward);
            }
            if replay.key() != src.key() {
                f64::NEG_INFINITY
            } else {
                replay.reward()
            }
        } else {
            src.reward()
        };
        audit.checked += 1;
        if !on_path || reward < threshold {
            audit.violations += 1;
        }
    }
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::envs::{make_binary_tree, BinaryTreeParams, Step};

    fn traj(root: StateId, reward: f64) -> Trajectory {
        Trajectory::from_steps([Step {
            state: root,
            action: 0,
            reward,
        }])
    }

    #[test]
    fn fixed_shaping() {
        assert!(shape(&traj(0, 5.0), 4.0));
        assert!(!shape(&traj(0, 3.0), 4.0));
        assert!(shape(&traj(0, 4.0), 4.0));
    }

    #[test]
    fn adaptive_shaping_tracks_each_root() {
        // two roots: best reachable 10 from one, 3 from the other
        let mut s = Shaper::new(ShapingConfig {
            threshold: 0.0,
            mode: ShapingMode::Adaptive,
        });
        assert!(s.shape(&traj(0, 10.0)));
        assert!(!s.shape(&traj(0, 2.0)));
        assert!(s.shape(&traj(1, 2.0)));
        assert!(s.shape(&traj(1, 3.0)));
        assert!(!s.shape(&traj(1, 2.0)));
        assert_eq!(s.threshold_for(1), 3.0);
        assert_eq!(s.threshold_for(0), 10.0);
        // a fixed c = R_max would never accept anything from the second root
        let mut f = Shaper::new(ShapingConfig {
            threshold: 10.0,
            mode: ShapingMode::Fixed,
        });
        assert!(!f.shape(&traj(1, 3.0)));
    }

    #[test]
    fn insert_bookkeeping() {
        let spec = make_binary_tree(&BinaryTreeParams::single_optimal(3, 5)).unwrap();
        let r_max = spec.max_trajectory_reward().unwrap();
        let mut shaper = Shaper::new(ShapingConfig {
            threshold: r_max,
            mode: ShapingMode::Fixed,
        });
        let mut env = EnvState::reset(Arc::new(spec), 0);
        let best = env.rollout(|_| Ok(0)).unwrap();
        let mut b = ReplayBuffers::new(100, 100).unwrap();
        assert!(!b.insert_if_near_optimal(&best, &mut shaper));
        assert_eq!(b.near_optimal_len(), 0);

        env.reset_episode();
        let leaf5 = [1, 0, 1];
        let mut i = 0;
        let opt = env
            .rollout(|_| {
                i += 1;
                Ok(leaf5[i - 1])
            })
            .unwrap();
        assert!(b.insert_if_near_optimal(&opt, &mut shaper));
        assert_eq!((b.near_optimal_len(), b.distinct_near_optimal()), (3, 1));
        assert!(b.insert_if_near_optimal(&opt, &mut shaper));
        assert_eq!((b.near_optimal_len(), b.distinct_near_optimal()), (6, 1));

        let mut u = ReplayBuffers::new(100, 100).unwrap().with_unique_trajectories(true);
        u.insert_if_near_optimal(&opt, &mut shaper);
        assert!(!u.insert_if_near_optimal(&opt, &mut shaper));
        assert_eq!(u.near_optimal_len(), 3);
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffers::new(2, 2).unwrap();
        for s in 0..3 {
            b.push_transition(Transition {
                state: s,
                action: 0,
                reward: 1.0,
                next_state: s + 1,
                done: false,
            });
        }
        assert_eq!(b.regular_len(), 2);
        assert_eq!(b.last_episode(2).unwrap().steps()[0].state, 1);
        assert!(b.last_episode(3).is_err());
        let mut shaper = Shaper::new(ShapingConfig {
            threshold: 0.0,
            mode: ShapingMode::Fixed,
        });
        let t = Trajectory::from_steps((0..3).map(|s| Step {
            state: s,
            action: 1,
            reward: 1.0,
        }));
        b.insert_if_near_optimal(&t, &mut shaper);
        assert_eq!(b.all_targets(), vec![(1, 1), (2, 1)]);
    }

    #[test]
    fn random_explorer_is_uniform() {
        let spec = Arc::new(make_binary_tree(&BinaryTreeParams::single_optimal(4, 0)).unwrap());
        let mut env = EnvState::reset(Arc::clone(&spec), 3);
        let mut b = ReplayBuffers::new(16, 16).unwrap();
        let learner = LambdaModel::tabular(spec.state_count(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut ones = 0;
        for _ in 0..n {
            if env.is_done() {
                env.reset_episode();
            }
            ones += explore_step(&Explorer::Random, &learner, &mut env, &mut b, &mut rng).unwrap().action;
        }
        let f = ones as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.01, "{f}");
        assert_eq!(b.counters.env_steps, n);
    }

    #[test]
    fn eps_greedy_extremes() {
        let mut learner = LambdaModel::tabular(1, 3);
        learner.params_mut().copy_from_slice(&[0.0, 1.0, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Explorer::EpsGreedy { eps: 0.0 };
        assert!((0..100).all(|_| g.act(&learner, 0, 3, &mut rng).unwrap() == 1));
        let r = Explorer::EpsGreedy { eps: 1.0 };
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[r.act(&learner, 0, 3, &mut rng).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| (c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.01));
    }

    #[test]
    fn supervision_fits_single_target() {
        let mut b = ReplayBuffers::new(4, 4).unwrap();
        let mut shaper = Shaper::new(ShapingConfig {
            threshold: 0.0,
            mode: ShapingMode::Fixed,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = LambdaModel::tabular(1, 3);
        let mut opt = Sgd::new(0.1);
        assert!(supervision_update(&mut model, &b, SupervisedLoss::Hinge, 8, &mut opt, 1.0, &mut rng)
            .unwrap()
            .is_none());
        b.insert_if_near_optimal(
            &Trajectory::from_steps([Step {
                state: 0,
                action: 2,
                reward: 1.0,
            }]),
            &mut shaper,
        );
        for _ in 0..20 {
            supervision_update(&mut model, &b, SupervisedLoss::Hinge, 8, &mut opt, 1.0, &mut rng).unwrap();
        }
        assert_eq!(greedy(&model.forward(0).unwrap()), 2);
    }

    #[test]
    fn full_batch_descent_is_monotone() {
        let targets = vec![(0, 1), (1, 0), (2, 1), (3, 0)];
        let mut model = LambdaModel::tabular(4, 2).init_uniform(&mut ChaCha8Rng::seed_from_u64(9));
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let est = hinge_loss_and_grad(&model, &targets, 1.0).unwrap();
            assert!(est.loss <= prev);
            prev = est.loss;
            sgd_update(&mut model, &est.grad, 1e-2).unwrap();
        }
        let mut model = LambdaModel::tabular(4, 2).init_uniform(&mut ChaCha8Rng::seed_from_u64(9));
        let mut prev = 0.0;
        for _ in 0..50 {
            let p: f64 = targets
                .iter()
                .map(|&(s, a)| softmax(&model.forward(s).unwrap(), 1.0)[a])
                .product();
            assert!(p > prev);
            prev = p;
            let est = cross_entropy_loss_and_grad(&model, &targets).unwrap();
            sgd_update(&mut model, &est.grad, 1e-2).unwrap();
        }
    }
}
