//! Finite-horizon discrete MDPs, episode cursors, and trajectories.
//!
//! States and actions are dense integer ids. Every environment in the suite
//! is described by an immutable [`MdpSpec`]; an [`EnvState`] owns its own
//! seeded generator and walks one episode at a time.

mod suite;
mod tree;

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use suite::{make_chain, make_grid, parse_env, ChainParams, GridParams};
pub use tree::{make_binary_tree, BinaryTreeParams, TreeLayout, DEFAULT_STEP_REWARD};

pub type StateId = usize;
pub type ActionId = usize;

/// Default number of trajectories [`enumerate_trajectories`] will produce
/// before giving up.
pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

const ROW_TOLERANCE: f64 = 1e-12;

/// Immutable description of a finite-horizon discrete MDP.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpSpec {
    state_count: usize,
    action_count: usize,
    horizon: usize,
    initial: Vec<(StateId, f64)>,
    actions_at: Vec<usize>,
    transitions: Vec<Vec<Vec<(StateId, f64)>>>,
    rewards: Vec<Vec<f64>>,
    terminal: Vec<bool>,
}

impl MdpSpec {
    pub fn builder(state_count: usize, action_count: usize, horizon: usize) -> MdpBuilder {
        MdpBuilder {
            state_count,
            action_count,
            horizon,
            initial: Vec::new(),
            actions_at: vec![action_count; state_count],
            transitions: vec![vec![Vec::new(); action_count]; state_count],
            rewards: vec![vec![f64::NAN; action_count]; state_count],
            terminal: vec![false; state_count],
        }
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    /// Maximum action count across states (`m`).
    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn initial_distribution(&self) -> &[(StateId, f64)] {
        &self.initial
    }

    pub fn actions_at(&self, state: StateId) -> usize {
        self.actions_at[state]
    }

    pub fn transition_row(&self, state: StateId, action: ActionId) -> &[(StateId, f64)] {
        &self.transitions[state][action]
    }

    pub fn reward(&self, state: StateId, action: ActionId) -> f64 {
        self.rewards[state][action]
    }

    pub fn is_terminal(&self, state: StateId) -> bool {
        self.terminal[state]
    }

    /// True when every transition row and the initial distribution put all
    /// mass on a single successor.
    pub fn is_deterministic(&self) -> bool {
        let rows_det = self
            .transitions
            .iter()
            .flatten()
            .all(|row| row.iter().all(|&(_, p)| p == 0.0 || p == 1.0));
        rows_det && self.initial.iter().all(|&(_, p)| p == 0.0 || p == 1.0)
    }

    /// Largest trajectory reward over the full enumeration.
    pub fn max_trajectory_reward(&self) -> Result<f64> {
        let all = enumerate_trajectories(self, DEFAULT_ENUMERATION_CAP)?;
        Ok(all
            .iter()
            .map(|(t, _)| t.reward())
            .fold(f64::NEG_INFINITY, f64::max))
    }
}

#[derive(Clone, Debug)]
pub struct MdpBuilder {
    state_count: usize,
    action_count: usize,
    horizon: usize,
    initial: Vec<(StateId, f64)>,
    actions_at: Vec<usize>,
    transitions: Vec<Vec<Vec<(StateId, f64)>>>,
    rewards: Vec<Vec<f64>>,
    terminal: Vec<bool>,
}

impl MdpBuilder {
    pub fn initial(mut self, dist: Vec<(StateId, f64)>) -> Self {
        self.initial = dist;
        self
    }

    pub fn transition(mut self, state: StateId, action: ActionId, row: Vec<(StateId, f64)>) -> Self {
        if state < self.state_count && action < self.action_count {
            self.transitions[state][action] = row;
        }
        self
    }

    pub fn reward(mut self, state: StateId, action: ActionId, reward: f64) -> Self {
        if state < self.state_count && action < self.action_count {
            self.rewards[state][action] = reward;
        }
        self
    }

    pub fn terminal(mut self, state: StateId) -> Self {
        if state < self.state_count {
            self.terminal[state] = true;
        }
        self
    }

    /// Restricts `state` to actions `0..count`.
    pub fn actions_at(mut self, state: StateId, count: usize) -> Self {
        if state < self.state_count {
            self.actions_at[state] = count;
        }
        self
    }

    pub fn build(self) -> Result<MdpSpec> {
        let invalid = |msg: String| Err(Error::InvalidSpec(msg));
        if self.state_count == 0 {
            return invalid("state_count must be positive".into());
        }
        if self.action_count < 2 {
            return invalid(format!("action_count must be >= 2, got {}", self.action_count));
        }
        if self.horizon == 0 {
            return invalid("horizon must be >= 1".into());
        }
        if self.initial.is_empty() {
            return invalid("initial state set is empty".into());
        }
        check_row(&self.initial, self.state_count).map_err(|e| {
            Error::InvalidSpec(format!("initial distribution: {e}"))
        })?;
        let mut max_actions = 0;
        for s in 0..self.state_count {
            let n = self.actions_at[s];
            if n > self.action_count {
                return invalid(format!("state {s} has {n} actions, more than m={}", self.action_count));
            }
            if self.terminal[s] {
                continue;
            }
            if n == 0 {
                return invalid(format!("non-terminal state {s} has no actions"));
            }
            max_actions = max_actions.max(n);
            for a in 0..n {
                check_row(&self.transitions[s][a], self.state_count)
                    .map_err(|e| Error::InvalidSpec(format!("row ({s},{a}): {e}")))?;
                let r = self.rewards[s][a];
                if !(r > 0.0 && r.is_finite()) {
                    return invalid(format!("reward ({s},{a}) = {r} must be finite and > 0"));
                }
            }
        }
        if max_actions != self.action_count {
            return invalid(format!(
                "m={} but no state exposes that many actions (max {max_actions})",
                self.action_count
            ));
        }
        Ok(MdpSpec {
            state_count: self.state_count,
            action_count: self.action_count,
            horizon: self.horizon,
            initial: self.initial,
            actions_at: self.actions_at,
            transitions: self.transitions,
            rewards: self.rewards,
            terminal: self.terminal,
        })
    }
}

fn check_row(row: &[(StateId, f64)], state_count: usize) -> std::result::Result<(), String> {
    if row.is_empty() {
        return Err("empty distribution".into());
    }
    let mut total = 0.0;
    for &(s, p) in row {
        if s >= state_count {
            return Err(format!("successor {s} out of range"));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(format!("probability {p} outside [0,1]"));
        }
        total += p;
    }
    if (total - 1.0).abs() > ROW_TOLERANCE {
        return Err(format!("sums to {total}"));
    }
    Ok(())
}

fn sample_row<R: Rng + ?Sized>(row: &[(StateId, f64)], rng: &mut R) -> StateId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(s, p) in row {
        acc += p;
        if u < acc {
            return s;
        }
    }
    // rounding left u above the accumulated mass; take the last supported state
    row.iter().rev().find(|&&(_, p)| p > 0.0).map(|&(s, _)| s).unwrap_or(row[0].0)
}

/// Outcome of one environment transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: StateId,
    pub reward: f64,
    pub done: bool,
}

/// Episode cursor over a shared [`MdpSpec`].
#[derive(Clone, Debug)]
pub struct EnvState {
    spec: Arc<MdpSpec>,
    rng: ChaCha8Rng,
    state: StateId,
    t: usize,
    done: bool,
}

impl EnvState {
    /// Creates a cursor with its own generator and draws the first initial state.
    pub fn reset(spec: Arc<MdpSpec>, seed: u64) -> Self {
        let mut env = EnvState {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: 0,
            t: 0,
            done: false,
        };
        env.reset_episode();
        env
    }

    /// Starts a new episode, continuing the cursor's random stream.
    pub fn reset_episode(&mut self) -> StateId {
        self.state = sample_row(&self.spec.initial, &mut self.rng);
        self.t = 0;
        self.done = self.spec.is_terminal(self.state);
        self.state
    }

    /// Starts a new episode from a fixed initial state.
    pub fn reset_to(&mut self, state: StateId) -> Result<StateId> {
        if state >= self.spec.state_count {
            return Err(Error::InvalidParameter(format!("state {state} out of range")));
        }
        self.state = state;
        self.t = 0;
        self.done = self.spec.is_terminal(state);
        Ok(state)
    }

    pub fn spec(&self) -> &Arc<MdpSpec> {
        &self.spec
    }

    pub fn state(&self) -> StateId {
        self.state
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn step(&mut self, action: ActionId) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let count = self.spec.actions_at(self.state);
        if action >= count {
            return Err(Error::ActionOutOfRange { action, count });
        }
        let reward = self.spec.reward(self.state, action);
        let next = sample_row(self.spec.transition_row(self.state, action), &mut self.rng);
        self.state = next;
        self.t += 1;
        self.done = self.spec.is_terminal(next) || self.t >= self.spec.horizon;
        Ok(StepOutcome {
            next_state: next,
            reward,
            done: self.done,
        })
    }

    /// Runs one full episode from the current state, choosing actions with `policy`.
    pub fn rollout<F>(&mut self, mut policy: F) -> Result<Trajectory>
    where
        F: FnMut(StateId) -> Result<ActionId>,
    {
        let mut traj = Trajectory::new();
        while !self.done {
            let s = self.state;
            let a = policy(s)?;
            let out = self.step(a)?;
            traj.push(s, a, out.reward);
        }
        Ok(traj)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub state: StateId,
    pub action: ActionId,
    pub reward: f64,
}

/// Canonical byte encoding of a trajectory's (state, action) sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrajectoryKey(Vec<u8>);

impl TrajectoryKey {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Display for TrajectoryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for chunk in self.0.chunks_exact(8) {
            let s = u32::from_le_bytes(chunk[..4].try_into().unwrap());
            let a = u32::from_le_bytes(chunk[4..].try_into().unwrap());
            write!(f, "({s},{a})")?;
        }
        Ok(())
    }
}

/// Ordered (state, action, reward) triples plus their summed reward.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    steps: Vec<Step>,
    reward: f64,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_steps(steps: impl IntoIterator<Item = Step>) -> Self {
        let mut traj = Trajectory::new();
        for s in steps {
            traj.push(s.state, s.action, s.reward);
        }
        traj
    }

    pub fn push(&mut self, state: StateId, action: ActionId, reward: f64) {
        self.steps.push(Step { state, action, reward });
        self.reward += reward;
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `r(τ)`, the sum of step rewards.
    pub fn reward(&self) -> f64 {
        self.reward
    }

    pub fn initial_state(&self) -> Option<StateId> {
        self.steps.first().map(|s| s.state)
    }

    pub fn actions(&self) -> impl Iterator<Item = ActionId> + '_ {
        self.steps.iter().map(|s| s.action)
    }

    /// (state, action) pairs as little-endian u32s, concatenated.
    pub fn key(&self) -> TrajectoryKey {
        let mut bytes = Vec::with_capacity(self.steps.len() * 8);
        for s in &self.steps {
            bytes.extend_from_slice(&(s.state as u32).to_le_bytes());
            bytes.extend_from_slice(&(s.action as u32).to_le_bytes());
        }
        TrajectoryKey(bytes)
    }
}

/// All trajectories of `spec` with their dynamics probability
/// `p_d(τ) = p(s₁) Π p(s_{t+1} | s_t, a_t)`.
pub fn enumerate_trajectories(spec: &MdpSpec, cap: usize) -> Result<Vec<(Trajectory, f64)>> {
    let mut out = Vec::new();
    let mut path = Trajectory::new();
    for &(s0, p0) in &spec.initial {
        if p0 == 0.0 {
            continue;
        }
        if spec.is_terminal(s0) {
            push_capped(&mut out, (Trajectory::new(), p0), cap)?;
            continue;
        }
        expand(spec, s0, 0, p0, &mut path, &mut out, cap)?;
    }
    Ok(out)
}

fn push_capped(out: &mut Vec<(Trajectory, f64)>, item: (Trajectory, f64), cap: usize) -> Result<()> {
    if out.len() >= cap {
        return Err(Error::EnumerationCap { cap });
    }
    out.push(item);
    Ok(())
}

fn expand(
    spec: &MdpSpec,
    state: StateId,
    t: usize,
    prob: f64,
    path: &mut Trajectory,
    out: &mut Vec<(Trajectory, f64)>,
    cap: usize,
) -> Result<()> {
    for a in 0..spec.actions_at(state) {
        let reward = spec.reward(state, a);
        for &(next, p) in spec.transition_row(state, a) {
            if p == 0.0 {
                continue;
            }
            path.push(state, a, reward);
            let done = spec.is_terminal(next) || t + 1 >= spec.horizon;
            if done {
                push_capped(out, (path.clone(), prob * p), cap)?;
            } else {
                expand(spec, next, t + 1, prob * p, path, out, cap)?;
            }
            path.steps.pop();
            path.reward = path.steps.iter().map(|s| s.reward).sum();
        }
    }
    Ok(())
}

/// Number of distinct keys in a trajectory collection.
pub fn distinct_count<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> usize {
    trajs.into_iter().map(Trajectory::key).collect::<HashSet<_>>().len()
}
