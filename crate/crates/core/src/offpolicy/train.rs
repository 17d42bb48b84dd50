use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    audit_purity, explore_step, supervision_update, Explorer, PurityAudit, ReplayBuffers, Shaper, ShapingConfig,
    ShapingMode, SupervisedLoss,
};
use crate::envs::{EnvState, MdpSpec};
use crate::error::{Error, Result};
use crate::model::{LambdaModel, ModelKind, Sgd};
use crate::policy::{select_action, ListwisePolicy, PairwisePolicy, Policy, PolicyKind, SelectMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    /// Hinge loss on the near-optimal buffer, random explorer.
    Rpg,
    /// Cross-entropy on the near-optimal buffer, random explorer.
    Lpg,
    /// Cross-entropy, with a separate stochastic listwise explorer.
    Epg,
    /// On-policy REINFORCE with a softmax policy; no buffers.
    Reinforce,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Rpg => "rpg",
            Algorithm::Lpg => "lpg",
            Algorithm::Epg => "epg",
            Algorithm::Reinforce => "reinforce",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Algorithm::Rpg, Algorithm::Lpg, Algorithm::Epg, Algorithm::Reinforce]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm '{s}'")))
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExplorerKind {
    Random,
    EpsGreedy,
    Epg,
}

impl std::str::FromStr for ExplorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(ExplorerKind::Random),
            "eps-greedy" => Ok(ExplorerKind::EpsGreedy),
            "epg" => Ok(ExplorerKind::Epg),
            other => Err(Error::Config(format!("unknown explorer '{other}'"))),
        }
    }
}

impl std::fmt::Display for ExplorerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExplorerKind::Random => "random",
            ExplorerKind::EpsGreedy => "eps-greedy",
            ExplorerKind::Epg => "epg",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Greedy,
    Sample,
}

impl EvalMode {
    fn select_mode(self) -> SelectMode {
        match self {
            EvalMode::Greedy => SelectMode::Greedy,
            EvalMode::Sample => SelectMode::Sample,
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(EvalMode::Greedy),
            "sample" => Ok(EvalMode::Sample),
            other => Err(Error::Config(format!("unknown eval mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Greedy => "greedy",
            EvalMode::Sample => "sample",
        })
    }
}

/// Everything a training run needs besides the MDP itself.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub env: String,
    pub algorithm: Algorithm,
    pub loss: SupervisedLoss,
    pub explorer: ExplorerKind,
    pub eps: f64,
    pub model: ModelKind,
    /// Hidden layer widths for the MLP.
    pub hidden: Vec<usize>,
    pub c_q: Option<f64>,
    pub policy: PolicyKind,
    pub dummy_action: bool,
    pub temperature: f64,
    pub max_episodes: usize,
    /// Budget on training environment steps.
    pub max_steps: usize,
    pub batch_size: usize,
    pub update_period: usize,
    pub eval_period: usize,
    pub eval_episodes: usize,
    pub eval_mode: EvalMode,
    pub seed: u64,
    pub learning_rate: f64,
    pub explorer_learning_rate: f64,
    pub momentum: f64,
    pub margin: f64,
    pub regular_capacity: usize,
    pub nearopt_capacity: usize,
    pub unique_trajectories: bool,
    /// `c`; defaults to `R_max − epsilon` computed by enumeration.
    pub threshold: Option<f64>,
    pub epsilon: f64,
    pub shaping: ShapingMode,
    /// Stop once every evaluation episode reaches this; defaults to `c`.
    pub target: Option<f64>,
    pub audit_samples: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            env: "tree:T=4,roots=1,opt=0".into(),
            algorithm: Algorithm::Rpg,
            loss: SupervisedLoss::Hinge,
            explorer: ExplorerKind::Random,
            eps: 0.1,
            model: ModelKind::Tabular,
            hidden: vec![16],
            c_q: None,
            policy: PolicyKind::Pairwise,
            dummy_action: false,
            temperature: 1.0,
            max_episodes: 100_000,
            max_steps: 50_000,
            batch_size: 32,
            update_period: 4,
            eval_period: 100,
            eval_episodes: 20,
            eval_mode: EvalMode::Greedy,
            seed: 0,
            learning_rate: 1e-2,
            explorer_learning_rate: 1e-2,
            momentum: 0.0,
            margin: 1.0,
            regular_capacity: 100_000,
            nearopt_capacity: 100_000,
            unique_trajectories: false,
            threshold: None,
            epsilon: 0.0,
            shaping: ShapingMode::Fixed,
            target: None,
            audit_samples: 100,
        }
    }
}

impl TrainRunConfig {
    /// Default config with the loss, explorer, policy and evaluation mode that
    /// go with `algorithm`.
    pub fn preset(algorithm: Algorithm) -> Self {
        let mut cfg = TrainRunConfig::default();
        cfg.apply_preset(algorithm);
        cfg
    }

    pub fn apply_preset(&mut self, algorithm: Algorithm) {
        self.algorithm = algorithm;
        let (loss, explorer, policy, eval) = match algorithm {
            Algorithm::Rpg => (SupervisedLoss::Hinge, ExplorerKind::Random, PolicyKind::Pairwise, EvalMode::Greedy),
            Algorithm::Lpg => (SupervisedLoss::Xent, ExplorerKind::Random, PolicyKind::Listwise, EvalMode::Greedy),
            Algorithm::Epg => (SupervisedLoss::Xent, ExplorerKind::Epg, PolicyKind::Listwise, EvalMode::Sample),
            Algorithm::Reinforce => (SupervisedLoss::Xent, ExplorerKind::Random, PolicyKind::Listwise, EvalMode::Greedy),
        };
        self.loss = loss;
        self.explorer = explorer;
        self.policy = policy;
        self.eval_mode = eval;
    }

    pub fn validate(&self, spec: &MdpSpec) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.batch_size == 0 || self.update_period == 0 || self.eval_period == 0 || self.eval_episodes == 0 {
            return bad("batch_size, update_period, eval_period and eval_episodes must be positive");
        }
        if self.regular_capacity < spec.horizon() {
            return bad("regular_capacity must hold at least one full episode (>= horizon)");
        }
        if self.nearopt_capacity == 0 {
            return bad("nearopt_capacity must be positive");
        }
        if !(0.0..=1.0).contains(&self.eps) {
            return bad("eps must lie in [0, 1]");
        }
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.learning_rate) || !finite_nonneg(self.explorer_learning_rate) {
            return bad("learning rates must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !self.margin.is_finite() || !finite_nonneg(self.epsilon) {
            return bad("margin and epsilon must be finite (epsilon >= 0)");
        }
        if let Some(c) = self.c_q {
            if !(c.is_finite() && c > 0.0) {
                return bad("c_q must be positive");
            }
        }
        if self.threshold.is_some_and(|c| !c.is_finite()) || self.target.is_some_and(|t| !t.is_finite()) {
            return bad("threshold and target must be finite");
        }
        if self.model == ModelKind::Mlp && self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }

    /// Untrained model shaped for `spec`.
    pub fn build_model(&self, spec: &MdpSpec) -> Result<LambdaModel> {
        let (n, m) = (spec.state_count(), spec.action_count());
        let model = match self.model {
            ModelKind::Tabular => LambdaModel::tabular(n, m),
            ModelKind::Linear => LambdaModel::linear(n, m),
            ModelKind::Mlp => {
                let mut layers = vec![n];
                layers.extend(&self.hidden);
                layers.push(m);
                LambdaModel::mlp(&layers)?
            }
        };
        Ok(match self.c_q {
            Some(c) => model.with_squash(c),
            None => model,
        })
    }

    /// Policy view over `model` as configured.
    pub fn policy_for(&self, model: LambdaModel) -> Box<dyn Policy + Send + Sync> {
        match self.policy {
            PolicyKind::Pairwise => Box::new(PairwisePolicy::new(model, self.dummy_action)),
            PolicyKind::Listwise => Box::new(ListwisePolicy::new(model).with_temperature(self.temperature)),
        }
    }

    /// `(c, target)` for `spec`.
    pub fn resolve_threshold(&self, spec: &MdpSpec) -> Result<(f64, f64)> {
        let c = match self.threshold {
            Some(c) => c,
            None => {
                spec.max_trajectory_reward()
                    .map_err(|e| Error::Config(format!("threshold not set and R_max unavailable: {e}")))?
                    - self.epsilon
            }
        };
        Ok((c, self.target.unwrap_or(c)))
    }
}

/// Start of a wall-clock measurement; `None` on targets without a clock.
pub(crate) fn clock_start() -> Option<std::time::Instant> {
    (!cfg!(target_arch = "wasm32")).then(std::time::Instant::now)
}

pub(crate) fn seconds_since(start: Option<std::time::Instant>) -> f64 {
    start.map_or(0.0, |t| t.elapsed().as_secs_f64())
}

/// Independent stream `stream` derived from a run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_INIT: u64 = 1;
const STREAM_ENV: u64 = 2;
const STREAM_EXPLORE: u64 = 3;
const STREAM_BATCH: u64 = 4;
const STREAM_EVAL: u64 = 5;
const STREAM_AUDIT: u64 = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub steps: usize,
}

/// Rolls out `policy` for `episodes` episodes (greedy by default) and
/// reports exact per-episode trajectory rewards.
pub fn evaluate<P: Policy + ?Sized>(
    policy: &P,
    spec: &Arc<MdpSpec>,
    episodes: usize,
    mode: SelectMode,
    seed: u64,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::InvalidParameter("evaluation needs at least one episode".into()));
    }
    let mut env = EnvState::reset(Arc::clone(spec), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut returns = Vec::with_capacity(episodes);
    let mut steps = 0;
    for e in 0..episodes {
        if e > 0 {
            env.reset_episode();
        }
        let traj = env.rollout(|s| select_action(policy, s.into(), mode, &mut rng))?;
        steps += traj.len();
        returns.push(traj.reward());
    }
    let mean = returns.iter().sum::<f64>() / episodes as f64;
    let min = returns.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(EvalResult {
        returns,
        mean,
        min,
        steps,
    })
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    /// Training environment steps so far.
    pub step: usize,
    pub episode: usize,
    /// Training plus evaluation environment steps.
    pub env_steps: usize,
    pub eval_return_mean: f64,
    pub eval_return_min: f64,
    pub buffer_regular: usize,
    pub buffer_nearopt: usize,
    pub distinct_nearopt: usize,
    pub loss: Option<f64>,
    pub grad_inf_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub config: TrainRunConfig,
    pub seed: u64,
    pub threshold: f64,
    pub target: f64,
    pub records: Vec<EvalRecord>,
    pub episodes: usize,
    pub train_steps: usize,
    /// 1-based episode whose trajectory was the first near-optimal insert.
    pub first_insert_episode: Option<usize>,
    /// Distinct near-optimal trajectories after each episode.
    pub distinct_by_episode: Vec<usize>,
    pub converged_at_step: Option<usize>,
    pub audit: Option<PurityAudit>,
    pub wall_clock_secs: f64,
    pub checkpoint_path: Option<std::path::PathBuf>,
}

impl RunLog {
    pub(crate) fn new(config: &TrainRunConfig, threshold: f64, target: f64) -> Self {
        RunLog {
            config: config.clone(),
            seed: config.seed,
            threshold,
            target,
            records: Vec::new(),
            episodes: 0,
            train_steps: 0,
            first_insert_episode: None,
            distinct_by_episode: Vec::new(),
            converged_at_step: None,
            audit: None,
            wall_clock_secs: 0.0,
            checkpoint_path: None,
        }
    }

    pub fn final_record(&self) -> Option<&EvalRecord> {
        self.records.last()
    }
}

/// Runs the explore/filter/imitate loop and returns its metrics.
pub fn train(cfg: &TrainRunConfig, spec: Arc<MdpSpec>) -> Result<RunLog> {
    train_with(cfg, spec, |_, _| Ok(())).map(|(log, _)| log)
}

/// [`train`] with a callback after every evaluation; also returns the
/// final model.
pub fn train_with<F>(cfg: &TrainRunConfig, spec: Arc<MdpSpec>, mut on_eval: F) -> Result<(RunLog, LambdaModel)>
where
    F: FnMut(&EvalRecord, &LambdaModel) -> Result<()>,
{
    cfg.validate(&spec)?;
    if cfg.algorithm == Algorithm::Reinforce {
        return crate::harness::onpolicy_reinforce_with(cfg, spec, on_eval);
    }
    let started = clock_start();
    let (c, target) = cfg.resolve_threshold(&spec)?;
    let mut log = RunLog::new(cfg, c, target);

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INIT));
    let mut model = cfg.build_model(&spec)?.init_uniform(&mut init_rng);
    let mut explorer = match cfg.explorer {
        ExplorerKind::Random => Explorer::Random,
        ExplorerKind::EpsGreedy => Explorer::EpsGreedy { eps: cfg.eps },
        ExplorerKind::Epg => Explorer::Epg {
            model: fresh_like(&model, &mut init_rng),
            learning_rate: cfg.explorer_learning_rate,
        },
    };
    let mut opt = Sgd::new(cfg.learning_rate).with_momentum(cfg.momentum);
    let mut buffers = ReplayBuffers::new(cfg.regular_capacity, cfg.nearopt_capacity)?
        .with_unique_trajectories(cfg.unique_trajectories);
    let mut shaper = Shaper::new(ShapingConfig {
        threshold: c,
        mode: cfg.shaping,
    });
    let mut env = EnvState::reset(Arc::clone(&spec), derive_seed(cfg.seed, STREAM_ENV));
    let mut explore_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EXPLORE));
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_BATCH));
    let mut eval_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EVAL));

    let mut steps = 0usize;
    let mut eval_steps = 0usize;
    let mut last_loss = None;
    let mut last_norm = None;
    'episodes: while log.episodes < cfg.max_episodes && steps < cfg.max_steps {
        if log.episodes > 0 {
            env.reset_episode();
        }
        let mut ep_len = 0;
        loop {
            let t = explore_step(&explorer, &model, &mut env, &mut buffers, &mut explore_rng)?;
            steps += 1;
            ep_len += 1;
            if steps.is_multiple_of(cfg.update_period) {
                let est = supervision_update(
                    &mut model,
                    &buffers,
                    cfg.loss,
                    cfg.batch_size,
                    &mut opt,
                    cfg.margin,
                    &mut batch_rng,
                )?;
                if let Some(est) = est {
                    last_loss = Some(est.loss);
                    last_norm = Some(est.grad.inf_norm());
                }
                explorer.update(&buffers, cfg.batch_size, &mut batch_rng)?;
            }
            if steps.is_multiple_of(cfg.eval_period) {
                let policy = cfg.policy_for(model.clone());
                let res = evaluate(
                    policy.as_ref(),
                    &spec,
                    cfg.eval_episodes,
                    cfg.eval_mode.select_mode(),
                    eval_rng.next_u64(),
                )?;
                eval_steps += res.steps;
                let record = EvalRecord {
                    step: steps,
                    episode: log.episodes,
                    env_steps: steps + eval_steps,
                    eval_return_mean: res.mean,
                    eval_return_min: res.min,
                    buffer_regular: buffers.regular_len(),
                    buffer_nearopt: buffers.near_optimal_len(),
                    distinct_nearopt: buffers.distinct_near_optimal(),
                    loss: last_loss,
                    grad_inf_norm: last_norm,
                };
                on_eval(&record, &model)?;
                log.records.push(record);
                if res.min >= target {
                    log.converged_at_step = Some(steps);
                    break 'episodes;
                }
            }
            if t.done || steps >= cfg.max_steps {
                break;
            }
        }
        log.episodes += 1;
        if env.is_done() {
            let traj = buffers.last_episode(ep_len)?;
            if buffers.insert_if_near_optimal(&traj, &mut shaper) && log.first_insert_episode.is_none() {
                log.first_insert_episode = Some(log.episodes);
            }
        }
        log.distinct_by_episode.push(buffers.distinct_near_optimal());
    }
    log.train_steps = steps;
    if cfg.audit_samples > 0 {
        let mut audit_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_AUDIT));
        let floor = if cfg.shaping == ShapingMode::Fixed {
            c
        } else {
            f64::NEG_INFINITY
        };
        log.audit = Some(audit_purity(&buffers, &spec, floor, cfg.audit_samples, &mut audit_rng)?);
    }
    log.wall_clock_secs = seconds_since(started);
    Ok((log, model))
}

/// Independently initialized model with `other`'s architecture.
fn fresh_like(other: &LambdaModel, rng: &mut ChaCha8Rng) -> LambdaModel {
    let zeros = vec![0.0; other.param_count()];
    LambdaModel::from_parts(other.kind(), other.dims().to_vec(), None, zeros)
        .expect("same layout as an existing model")
        .init_uniform(rng)
}
