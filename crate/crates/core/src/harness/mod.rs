//! Experiment plumbing: config files, metrics CSV, seed sweeps, confidence
//! bands and the on-policy REINFORCE comparison run.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

pub use config::{config_from_pairs, parse_config, parse_pairs, serialize_config};

use crate::envs::{parse_env, EnvState, MdpSpec};
use crate::error::{Error, Result};
use crate::gradients::{lpg_trajectory_grad, GradEstimate};
use crate::model::{LambdaModel, Sgd};
use crate::offpolicy::{derive_seed, evaluate, train_with, Algorithm, EvalRecord, RunLog, TrainRunConfig};
use crate::policy::{select_action, ListwisePolicy, SelectMode};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "RANKGRAD_OUT";

/// `explicit`, else `$RANKGRAD_OUT`, else `./out`.
pub fn output_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

pub const METRICS_HEADER: &str =
    "step,episode,env_steps,eval_return_mean,eval_return_min,buffer_regular,buffer_nearopt,distinct_nearopt,loss,grad_inf_norm";

fn opt_cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(log: &RunLog, mut w: W) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in &log.records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.episode,
            r.env_steps,
            r.eval_return_mean,
            r.eval_return_min,
            r.buffer_regular,
            r.buffer_nearopt,
            r.distinct_nearopt,
            opt_cell(r.loss),
            opt_cell(r.grad_inf_norm)
        )?;
    }
    Ok(())
}

pub fn metrics_csv(log: &RunLog) -> String {
    let mut buf = Vec::new();
    write_metrics_csv(log, &mut buf).expect("writing to a Vec");
    String::from_utf8(buf).expect("ascii")
}

/// Builds the MDP named by `cfg.env` and trains on it.
pub fn run_config(cfg: &TrainRunConfig) -> Result<RunLog> {
    let spec = Arc::new(parse_env(&cfg.env)?);
    train_with(cfg, spec, |_, _| Ok(())).map(|(log, _)| log)
}

/// On-policy REINFORCE with a softmax policy over λ: sample an episode,
/// ascend `lpg_trajectory_grad`, repeat. No replay buffers.
pub fn onpolicy_reinforce_baseline(cfg: &TrainRunConfig, spec: Arc<MdpSpec>) -> Result<RunLog> {
    let mut cfg = cfg.clone();
    cfg.algorithm = Algorithm::Reinforce;
    train_with(&cfg, spec, |_, _| Ok(())).map(|(log, _)| log)
}

/// The REINFORCE parameter update; returns the gradient it ascended.
pub fn reinforce_update(model: &mut LambdaModel, opt: &mut Sgd, traj: &crate::envs::Trajectory) -> Result<GradEstimate> {
    let est = lpg_trajectory_grad(model, traj)?;
    let mut descent = est.grad.clone();
    descent.scale(-1.0);
    opt.step(model, &descent)?;
    Ok(est)
}

pub(crate) fn onpolicy_reinforce_with<F>(
    cfg: &TrainRunConfig,
    spec: Arc<MdpSpec>,
    mut on_eval: F,
) -> Result<(RunLog, LambdaModel)>
where
    F: FnMut(&EvalRecord, &LambdaModel) -> Result<()>,
{
    cfg.validate(&spec)?;
    let started = crate::offpolicy::clock_start();
    let (c, target) = cfg.resolve_threshold(&spec)?;
    let mut log = RunLog::new(cfg, c, target);
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut model = cfg.build_model(&spec)?.init_uniform(&mut init_rng);
    let mut opt = Sgd::new(cfg.learning_rate).with_momentum(cfg.momentum);
    let mut env = EnvState::reset(Arc::clone(&spec), derive_seed(cfg.seed, 2));
    let mut act_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let mut eval_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 5));

    let mut steps = 0usize;
    let mut eval_steps = 0usize;
    let mut evals_done = 0usize;
    while log.episodes < cfg.max_episodes && steps < cfg.max_steps {
        if log.episodes > 0 {
            env.reset_episode();
        }
        let behaviour = ListwisePolicy::new(model.clone());
        let traj = env.rollout(|s| select_action(&behaviour, s.into(), SelectMode::Sample, &mut act_rng))?;
        steps += traj.len();
        log.episodes += 1;
        let est = reinforce_update(&mut model, &mut opt, &traj)?;
        log.distinct_by_episode.push(0);
        if steps / cfg.eval_period > evals_done {
            evals_done = steps / cfg.eval_period;
            let policy = cfg.policy_for(model.clone());
            let mode = match cfg.eval_mode {
                crate::offpolicy::EvalMode::Greedy => SelectMode::Greedy,
                crate::offpolicy::EvalMode::Sample => SelectMode::Sample,
            };
            let res = evaluate(policy.as_ref(), &spec, cfg.eval_episodes, mode, eval_rng.next_u64())?;
            eval_steps += res.steps;
            let record = EvalRecord {
                step: steps,
                episode: log.episodes,
                env_steps: steps + eval_steps,
                eval_return_mean: res.mean,
                eval_return_min: res.min,
                buffer_regular: 0,
                buffer_nearopt: 0,
                distinct_nearopt: 0,
                loss: Some(-est.loss),
                grad_inf_norm: Some(est.grad.inf_norm()),
            };
            on_eval(&record, &model)?;
            log.records.push(record);
            if res.min >= target {
                log.converged_at_step = Some(steps);
                break;
            }
        }
    }
    log.train_steps = steps;
    log.wall_clock_secs = crate::offpolicy::seconds_since(started);
    Ok((log, model))
}

/// A grid of runs: every (env, algorithm, threshold) variant for every seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub base: TrainRunConfig,
    pub seeds: Vec<u64>,
    pub algorithms: Vec<Algorithm>,
    /// `None` means "use the base config's threshold".
    pub thresholds: Vec<Option<f64>>,
    pub envs: Vec<String>,
    pub out_dir: Option<PathBuf>,
    pub workers: usize,
}

impl SweepSpec {
    pub fn new(base: TrainRunConfig, seeds: Vec<u64>) -> Self {
        SweepSpec {
            algorithms: vec![base.algorithm],
            thresholds: vec![None],
            envs: vec![base.env.clone()],
            base,
            seeds,
            out_dir: None,
            workers: 0,
        }
    }

    /// Parses a sweep file: the train config keys plus `seeds`, `algorithms`,
    /// `thresholds` (comma lists, `auto` allowed) and `envs` (`;`-separated).
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        let seeds = match pairs.remove("seeds") {
            Some(v) => split_list(&v, ',', |s| s.parse::<u64>().ok())?,
            None => vec![0, 1, 2, 3, 4],
        };
        let algorithms = pairs.remove("algorithms").map(|v| split_list(&v, ',', |s| s.parse().ok()));
        let thresholds = pairs.remove("thresholds").map(|v| {
            split_list(&v, ',', |s| {
                if s == "auto" {
                    Some(None)
                } else {
                    s.parse::<f64>().ok().map(Some)
                }
            })
        });
        let envs = pairs.remove("envs").map(|v| split_list(&v, ';', |s| Some(s.to_string())));
        let workers = match pairs.remove("workers") {
            Some(v) => v.parse().map_err(|_| Error::Config(format!("workers: cannot parse '{v}'")))?,
            None => 0,
        };
        let base = config_from_pairs(&pairs)?;
        let mut spec = SweepSpec::new(base, seeds);
        if let Some(a) = algorithms {
            spec.algorithms = a?;
        }
        if let Some(t) = thresholds {
            spec.thresholds = t?;
        }
        if let Some(e) = envs {
            spec.envs = e?;
        }
        spec.workers = workers;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.algorithms.is_empty() || self.thresholds.is_empty() || self.envs.is_empty() {
            return Err(Error::Config("sweep needs at least one seed and one value per axis".into()));
        }
        Ok(())
    }

    /// `(variant label, config)` for every run, in a fixed order.
    pub fn runs(&self) -> Vec<(String, TrainRunConfig)> {
        let mut out = Vec::new();
        for env in &self.envs {
            for &alg in &self.algorithms {
                for &c in &self.thresholds {
                    let label = format!(
                        "{env}|{alg}|c={}",
                        c.map_or("auto".to_string(), |c| c.to_string())
                    );
                    for &seed in &self.seeds {
                        let mut cfg = self.base.clone();
                        if alg != cfg.algorithm {
                            cfg.apply_preset(alg);
                        }
                        cfg.env = env.clone();
                        if c.is_some() {
                            cfg.threshold = c;
                        }
                        cfg.seed = seed;
                        out.push((label.clone(), cfg));
                    }
                }
            }
        }
        out
    }
}

fn split_list<T>(v: &str, sep: char, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    v.split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(s).ok_or_else(|| Error::Config(format!("cannot parse list item '{s}'"))))
        .collect()
}

#[derive(Clone, Debug)]
pub struct SweepRun {
    pub variant: String,
    pub seed: u64,
    pub result: std::result::Result<RunLog, String>,
}

/// File-system friendly name for a variant/seed pair.
pub fn run_file_stem(variant: &str, seed: u64) -> String {
    let clean: String = variant
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{clean}_seed{seed}")
}

/// Runs every (variant, seed) concurrently. A failing run is recorded and
/// the sweep continues. When `out_dir` is set each run's metrics CSV is
/// written there after all runs finish.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRun>> {
    spec.validate()?;
    let runs = spec.runs();
    let exec = |(variant, cfg): &(String, TrainRunConfig)| SweepRun {
        variant: variant.clone(),
        seed: cfg.seed,
        result: run_config(cfg).map_err(|e| e.to_string()),
    };
    let results: Vec<SweepRun> = if spec.workers == 1 {
        runs.iter().map(exec).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.workers)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| runs.par_iter().map(exec).collect())
    };
    if let Some(dir) = &spec.out_dir {
        std::fs::create_dir_all(dir)?;
        for r in &results {
            if let Ok(log) = &r.result {
                let path = dir.join(format!("{}.csv", run_file_stem(&r.variant, r.seed)));
                std::fs::write(path, metrics_csv(log))?;
            }
        }
    }
    Ok(results)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub points: Vec<CurvePoint>,
    /// Logs were evaluated on different step grids and were interpolated.
    pub interpolated: bool,
}

/// Value of `records` at `step` by linear interpolation, held constant
/// outside the recorded range.
fn value_at(records: &[EvalRecord], step: usize) -> f64 {
    let s = step as f64;
    match records.iter().position(|r| r.step >= step) {
        Some(0) => records[0].eval_return_mean,
        Some(i) => {
            let (a, b) = (&records[i - 1], &records[i]);
            let w = (s - a.step as f64) / (b.step as f64 - a.step as f64);
            a.eval_return_mean + w * (b.eval_return_mean - a.eval_return_mean)
        }
        None => records.last().map_or(f64::NAN, |r| r.eval_return_mean),
    }
}

/// Per-step mean evaluation return with a normal-approximation confidence
/// half-width `z·s/√n`. Logs on different step grids are interpolated onto
/// the coarsest one (largest mean spacing, longest on ties).
pub fn aggregate(logs: &[&RunLog], confidence: f64) -> Result<Curve> {
    if logs.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: logs.len(),
        });
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidParameter(format!("confidence {confidence} not in (0, 1)")));
    }
    let z = Normal::standard().inverse_cdf(0.5 + confidence / 2.0);
    let steps = |l: &RunLog| l.records.iter().map(|r| r.step).collect::<Vec<_>>();
    let first = steps(logs[0]);
    let same = logs.iter().all(|l| steps(l) == first);
    let nonempty: Vec<&&RunLog> = logs.iter().filter(|l| !l.records.is_empty()).collect();
    let grid = if same {
        first
    } else {
        let spacing = |l: &RunLog| l.records.last().unwrap().step as f64 / l.records.len() as f64;
        let coarsest = nonempty.iter().copied().copied().max_by(|a, b| {
            spacing(a)
                .total_cmp(&spacing(b))
                .then(a.records.len().cmp(&b.records.len()))
        });
        coarsest.map(steps).unwrap_or_default()
    };
    let n = logs.len();
    let mut points = Vec::with_capacity(grid.len());
    for &step in &grid {
        let vals: Vec<f64> = logs.iter().map(|l| value_at(&l.records, step)).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        points.push(CurvePoint {
            step,
            mean,
            half_width: z * (var / n as f64).sqrt(),
            n,
        });
    }
    Ok(Curve {
        points,
        interpolated: !same,
    })
}

pub fn write_curve_csv<W: Write>(variant: &str, curve: &Curve, mut w: W) -> Result<()> {
    for p in &curve.points {
        writeln!(w, "{variant},{},{},{},{},{}", p.step, p.mean, p.half_width, p.n, curve.interpolated)?;
    }
    Ok(())
}

pub const CURVE_HEADER: &str = "variant,step,mean,half_width,n,interpolated";

/// Groups successful sweep runs by variant (in first-seen order) and writes
/// one aggregate CSV. Variants with fewer than two successful runs are
/// skipped.
pub fn aggregate_sweep<W: Write>(runs: &[SweepRun], confidence: f64, mut w: W) -> Result<()> {
    writeln!(w, "{CURVE_HEADER}")?;
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    for v in order {
        let logs: Vec<&RunLog> = runs
            .iter()
            .filter(|r| r.variant == v)
            .filter_map(|r| r.result.as_ref().ok())
            .collect();
        if logs.len() >= 2 {
            write_curve_csv(v, &aggregate(&logs, confidence)?, &mut w)?;
        }
    }
    Ok(())
}
