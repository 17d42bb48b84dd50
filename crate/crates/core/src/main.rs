use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use rankgrad::envs::parse_env;
use rankgrad::gradients::{random_gradcheck, LossKind};
use rankgrad::harness::{
    aggregate_sweep, metrics_csv, output_dir, parse_config, run_sweep, serialize_config, SweepSpec,
};
use rankgrad::model::{read_checkpoint, write_checkpoint, FdOptions, ModelKind};
use rankgrad::offpolicy::{evaluate, train_with};
use rankgrad::policy::{ListwisePolicy, PairwisePolicy, PolicyKind, SelectMode};
use rankgrad::theory::{self, JointBoundInput};
use rankgrad::Error;

/// Ranking policy gradient toolkit.
#[derive(Parser)]
#[command(name = "rankgrad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to $RANKGRAD_OUT, then ./out.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value = "greedy")]
        mode: String,
        #[arg(long, default_value = "listwise")]
        policy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every variant of a sweep file for every seed.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// 0 = one per core.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long)]
        loss: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value = "mlp")]
        model: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV report path; defaults to <out>/gradcheck_<loss>.csv.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sample-complexity and exploration calculators.
    Theory {
        #[command(subcommand)]
        calc: TheoryCmd,
        #[arg(long, global = true)]
        json: bool,
    },
    /// Monte Carlo check of the exploration-efficiency formula.
    ExploreSim {
        #[arg(long = "n-total")]
        total: u64,
        #[arg(long)]
        optimal: u64,
        /// Comma-separated episode counts.
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
        k: Vec<u64>,
        #[arg(long, default_value_t = 200_000)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.005)]
        tol: f64,
    },
}

#[derive(Subcommand)]
enum TheoryCmd {
    SlBound {
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        hypotheses: u64,
    },
    GenBound {
        #[arg(long)]
        d: f64,
        #[arg(long)]
        eta: f64,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        horizon: usize,
    },
    RlBound {
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        d: f64,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        hypotheses: u64,
        #[arg(long)]
        delta: f64,
    },
    ExploreEff {
        #[arg(long = "n-total")]
        total: u64,
        #[arg(long)]
        optimal: u64,
        #[arg(long)]
        k: u64,
        /// Omit to print the whole tail and the expectation.
        #[arg(long)]
        i: Option<u64>,
    },
    JointBound(JointArgs),
}

#[derive(Args)]
struct JointArgs {
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    n: u64,
    #[arg(long)]
    k: u64,
    #[arg(long = "n-total")]
    total: u64,
    #[arg(long)]
    optimal: u64,
    #[arg(long)]
    hypotheses: u64,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    horizon: usize,
    #[arg(long)]
    d: f64,
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    /// A check ran and did not pass.
    Failed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Infeasible(_) | Error::RangeConditionViolated { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cmd: Command) -> rankgrad::Result<Outcome> {
    match cmd {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out.as_deref()),
        Command::Eval {
            checkpoint,
            env,
            episodes,
            mode,
            policy,
            seed,
        } => cmd_eval(&checkpoint, &env, episodes, &mode, &policy, seed),
        Command::Sweep {
            spec,
            out,
            workers,
            confidence,
        } => cmd_sweep(&spec, out.as_deref(), workers, confidence),
        Command::Gradcheck {
            loss,
            trials,
            tol,
            model,
            seed,
            report,
        } => cmd_gradcheck(&loss, trials, tol, &model, seed, report),
        Command::Theory { calc, json } => cmd_theory(calc, json),
        Command::ExploreSim {
            total,
            optimal,
            k,
            replicates,
            seed,
            tol,
        } => cmd_explore_sim(total, optimal, &k, replicates, seed, tol),
    }
}

fn read_text(path: &Path) -> rankgrad::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<&Path>) -> rankgrad::Result<Outcome> {
    let mut cfg = parse_config(&read_text(config)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let spec = Arc::new(parse_env(&cfg.env)?);
    let dir = output_dir(out);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), serialize_config(&cfg))?;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let (mut log, model) = train_with(&cfg, spec, |record, model| {
        let path = ckpt_dir.join(format!("step_{:08}.bin", record.step));
        write_checkpoint(model, std::io::BufWriter::new(fs::File::create(path)?))
    })?;
    let ckpt = dir.join("checkpoint.bin");
    write_checkpoint(&model, fs::File::create(&ckpt)?)?;
    log.checkpoint_path = Some(ckpt.clone());
    fs::write(dir.join("metrics.csv"), metrics_csv(&log))?;
    let last = log.final_record();
    println!(
        "algorithm={} seed={} steps={} episodes={} converged_at={} final_mean={} threshold={}",
        cfg.algorithm,
        cfg.seed,
        log.train_steps,
        log.episodes,
        log.converged_at_step.map_or("-".into(), |s| s.to_string()),
        last.map_or("-".into(), |r| r.eval_return_mean.to_string()),
        log.threshold,
    );
    if let Some(a) = log.audit {
        println!("buffer audit: {} checked, {} violations", a.checked, a.violations);
    }
    println!("wrote {}", dir.display());
    Ok(Outcome::Ok)
}

fn cmd_eval(checkpoint: &Path, env: &str, episodes: usize, mode: &str, policy: &str, seed: u64) -> rankgrad::Result<Outcome> {
    let model = read_checkpoint(fs::File::open(checkpoint)?)?;
    let spec = Arc::new(parse_env(env)?);
    if model.action_count() != spec.action_count() || model.input_dim() != spec.state_count() {
        return Err(Error::Config("checkpoint does not match the environment's shape".into()));
    }
    let mode = match mode {
        "greedy" => SelectMode::Greedy,
        "sample" => SelectMode::Sample,
        other => return Err(Error::Config(format!("unknown mode '{other}'"))),
    };
    let res = match policy.parse::<PolicyKind>()? {
        PolicyKind::Pairwise => evaluate(&PairwisePolicy::new(model, false), &spec, episodes, mode, seed)?,
        PolicyKind::Listwise => evaluate(&ListwisePolicy::new(model), &spec, episodes, mode, seed)?,
    };
    println!("episodes={} mean={} min={}", res.returns.len(), res.mean, res.min);
    Ok(Outcome::Ok)
}

fn cmd_sweep(spec_path: &Path, out: Option<&Path>, workers: Option<usize>, confidence: f64) -> rankgrad::Result<Outcome> {
    let mut spec = SweepSpec::parse(&read_text(spec_path)?)?;
    if let Some(w) = workers {
        spec.workers = w;
    }
    let dir = output_dir(out);
    spec.out_dir = Some(dir.clone());
    let runs = run_sweep(&spec)?;
    let mut agg = fs::File::create(dir.join("aggregate.csv"))?;
    aggregate_sweep(&runs, confidence, &mut agg)?;
    let mut failures = fs::File::create(dir.join("failures.csv"))?;
    writeln!(failures, "variant,seed,error")?;
    let mut failed = 0;
    for r in &runs {
        match &r.result {
            Ok(log) => println!(
                "{} seed={} converged_at={}",
                r.variant,
                r.seed,
                log.converged_at_step.map_or("-".into(), |s| s.to_string())
            ),
            Err(e) => {
                failed += 1;
                println!("{} seed={} FAILED: {e}", r.variant, r.seed);
                writeln!(failures, "\"{}\",{},\"{}\"", r.variant, r.seed, e.replace('"', "'"))?;
            }
        }
    }
    println!("{} runs ({} failed); wrote {}", runs.len(), failed, dir.display());
    Ok(Outcome::Ok)
}

fn cmd_gradcheck(loss: &str, trials: usize, tol: f64, model: &str, seed: u64, report: Option<PathBuf>) -> rankgrad::Result<Outcome> {
    let loss: LossKind = loss.parse()?;
    let kind: ModelKind = model.parse()?;
    let opts = FdOptions {
        tolerance: tol,
        ..FdOptions::default()
    };
    let reports = random_gradcheck(loss, kind, trials, seed, opts)?;
    let path = report.unwrap_or_else(|| output_dir(None).join(format!("gradcheck_{}.csv", loss.name())));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
    writeln!(w, "trial,coordinate,analytic,numeric,rel_error")?;
    let (mut worst, mut kinks, mut failed) = (0.0f64, 0, 0);
    for (t, r) in reports.iter().enumerate() {
        kinks += r.kink as usize;
        failed += !r.pass as usize;
        worst = worst.max(r.max_rel_error);
        for row in &r.rows {
            writeln!(w, "{t},{},{},{},{}", row.coordinate, row.analytic, row.numeric, row.rel_error)?;
        }
    }
    w.flush()?;
    println!(
        "loss={} model={} trials={} kinks_skipped={} failed={} max_rel_error={:e} report={}",
        loss.name(),
        kind,
        trials,
        kinks,
        failed,
        worst,
        path.display()
    );
    Ok(if failed == 0 { Outcome::Ok } else { Outcome::Failed })
}

fn emit(json_out: bool, name: &str, inputs: Value, result: Value) {
    if json_out {
        let doc = json!({ "calculator": name, "inputs": inputs, "result": result, "log_base": theory::LOG_BASE });
        println!("{}", serde_json::to_string_pretty(&doc).expect("serializable"));
    } else {
        println!("{name} (natural log)");
        for (section, v) in [("input", inputs), ("result", result)] {
            if let Value::Object(map) = v {
                for (k, v) in map {
                    println!("  {section}.{k} = {v}");
                }
            }
        }
    }
}

fn cmd_theory(calc: TheoryCmd, json_out: bool) -> rankgrad::Result<Outcome> {
    match calc {
        TheoryCmd::SlBound { gamma, delta, hypotheses } => {
            let bound = theory::sl_sample_bound(gamma, delta, hypotheses)?;
            emit(
                json_out,
                "sl-bound",
                json!({ "gamma": gamma, "delta": delta, "hypotheses": hypotheses }),
                json!({ "bound": bound, "n_min": theory::sl_sample_complexity(gamma, delta, hypotheses)? }),
            );
        }
        TheoryCmd::GenBound { d, eta, m, horizon } => emit(
            json_out,
            "gen-bound",
            json!({ "d": d, "eta": eta, "m": m, "horizon": horizon }),
            json!({ "lower_bound": theory::generalization_lower_bound(d, eta, m, horizon)? }),
        ),
        TheoryCmd::RlBound {
            eps,
            d,
            m,
            horizon,
            hypotheses,
            delta,
        } => {
            let b = theory::rl_sample_complexity(eps, d, m, horizon, hypotheses, delta)?;
            emit(
                json_out,
                "rl-bound",
                json!({ "eps": eps, "d": d, "m": m, "horizon": horizon, "hypotheses": hypotheses, "delta": delta }),
                json!({ "n_exact": b.n_exact, "n_min": b.n_min, "eta": b.eta }),
            );
        }
        TheoryCmd::ExploreEff { total, optimal, k, i } => {
            let result = match i {
                Some(i) => json!({ "p_at_least_i": theory::exploration_efficiency_random(total, optimal, k, i)? }),
                None => {
                    let tail = (0..=optimal)
                        .map(|i| theory::exploration_efficiency_random(total, optimal, k, i))
                        .collect::<rankgrad::Result<Vec<_>>>()?;
                    json!({ "tail": tail, "expected": theory::expected_exploration_efficiency(total, optimal, k)? })
                }
            };
            emit(
                json_out,
                "explore-eff",
                json!({ "n_total": total, "optimal": optimal, "k": k, "i": i }),
                result,
            );
        }
        TheoryCmd::JointBound(a) => {
            let inp = JointBoundInput {
                delta: a.delta,
                n: a.n,
                k: a.k,
                total: a.total,
                optimal: a.optimal,
                hypotheses: a.hypotheses,
                m: a.m,
                horizon: a.horizon,
                d: a.d,
            };
            let j = theory::joint_bound(&inp)?;
            emit(
                json_out,
                "joint-bound",
                json!({ "delta": a.delta, "n": a.n, "k": a.k, "n_total": a.total, "optimal": a.optimal,
                        "hypotheses": a.hypotheses, "m": a.m, "horizon": a.horizon, "d": a.d,
                        "sample_to_trajectory": "ceil(n/T)" }),
                json!({ "trajectories_needed": j.trajectories_needed, "p_explore": j.p_explore,
                        "eta": j.eta, "lower_bound": j.lower_bound }),
            );
        }
    }
    Ok(Outcome::Ok)
}

fn cmd_explore_sim(total: u64, optimal: u64, ks: &[u64], replicates: usize, seed: u64, tol: f64) -> rankgrad::Result<Outcome> {
    println!("k,i,closed_form,empirical,abs_diff");
    let mut worst = 0.0f64;
    for &k in ks {
        let sim = theory::simulate_exploration(total, optimal, k, replicates, seed ^ k)?;
        for i in 1..=optimal {
            let p = theory::exploration_efficiency_random(total, optimal, k, i)?;
            let emp = sim.tail[i as usize];
            worst = worst.max((p - emp).abs());
            println!("{k},{i},{p},{emp},{}", (p - emp).abs());
        }
    }
    println!("# max abs diff {worst:e} (tolerance {tol})");
    Ok(if worst <= tol { Outcome::Ok } else { Outcome::Failed })
}
