//! Acceptance suite. Runs every criterion, prints one line each, and exits
//! non-zero if any fails.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rankgrad::envs::{make_binary_tree, parse_env, BinaryTreeParams, EnvState, Trajectory};
use rankgrad::gradients::{
    grad_variance_report, hinge_loss_and_grad, log_policy_grad, loglikelihood_decomposition_check, lpg_trajectory_grad,
    random_gradcheck, EstimatorKind, LossKind, WelfordVec,
};
use rankgrad::harness::metrics_csv;
use rankgrad::model::{read_checkpoint, write_checkpoint, FdOptions, LambdaModel, ModelKind};
use rankgrad::offpolicy::{train, train_with, Algorithm, RunLog, TrainRunConfig};
use rankgrad::policy::{expected_return, pairwise_probs, softmax, ListwisePolicy, PairwisePolicy, Policy};
use rankgrad::theory::{
    exploration_efficiency_random, generalization_lower_bound, joint_bound, rl_sample_complexity, sl_sample_bound,
    simulate_exploration, imitation_bound_check, JointBoundInput,
};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<(), String> {
    ensure(start.elapsed() <= limit, || format!("took {:?}, limit {limit:?}", start.elapsed()))
}

fn random_model<R: Rng>(model: LambdaModel, rng: &mut R) -> LambdaModel {
    let mut model = model;
    model.params_mut().iter_mut().for_each(|p| *p = rng.random_range(-1.0..=1.0));
    model
}

fn sample_trajectory<P: Policy, R: Rng>(env: &mut EnvState, policy: &P, rng: &mut R) -> Trajectory {
    env.reset_episode();
    env.rollout(|s| {
        let p = policy.sampling_probs(s.into())?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, v) in p.iter().enumerate() {
            acc += v;
            if u < acc {
                return Ok(i);
            }
        }
        Ok(p.len() - 1)
    })
    .unwrap()
}

fn gradients_match_finite_differences() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for (li, loss) in LossKind::ALL.into_iter().enumerate() {
        for (ki, kind) in [ModelKind::Tabular, ModelKind::Linear, ModelKind::Mlp].into_iter().enumerate() {
            let reports = random_gradcheck(loss, kind, 100, 1000 + 10 * li as u64 + ki as u64, FdOptions::default())
                .map_err(|e| e.to_string())?;
            for (t, r) in reports.iter().enumerate() {
                kinks += r.kink as usize;
                worst = worst.max(r.max_rel_error);
                ensure(r.pass, || {
                    format!("{} on {kind}: draw {t} max rel error {:e}", loss.name(), r.max_rel_error)
                })?;
            }
        }
    }
    within_time(start, Duration::from_secs(120))?;
    Ok(format!("1500 draws, max rel error {worst:.2e}, {kinks} kink draws skipped"))
}

fn policies_normalize() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for m in 2..=10 {
        for _ in 0..1000 {
            let lambda: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
            worst = worst.max((softmax(&lambda, 1.0).iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("listwise sum off by {worst:e}"))?;
    for _ in 0..1000 {
        let lambda = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let p = pairwise_probs(&lambda, false).map_err(|e| e.to_string())?;
        let err = (p.iter().sum::<f64>() - 1.0).abs();
        ensure(err <= 1e-12, || format!("pairwise m=2 sum off by {err:e}"))?;
    }
    let p = pairwise_probs(&[0.3, 0.3, 0.3], true).map_err(|e| e.to_string())?;
    ensure(p.len() == 4 && p.iter().all(|v| (v - 0.25).abs() <= 1e-12), || format!("equal-λ m=3 gave {p:?}"))?;
    Ok(format!("listwise max |Σπ−1| = {worst:.1e}; equal-λ pairwise = {p:?}"))
}

fn lpg_is_unbiased() -> Check {
    let start = Instant::now();
    let spec = Arc::new(make_binary_tree(&BinaryTreeParams::single_optimal(3, 5)).map_err(|e| e.to_string())?);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = random_model(LambdaModel::tabular(spec.state_count(), 2), &mut rng);
    let policy = ListwisePolicy::new(model.clone());

    // Exact gradient of the enumerated expected return by central differences.
    let h = 1e-6;
    let mut exact = vec![0.0; model.param_count()];
    let mut probe = model.clone();
    for (i, g) in exact.iter_mut().enumerate() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = expected_return(&ListwisePolicy::new(probe.clone()), &spec).unwrap().0;
        probe.params_mut()[i] = orig - h;
        let down = expected_return(&ListwisePolicy::new(probe.clone()), &spec).unwrap().0;
        probe.params_mut()[i] = orig;
        *g = (up - down) / (2.0 * h);
    }

    let mut env = EnvState::reset(Arc::clone(&spec), 4);
    let mut acc = WelfordVec::new(model.param_count());
    for _ in 0..100_000 {
        let traj = sample_trajectory(&mut env, &policy, &mut rng);
        acc.push(&lpg_trajectory_grad(&model, &traj).unwrap().grad.values);
    }
    let var = acc.variance().unwrap();
    let mut worst_z = 0.0f64;
    for i in 0..exact.len() {
        let se = (var[i] / acc.count as f64).sqrt();
        let diff = (acc.mean[i] - exact[i]).abs();
        ensure(diff <= 3.0 * se + 1e-8, || {
            format!("coordinate {i}: MC {} vs exact {} (se {se:e})", acc.mean[i], exact[i])
        })?;
        if se > 0.0 {
            worst_z = worst_z.max(diff / se);
        }
    }
    within_time(start, Duration::from_secs(60))?;
    Ok(format!("{} coordinates, worst |z| = {worst_z:.2}", exact.len()))
}

fn exploration_matches_monte_carlo() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_closed = 0.0f64;
    for total in [4u64, 8, 16] {
        for optimal in 1u64..=3 {
            for k in [1u64, 5, 10, 20] {
                let sim = simulate_exploration(total, optimal, k, 200_000, total * 1000 + optimal * 100 + k)
                    .map_err(|e| e.to_string())?;
                for i in 1..=optimal.min(2) {
                    let p = exploration_efficiency_random(total, optimal, k, i).map_err(|e| e.to_string())?;
                    let d = (p - sim.tail[i as usize]).abs();
                    worst = worst.max(d);
                    ensure(d <= 0.005, || format!("N={total} |T|={optimal} k={k} i={i}: {p} vs {}", sim.tail[i as usize]))?;
                    if i == 1 {
                        let closed = 1.0 - ((total - optimal) as f64 / total as f64).powi(k as i32);
                        worst_closed = worst_closed.max((p - closed).abs());
                    }
                }
            }
        }
    }
    ensure(worst_closed <= 1e-12, || format!("i=1 closed form off by {worst_closed:e}"))?;
    within_time(start, Duration::from_secs(120))?;
    Ok(format!("max |closed − MC| = {worst:.4}, i=1 closed form within {worst_closed:.1e}"))
}

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        ((a - b) / b).abs()
    }
}

fn calculators_match_high_precision() -> Check {
    let data = include_str!("data/calculators.csv");
    let mut counts = [0usize; 4];
    let mut worst = 0.0f64;
    let mut worked = None;
    for line in data.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let x = |i: usize| f[i].parse::<f64>().unwrap();
        let u = |i: usize| f[i].parse::<u64>().unwrap();
        let mut check = |got: f64, want: f64| -> Result<(), String> {
            let r = rel(got, want);
            worst = worst.max(r);
            ensure(r <= 1e-9, || format!("{line}: got {got}"))
        };
        match f[0] {
            "sl" => {
                counts[0] += 1;
                check(sl_sample_bound(x(1), x(2), u(3)).map_err(|e| e.to_string())?, x(4))?;
            }
            "gen" => {
                counts[1] += 1;
                check(generalization_lower_bound(x(1), x(2), u(3) as usize, u(4) as usize).map_err(|e| e.to_string())?, x(5))?;
            }
            "rl" => {
                counts[2] += 1;
                let b = rl_sample_complexity(x(1), x(2), u(3) as usize, u(4) as usize, u(5), x(6)).map_err(|e| e.to_string())?;
                check(b.n_exact, x(7))?;
                check(b.eta, x(8))?;
                ensure(b.n_min == x(7).ceil() as u64, || format!("{line}: n_min {}", b.n_min))?;
                if (x(1), x(2), u(3), u(4), u(5), x(6)) == (0.5, 1.0, 2, 5, 16, 0.1) {
                    worked = Some(b.n_min);
                }
            }
            "joint" => {
                counts[3] += 1;
                let inp = JointBoundInput {
                    delta: x(1),
                    n: u(2),
                    k: u(3),
                    total: u(4),
                    optimal: u(5),
                    hypotheses: u(6),
                    m: u(7) as usize,
                    horizon: u(8) as usize,
                    d: x(9),
                };
                let j = joint_bound(&inp).map_err(|e| e.to_string())?;
                ensure(j.trajectories_needed == u(10), || format!("{line}: needed {}", j.trajectories_needed))?;
                check(j.p_explore, x(11))?;
                check(j.eta, x(12))?;
                check(j.lower_bound, x(13))?;
            }
            other => return Err(format!("unknown row kind {other}")),
        }
    }
    ensure(counts.iter().all(|&c| c >= 20), || format!("grid sizes {counts:?}"))?;
    ensure(worked == Some(1036), || format!("worked point gave {worked:?}"))?;
    Ok(format!("{counts:?} points, max rel error {worst:.1e}, worked point n = 1036"))
}

fn variance_bounds_hold() -> Check {
    let spec = Arc::new(make_binary_tree(&BinaryTreeParams::single_optimal(5, 11)).map_err(|e| e.to_string())?);
    let horizon = spec.horizon();
    let r_max = spec.max_trajectory_reward().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = random_model(LambdaModel::tabular(spec.state_count(), 2), &mut rng);
    let policy = ListwisePolicy::new(model.clone());
    let mut env = EnvState::reset(Arc::clone(&spec), 7);

    let mut pg = Vec::with_capacity(10_000);
    let mut buffer = Vec::new();
    let mut c_pg = 0.0f64;
    for _ in 0..10_000 {
        let traj = sample_trajectory(&mut env, &policy, &mut rng);
        for st in traj.steps() {
            c_pg = c_pg.max(log_policy_grad(&model, st.state, st.action).unwrap().inf_norm());
            if buffer.len() < 500 {
                buffer.push((st.state, st.action));
            }
        }
        pg.push(lpg_trajectory_grad(&model, &traj).unwrap());
    }
    let pg_report =
        grad_variance_report(&pg, c_pg, horizon, r_max, EstimatorKind::PolicyGradient).map_err(|e| e.to_string())?;

    let c_sup = buffer
        .iter()
        .map(|&(s, a)| log_policy_grad(&model, s, a).unwrap().inf_norm())
        .fold(0.0, f64::max);
    let sup: Vec<_> = (0..10_000)
        .map(|_| {
            let pair = buffer[rng.random_range(0..buffer.len())];
            hinge_loss_and_grad(&model, &[pair], 1.0).unwrap()
        })
        .collect();
    let sup_report = grad_variance_report(&sup, c_sup, horizon, r_max, EstimatorKind::Supervised).map_err(|e| e.to_string())?;

    ensure(pg_report.within_bound, || {
        format!("policy gradient variance {} > {}", pg_report.max_variance, pg_report.bound)
    })?;
    ensure(sup_report.within_bound, || {
        format!("hinge variance {} > {}", sup_report.max_variance, sup_report.bound)
    })?;
    Ok(format!(
        "pg max var {:.4} ≤ {:.4}; hinge max var {:.4} ≤ {:.4}; ratio {:.3}",
        pg_report.max_variance,
        pg_report.bound,
        sup_report.max_variance,
        sup_report.bound,
        pg_report.max_variance / sup_report.max_variance
    ))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn steps_to_converge(log: &RunLog) -> f64 {
    log.converged_at_step.map_or(f64::INFINITY, |s| s as f64)
}

fn rpg_converges_on_depth6_tree() -> Check {
    let spec = Arc::new(parse_env("tree:T=6,roots=1,opt=37").map_err(|e| e.to_string())?);
    let mut rpg_steps = Vec::new();
    let mut reinforce_steps = Vec::new();
    let mut converged = 0;
    for seed in 0..10 {
        let cfg = TrainRunConfig {
            env: "tree:T=6,roots=1,opt=37".into(),
            max_steps: 50_000,
            seed,
            ..TrainRunConfig::preset(Algorithm::Rpg)
        };
        let log = train(&cfg, Arc::clone(&spec)).map_err(|e| e.to_string())?;
        let ok = log.converged_at_step.is_some_and(|s| s <= 50_000)
            && log.final_record().is_some_and(|r| r.eval_return_min >= log.target);
        converged += ok as usize;
        rpg_steps.push(steps_to_converge(&log));

        let mut base = cfg;
        base.apply_preset(Algorithm::Reinforce);
        let log = train(&base, Arc::clone(&spec)).map_err(|e| e.to_string())?;
        reinforce_steps.push(steps_to_converge(&log));
    }
    let (rpg_med, rf_med) = (median(rpg_steps), median(reinforce_steps));
    ensure(converged >= 9, || format!("only {converged}/10 seeds converged"))?;
    Ok(format!(
        "{converged}/10 seeds converged; median steps RPG {rpg_med}, REINFORCE {rf_med} (RPG ≤ REINFORCE: {})",
        rpg_med <= rf_med
    ))
}

fn tradeoff_reproduces() -> Check {
    let env = "tree:T=4,roots=1,opt=0,rewards=10,2,2,2,2,2,2,2,2,2,2,2,2,2,2,8";
    let spec = Arc::new(parse_env(env).map_err(|e| e.to_string())?);
    let run = |c: f64| -> Result<(f64, f64), String> {
        let mut first = Vec::new();
        let mut fin = Vec::new();
        for seed in 0..10 {
            let cfg = TrainRunConfig {
                env: env.into(),
                threshold: Some(c),
                max_steps: 20_000,
                seed,
                ..TrainRunConfig::preset(Algorithm::Rpg)
            };
            let log = train(&cfg, Arc::clone(&spec)).map_err(|e| e.to_string())?;
            first.push(log.first_insert_episode.map_or(f64::INFINITY, |e| e as f64));
            fin.push(log.final_record().map_or(0.0, |r| r.eval_return_mean));
        }
        Ok((median(first), median(fin)))
    };
    let (first10, final10) = run(10.0)?;
    let (first8, final8) = run(8.0)?;
    ensure(first10 > first8, || format!("first insert: c=10 {first10}, c=8 {first8}"))?;
    ensure(final10 >= final8, || format!("final return: c=10 {final10}, c=8 {final8}"))?;
    Ok(format!(
        "median first-insert episode c=10 {first10} > c=8 {first8}; median final return c=10 {final10:.3} ≥ c=8 {final8:.3}"
    ))
}

fn loglikelihood_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let (states, actions) = (rng.random_range(1..6), rng.random_range(2..5));
        let model = random_model(LambdaModel::tabular(states, actions), &mut rng);
        let len = rng.random_range(1..12);
        let traj = Trajectory::from_steps((0..len).map(|_| rankgrad::envs::Step {
            state: rng.random_range(0..states),
            action: rng.random_range(0..actions),
            reward: 1.0,
        }));
        let check = if trial % 2 == 0 {
            loglikelihood_decomposition_check(&ListwisePolicy::new(model), &traj)
        } else {
            loglikelihood_decomposition_check(&PairwisePolicy::new(model, false), &traj)
        }
        .map_err(|e| e.to_string())?;
        worst = worst.max(check.abs_diff);
    }
    ensure(worst <= 1e-12, || format!("max difference {worst:e}"))?;
    Ok(format!("1000 pairs, max |lhs − rhs| = {worst:.1e}"))
}

fn imitation_bound_inequality() -> Check {
    let mut lines = Vec::new();
    for n in [4, 16, 64] {
        let r = imitation_bound_check(4, 9, n, 0.5, 100 + n as u64).map_err(|e| e.to_string())?;
        ensure(r.holds, || format!("n={n}: return {} < bound {} (eta {})", r.policy_return, r.bound, r.eta_emp))?;
        lines.push(format!("n={n}: {:.4} ≥ {:.4} (η={:.2})", r.policy_return, r.bound, r.eta_emp));
    }
    Ok(lines.join("; "))
}

fn reproducible_outputs() -> Check {
    let env = "tree:T=4,roots=1,opt=6";
    let spec = Arc::new(parse_env(env).map_err(|e| e.to_string())?);
    let cfg = TrainRunConfig {
        env: env.into(),
        seed: 17,
        max_steps: 5000,
        eval_period: 50,
        ..TrainRunConfig::preset(Algorithm::Rpg)
    };
    let (a, model) = train_with(&cfg, Arc::clone(&spec), |_, _| Ok(())).map_err(|e| e.to_string())?;
    let (b, _) = train_with(&cfg, spec, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let (ca, cb) = (metrics_csv(&a), metrics_csv(&b));
    ensure(ca == cb, || "metrics CSV differs between identical runs".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut roundtrips = 0;
    for m in [
        model,
        random_model(LambdaModel::linear(7, 3), &mut rng),
        random_model(LambdaModel::mlp(&[5, 4, 3]).unwrap(), &mut rng).with_squash(0.5),
    ] {
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).map_err(|e| e.to_string())?;
        let back = read_checkpoint(buf.as_slice()).map_err(|e| e.to_string())?;
        let same = back.kind() == m.kind()
            && back.dims() == m.dims()
            && back.squash().map(f64::to_bits) == m.squash().map(f64::to_bits)
            && back.params().iter().map(|p| p.to_bits()).eq(m.params().iter().map(|p| p.to_bits()));
        ensure(same, || format!("{} checkpoint did not round-trip", m.kind()))?;
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).map_err(|e| e.to_string())?;
        ensure(again == buf, || "re-serialized checkpoint differs".into())?;
        roundtrips += 1;
    }
    Ok(format!("{} CSV bytes identical; {roundtrips} checkpoints bit-exact", ca.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("gradient correctness", gradients_match_finite_differences),
        ("policy normalization", policies_normalize),
        ("LPG unbiasedness", lpg_is_unbiased),
        ("exploration efficiency", exploration_matches_monte_carlo),
        ("calculators", calculators_match_high_precision),
        ("variance bounds", variance_bounds_hold),
        ("end-to-end convergence", rpg_converges_on_depth6_tree),
        ("threshold trade-off", tradeoff_reproduces),
        ("log-likelihood identity", loglikelihood_identity),
        ("imitation return bound", imitation_bound_inequality),
        ("reproducibility and formats", reproducible_outputs),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS {id:>2} {name} ({secs:.1}s): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {id:>2} {name} ({secs:.1}s): {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
