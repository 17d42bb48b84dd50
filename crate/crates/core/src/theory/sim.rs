use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{generalization_lower_bound, mean_estimate, MeanEstimate};
use crate::envs::{enumerate_trajectories, make_binary_tree, BinaryTreeParams, EnvState, MdpSpec, Trajectory};
use crate::error::{Error, Result};
use crate::gradients::hinge_loss_and_grad;
use crate::model::{sgd_update, LambdaModel};
use crate::offpolicy::derive_seed;
use crate::policy::{greedy, pairwise_probs};

/// Replicates are split into this many shards, each with its own seed, so
/// results do not depend on the worker count.
const SHARDS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ExplorationSim {
    pub replicates: usize,
    /// `tail[i]` = empirical `P(n_traj ≥ i | k)` for `i = 0..=|T|`.
    pub tail: Vec<f64>,
    pub distinct: MeanEstimate,
}

fn finish(counts: Vec<usize>, replicates: usize) -> ExplorationSim {
    // counts[i] = replicates with exactly i distinct optimal hits
    let mut tail = vec![0.0; counts.len()];
    let mut acc = 0usize;
    for i in (0..counts.len()).rev() {
        acc += counts[i];
        tail[i] = acc as f64 / replicates as f64;
    }
    let vals: Vec<f64> = counts
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n(i as f64, c))
        .collect();
    ExplorationSim {
        replicates,
        tail,
        distinct: mean_estimate(&vals),
    }
}

fn sharded<F>(replicates: usize, seed: u64, slots: usize, one: F) -> Vec<usize>
where
    F: Fn(&mut ChaCha8Rng) -> usize + Sync,
{
    let per = replicates / SHARDS;
    let extra = replicates % SHARDS;
    let shards: Vec<Vec<usize>> = (0..SHARDS)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64));
            let mut counts = vec![0usize; slots];
            for _ in 0..per + usize::from(s < extra) {
                counts[one(&mut rng)] += 1;
            }
            counts
        })
        .collect();
    let mut total = vec![0usize; slots];
    for c in shards {
        for (t, v) in total.iter_mut().zip(c) {
            *t += v;
        }
    }
    total
}

/// Uniform-random exploration over `N` abstract trajectories, the first
/// `|T|` of which are optimal: distinct optimal hits after `k` draws.
pub fn simulate_exploration(total: u64, optimal: u64, k: u64, replicates: usize, seed: u64) -> Result<ExplorationSim> {
    super::check_exploration(total, optimal, 0)?;
    if replicates == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let t = optimal as usize;
    let counts = sharded(replicates, seed, t + 1, |rng| {
        let mut seen = vec![false; t];
        let mut hits = 0;
        for _ in 0..k {
            let d = rng.random_range(0..total) as usize;
            if d < t && !seen[d] {
                seen[d] = true;
                hits += 1;
            }
        }
        hits
    });
    Ok(finish(counts, replicates))
}

/// Same measurement by rolling out a uniform random policy in `spec`;
/// `optimal` decides membership of a finished trajectory.
pub fn simulate_env_exploration<F>(
    spec: &Arc<MdpSpec>,
    optimal_count: usize,
    optimal: F,
    k: u64,
    replicates: usize,
    seed: u64,
) -> Result<ExplorationSim>
where
    F: Fn(&Trajectory) -> bool + Sync,
{
    if replicates == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let counts = sharded(replicates, seed, optimal_count + 1, |rng| {
        let mut env = EnvState::reset(Arc::clone(spec), rng.random());
        let mut seen = BTreeSet::new();
        for e in 0..k {
            if e > 0 {
                env.reset_episode();
            }
            let traj = env
                .rollout(|s| Ok(rng.random_range(0..spec.actions_at(s))))
                .expect("uniform actions are in range");
            if optimal(&traj) {
                seen.insert(traj.key());
            }
        }
        seen.len().min(optimal_count)
    });
    Ok(finish(counts, replicates))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImitationBoundReport {
    pub samples: usize,
    pub horizon: usize,
    /// Misclassification rate of the trained model on the optimal path.
    pub eta_emp: f64,
    pub d: f64,
    pub bound: f64,
    /// Normalized expected return of the classifier-induced policy.
    pub policy_return: f64,
    /// Normalized expected return of the pure greedy policy.
    pub greedy_return: f64,
    pub holds: bool,
}

/// Trains a squashed tabular model with hinge loss on `samples` draws from
/// the uniformly optimal policy of a single-optimal-leaf tree, measures its
/// error rate on that distribution, and compares the enumerated return of
/// the induced policy with the lower bound at the measured error.
///
/// The induced policy acts deterministically on optimal-path states the
/// model classifies correctly and by the pairwise probabilities of the
/// squashed λ everywhere else.
pub fn imitation_bound_check(depth: usize, optimal_leaf: usize, samples: usize, c_q: f64, seed: u64) -> Result<ImitationBoundReport> {
    let params = BinaryTreeParams::single_optimal(depth, optimal_leaf);
    let spec = make_binary_tree(&params)?;
    let (root, path) = params.layout().path_to_leaf(optimal_leaf);
    let mut targets = Vec::with_capacity(depth);
    let mut s = root;
    for &a in &path {
        targets.push((s, a));
        s = spec.transition_row(s, a)[0].0;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<_> = (0..samples).map(|_| *targets.choose(&mut rng).unwrap()).collect();
    let mut model = LambdaModel::tabular(spec.state_count(), 2)
        .with_squash(c_q)
        .init_uniform(&mut rng);
    if !batch.is_empty() {
        for _ in 0..2000 {
            let est = hinge_loss_and_grad(&model, &batch, 1.0)?;
            sgd_update(&mut model, &est.grad, 1.0)?;
        }
    }
    let correct: Vec<bool> = targets
        .iter()
        .map(|&(s, a)| model.forward(s).map(|l| greedy(&l) == a))
        .collect::<Result<_>>()?;
    let eta_emp = correct.iter().filter(|&&c| !c).count() as f64 / depth as f64;

    let all = enumerate_trajectories(&spec, crate::envs::DEFAULT_ENUMERATION_CAP)?;
    let r_max = all.iter().map(|(t, _)| t.reward()).fold(f64::MIN, f64::max);
    let optimal: Vec<_> = all.iter().filter(|(t, _)| t.reward() == r_max).collect();
    let log_mean = optimal.iter().map(|(_, p)| p.ln()).sum::<f64>() / optimal.len() as f64;
    let d = optimal.len() as f64 * log_mean.exp();

    let induced = |s: usize, a: usize| -> Result<f64> {
        let lambda = model.forward(s)?;
        if let Some(i) = targets.iter().position(|&(ts, _)| ts == s) {
            if correct[i] {
                return Ok(if a == targets[i].1 { 1.0 } else { 0.0 });
            }
        }
        Ok(pairwise_probs(&lambda, false)?[a])
    };
    let greedy_pi = |s: usize, a: usize| -> Result<f64> { Ok((greedy(&model.forward(s)?) == a) as u8 as f64) };
    let ret = |pi: &dyn Fn(usize, usize) -> Result<f64>| -> Result<f64> {
        let mut total = 0.0;
        for (t, pd) in &all {
            let mut p = *pd;
            for st in t.steps() {
                p *= pi(st.state, st.action)?;
            }
            total += p * t.reward() / r_max;
        }
        Ok(total)
    };
    let policy_return = ret(&induced)?;
    let greedy_return = ret(&greedy_pi)?;
    let bound = generalization_lower_bound(d, eta_emp, 2, depth)?;
    Ok(ImitationBoundReport {
        samples,
        horizon: depth,
        eta_emp,
        d,
        bound,
        policy_return,
        greedy_return,
        holds: policy_return >= bound,
    })
}
