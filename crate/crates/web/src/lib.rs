use std::sync::Arc;

use wasm_bindgen::prelude::*;

use rankgrad::envs::{make_binary_tree, BinaryTreeParams};
use rankgrad::offpolicy::{train, Algorithm, TrainRunConfig};
use rankgrad::policy::{pairwise_probs, softmax};
use rankgrad::theory::{exploration_efficiency_random, simulate_exploration};

fn js_err(e: rankgrad::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Action probabilities for a λ vector. `kind` is "pairwise" or "listwise";
/// with `dummy` the pairwise result carries the dummy entry last.
#[wasm_bindgen]
pub fn policy_probs(lambda: Vec<f64>, kind: &str, dummy: bool) -> Result<Vec<f64>, JsValue> {
    if lambda.is_empty() {
        return Err("need at least one action".into());
    }
    match kind {
        "pairwise" => pairwise_probs(&lambda, dummy).map_err(js_err),
        "listwise" => Ok(softmax(&lambda, 1.0)),
        other => Err(format!("unknown policy kind '{other}'").into()),
    }
}

/// `P(at least i distinct optimal trajectories | k)` for `k = 1..=k_max`:
/// the closed form followed by a Monte Carlo estimate, `2·k_max` values.
#[wasm_bindgen]
pub fn exploration_curve(total: u32, optimal: u32, i: u32, k_max: u32, replicates: u32, seed: u32) -> Result<Vec<f64>, JsValue> {
    let (total, optimal, i) = (total as u64, optimal as u64, i as u64);
    let mut exact = Vec::with_capacity(k_max as usize);
    let mut sim = Vec::with_capacity(k_max as usize);
    for k in 1..=k_max as u64 {
        exact.push(exploration_efficiency_random(total, optimal, k, i).map_err(js_err)?);
        let s = simulate_exploration(total, optimal, k, replicates as usize, seed as u64 + k).map_err(js_err)?;
        sim.push(s.tail[i as usize]);
    }
    exact.extend(sim);
    Ok(exact)
}

/// Trains on a single-root binary tree and returns the evaluation curve as
/// flat `(step, mean return, buffer size)` triples.
#[wasm_bindgen]
pub fn train_tree(depth: u32, optimal_leaf: u32, algorithm: &str, seed: u32, max_steps: u32) -> Result<Vec<f64>, JsValue> {
    let algorithm = match algorithm {
        "rpg" => Algorithm::Rpg,
        "lpg" => Algorithm::Lpg,
        "reinforce" => Algorithm::Reinforce,
        other => return Err(format!("unknown algorithm '{other}'").into()),
    };
    let params = BinaryTreeParams::single_optimal(depth as usize, optimal_leaf as usize);
    let spec = Arc::new(make_binary_tree(&params).map_err(js_err)?);
    let mut cfg = TrainRunConfig::preset(algorithm);
    cfg.seed = seed as u64;
    cfg.max_steps = max_steps as usize;
    cfg.eval_period = 50;
    let log = train(&cfg, spec).map_err(js_err)?;
    Ok(log
        .records
        .iter()
        .flat_map(|r| [r.step as f64, r.eval_return_mean, r.buffer_nearopt as f64])
        .collect())
}
