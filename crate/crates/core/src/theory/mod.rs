//! Sample-complexity and exploration-efficiency calculators, with Monte
//! Carlo validators. Logarithms are natural throughout.

mod sim;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

pub use sim::{
    simulate_env_exploration, simulate_exploration, imitation_bound_check, ExplorationSim, ImitationBoundReport,
};

use crate::error::{Error, Result};

/// Reported alongside every calculator result.
pub const LOG_BASE: &str = "e";

/// Above this many bits in `N^k` the inclusion–exclusion sum is evaluated in
/// compensated floating point instead of exact rationals.
pub const EXACT_BITS: u64 = 512;

fn param(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter(msg()))
    }
}

fn check_delta(name: &str, delta: f64) -> Result<()> {
    param(delta > 0.0 && delta < 1.0, || format!("{name} = {delta} not in (0, 1)"))
}

/// `(1/(2γ²)) ln(2|H|/δ)` before rounding up.
pub fn sl_sample_bound(gamma: f64, delta: f64, hypotheses: u64) -> Result<f64> {
    param(gamma.is_finite() && gamma > 0.0, || format!("gamma = {gamma} must be positive"))?;
    check_delta("delta", delta)?;
    param(hypotheses >= 1, || "need at least one hypothesis".into())?;
    Ok((2.0 * hypotheses as f64 / delta).ln() / (2.0 * gamma * gamma))
}

/// Smallest sample count meeting the finite-class PAC bound.
pub fn sl_sample_complexity(gamma: f64, delta: f64, hypotheses: u64) -> Result<u64> {
    Ok(sl_sample_bound(gamma, delta, hypotheses)?.ceil() as u64)
}

/// `D (1+e)^{η(1−m)T}`: lower bound on the expected normalized return of a
/// policy whose imitation error is at most `η`.
pub fn generalization_lower_bound(d: f64, eta: f64, m: usize, horizon: usize) -> Result<f64> {
    param(d.is_finite() && d > 0.0, || format!("D = {d} must be positive"))?;
    param(eta.is_finite() && eta >= 0.0, || format!("eta = {eta} must be non-negative"))?;
    param(m >= 2 && horizon >= 1, || "need m >= 2 and T >= 1".into())?;
    let e1 = 1.0 + std::f64::consts::E;
    Ok(d * e1.powf(eta * (1.0 - m as f64) * horizon as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RlBound {
    /// Unrounded sample count.
    pub n_exact: f64,
    pub n_min: u64,
    /// Largest imitation error for which the return bound reaches `1 − ε`.
    pub eta: f64,
}

/// Samples needed so that the imitating policy reaches `1 − ε` of the
/// optimal normalized return with probability `1 − δ`.
pub fn rl_sample_complexity(
    eps: f64,
    d: f64,
    m: usize,
    horizon: usize,
    hypotheses: u64,
    delta: f64,
) -> Result<RlBound> {
    check_delta("epsilon", eps)?;
    check_delta("delta", delta)?;
    param(d.is_finite() && d > 0.0, || format!("D = {d} must be positive"))?;
    param(m >= 2 && horizon >= 1, || "need m >= 2 and T >= 1".into())?;
    param(hypotheses >= 1, || "need at least one hypothesis".into())?;
    let ratio = d / (1.0 - eps);
    if ratio <= 1.0 {
        return Err(Error::Infeasible(format!(
            "D = {d} does not exceed 1 - epsilon = {}",
            1.0 - eps
        )));
    }
    let log_e1 = (1.0 + std::f64::consts::E).ln();
    let l = ratio.ln() / log_e1;
    let mt = (m - 1) as f64 * horizon as f64;
    let n_exact = 2.0 * mt * mt / (l * l) * (2.0 * hypotheses as f64 / delta).ln();
    Ok(RlBound {
        n_exact,
        n_min: n_exact.ceil() as u64,
        eta: l / mt,
    })
}

/// Imitation error guaranteed by `n` samples with confidence `1 − δ`:
/// `2 √(ln(2|H|/δ) / (2n))`.
pub fn eta_from_samples(n: f64, hypotheses: u64, delta: f64) -> Result<f64> {
    check_delta("delta", delta)?;
    param(n > 0.0, || "need n > 0".into())?;
    Ok(2.0 * ((2.0 * hypotheses as f64 / delta).ln() / (2.0 * n)).sqrt())
}

fn binom(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for j in 0..k {
        acc = acc * (n - j) / (j + 1);
    }
    acc
}

fn binom_f64(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

fn check_exploration(total: u64, optimal: u64, i: u64) -> Result<()> {
    param(total >= 1, || "N must be positive".into())?;
    param(optimal <= total, || format!("|T| = {optimal} exceeds N = {total}"))?;
    param(i <= optimal, || format!("i = {i} exceeds |T| = {optimal}"))
}

/// `P(n_traj ≥ i | k)`: probability that `k` uniform draws from `N`
/// trajectories hit at least `i` distinct members of an optimal set of size
/// `|T|`, by inclusion–exclusion.
pub fn exploration_efficiency_random(total: u64, optimal: u64, k: u64, i: u64) -> Result<f64> {
    check_exploration(total, optimal, i)?;
    if i == 0 {
        return Ok(1.0);
    }
    let bits = k as f64 * (total as f64).log2();
    let p = if bits <= EXACT_BITS as f64 {
        exact_tail(total, optimal, k, i)
    } else {
        float_tail(total, optimal, k, i)
    };
    Ok(p.clamp(0.0, 1.0))
}

/// `P(n_traj = i' | k)` for `i' < i`, summed, as an exact rational.
fn exact_head(total: u64, optimal: u64, k: u64, i: u64) -> BigRational {
    let k32 = u32::try_from(k).expect("exact path only for small k");
    let denom = BigInt::from(BigUint::from(total).pow(k32));
    let mut num = BigInt::zero();
    for ip in 0..i {
        let mut inner = BigInt::zero();
        for j in 0..=ip {
            let base = total - optimal + ip - j;
            let term = BigInt::from(binom(ip, j) * BigUint::from(base).pow(k32));
            if j % 2 == 0 {
                inner += term;
            } else {
                inner -= term;
            }
        }
        num += BigInt::from(binom(optimal, ip)) * inner;
    }
    BigRational::new(num, denom)
}

fn exact_tail(total: u64, optimal: u64, k: u64, i: u64) -> f64 {
    (BigRational::one() - exact_head(total, optimal, k, i))
        .to_f64()
        .unwrap_or(f64::NAN)
}

fn float_tail(total: u64, optimal: u64, k: u64, i: u64) -> f64 {
    // Neumaier-compensated sum of the alternating terms
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    let mut add = |x: f64| {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    };
    for ip in 0..i {
        let outer = binom_f64(optimal, ip);
        for j in 0..=ip {
            let frac = (total - optimal + ip - j) as f64 / total as f64;
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            add(sign * outer * binom_f64(ip, j) * frac.powf(k as f64));
        }
    }
    1.0 - (sum + comp)
}

/// `E[n_traj | k] = Σ_{i≥1} P(n_traj ≥ i | k)` for uniform random
/// exploration.
pub fn expected_exploration_efficiency(total: u64, optimal: u64, k: u64) -> Result<f64> {
    check_exploration(total, optimal, 0)?;
    (1..=optimal).map(|i| exploration_efficiency_random(total, optimal, k, i)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub replicates: usize,
}

/// Mean distinct near-optimal trajectory count after episode `k` across
/// recorded runs. Runs that stopped earlier contribute their last count.
pub fn expected_exploration_from_logs(logs: &[&crate::offpolicy::RunLog], k: usize) -> Result<MeanEstimate> {
    if logs.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let vals: Vec<f64> = logs
        .iter()
        .map(|l| {
            if k == 0 {
                0.0
            } else {
                l.distinct_by_episode
                    .get(k - 1)
                    .or(l.distinct_by_episode.last())
                    .copied()
                    .unwrap_or(0) as f64
            }
        })
        .collect();
    Ok(mean_estimate(&vals))
}

pub(crate) fn mean_estimate(vals: &[f64]) -> MeanEstimate {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std_err = if vals.len() > 1 {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    MeanEstimate {
        mean,
        std_err,
        replicates: vals.len(),
    }
}

/// `(1 − p)^n`: chance that `n` independent episodes all miss a trajectory
/// of probability `p`.
pub fn hit_probability_decay(p: f64, n: u64) -> Result<f64> {
    param(p > 0.0 && p <= 1.0, || format!("p = {p} not in (0, 1]"))?;
    Ok((1.0 - p).powf(n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointBound {
    /// Distinct optimal trajectories required, `⌈n/T⌉`.
    pub trajectories_needed: u64,
    /// Probability that exploration found them within `k` episodes.
    pub p_explore: f64,
    pub eta: f64,
    pub lower_bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointBoundInput {
    pub delta: f64,
    pub n: u64,
    pub k: u64,
    pub total: u64,
    pub optimal: u64,
    pub hypotheses: u64,
    pub m: usize,
    pub horizon: usize,
    pub d: f64,
}

/// Imitation error and return bound that hold jointly over exploration and
/// supervised learning, with `n` samples read as `⌈n/T⌉` distinct
/// trajectories.
pub fn joint_bound(inp: &JointBoundInput) -> Result<JointBound> {
    check_delta("delta'", inp.delta)?;
    param(inp.n >= 1 && inp.horizon >= 1, || "need n >= 1 and T >= 1".into())?;
    param(inp.hypotheses >= 1, || "need at least one hypothesis".into())?;
    let needed = inp.n.div_ceil(inp.horizon as u64);
    if needed > inp.optimal {
        return Err(Error::Infeasible(format!(
            "{needed} distinct trajectories needed but only {} are optimal",
            inp.optimal
        )));
    }
    let p = exploration_efficiency_random(inp.total, inp.optimal, inp.k, needed)?;
    let slack = p - 1.0 + inp.delta;
    if slack <= 0.0 {
        return Err(Error::Infeasible(format!(
            "exploration probability {p} leaves no room for delta' = {}",
            inp.delta
        )));
    }
    let eta = 2.0 * ((2.0 * inp.hypotheses as f64 * p / slack).ln() / (2.0 * inp.n as f64)).sqrt();
    Ok(JointBound {
        trajectories_needed: needed,
        p_explore: p,
        eta,
        lower_bound: generalization_lower_bound(inp.d, eta, inp.m, inp.horizon)?,
    })
}
