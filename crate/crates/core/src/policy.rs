//! From λ-vectors to action choices.
//!
//! The pairwise policy scores action `i` by `Π_{j≠i} σ(λ_i − λ_j)`; for
//! `m > 2` those scores need not sum to one, and an optional bookkeeping
//! "dummy" entry absorbs the remainder. The listwise policy is the softmax
//! top-one probability. Both share greedy selection (argmax of λ, lowest
//! index on ties).

use rand::Rng;

use crate::envs::{ActionId, MdpSpec, Trajectory};
use crate::error::{Error, Result};
use crate::model::{sigmoid, Input, LambdaModel};

/// A dummy entry that is negative by less than this is clamped to zero.
pub const DUMMY_TOLERANCE: f64 = 1e-12;

/// `p_ij = exp(λ_i − λ_j) / (1 + exp(λ_i − λ_j))`, overflow-free.
pub fn pairwise_prob(lambda_i: f64, lambda_j: f64) -> f64 {
    sigmoid(lambda_i - lambda_j)
}

/// Pairwise ranking probabilities for one λ-vector, with the dummy entry
/// appended when `dummy` is set.
pub fn pairwise_probs(lambda: &[f64], dummy: bool) -> Result<Vec<f64>> {
    let mut probs: Vec<f64> = (0..lambda.len())
        .map(|i| {
            (0..lambda.len())
                .filter(|&j| j != i)
                .map(|j| pairwise_prob(lambda[i], lambda[j]))
                .product()
        })
        .collect();
    if dummy {
        let rest = 1.0 - probs.iter().sum::<f64>();
        if rest < -DUMMY_TOLERANCE {
            return Err(Error::RangeConditionViolated { dummy: rest });
        }
        probs.push(rest.max(0.0));
    }
    Ok(probs)
}

/// Lower bound `ln(m^{1/(m−1)} − 1)` on every pairwise difference `λ_j − λ_i`
/// under which the pairwise scores sum to at most one.
pub fn condition2_threshold(m: usize) -> f64 {
    assert!(m >= 2, "threshold needs m >= 2");
    let m = m as f64;
    (m.powf(1.0 / (m - 1.0)) - 1.0).ln()
}

/// Max-subtracted softmax of `λ / temperature`.
pub fn softmax(lambda: &[f64], temperature: f64) -> Vec<f64> {
    let max = lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = lambda.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Argmax with lowest-index tie-break.
pub fn greedy(lambda: &[f64]) -> ActionId {
    let mut best = 0;
    for (i, &l) in lambda.iter().enumerate().skip(1) {
        if l > lambda[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    Greedy,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Pairwise,
    Listwise,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise" => Ok(PolicyKind::Pairwise),
            "listwise" => Ok(PolicyKind::Listwise),
            other => Err(Error::Config(format!("unknown policy '{other}'"))),
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PolicyKind::Pairwise => "pairwise",
            PolicyKind::Listwise => "listwise",
        })
    }
}

/// Stochastic policy over a model's real actions.
pub trait Policy {
    fn model(&self) -> &LambdaModel;

    /// Probabilities of the real actions followed by any bookkeeping entries.
    fn action_probs(&self, input: Input<'_>) -> Result<Vec<f64>>;

    /// Probabilities of the real actions only, renormalized to sum to one.
    fn sampling_probs(&self, input: Input<'_>) -> Result<Vec<f64>> {
        let m = self.model().action_count();
        let mut p = self.action_probs(input)?;
        p.truncate(m);
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        Ok(p)
    }
}

#[derive(Clone, Debug)]
pub struct PairwisePolicy {
    pub model: LambdaModel,
    pub dummy_action: bool,
}

impl PairwisePolicy {
    pub fn new(model: LambdaModel, dummy_action: bool) -> Self {
        PairwisePolicy { model, dummy_action }
    }
}

impl Policy for PairwisePolicy {
    fn model(&self) -> &LambdaModel {
        &self.model
    }

    fn action_probs(&self, input: Input<'_>) -> Result<Vec<f64>> {
        pairwise_probs(&self.model.forward(input)?, self.dummy_action)
    }
}

#[derive(Clone, Debug)]
pub struct ListwisePolicy {
    pub model: LambdaModel,
    pub temperature: f64,
}

impl ListwisePolicy {
    pub fn new(model: LambdaModel) -> Self {
        ListwisePolicy {
            model,
            temperature: 1.0,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }
}

impl Policy for ListwisePolicy {
    fn model(&self) -> &LambdaModel {
        &self.model
    }

    fn action_probs(&self, input: Input<'_>) -> Result<Vec<f64>> {
        Ok(softmax(&self.model.forward(input)?, self.temperature))
    }
}

/// Greedy argmax of λ, or a draw from the policy's real-action distribution.
/// The dummy action is never returned.
pub fn select_action<P: Policy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    input: Input<'_>,
    mode: SelectMode,
    rng: &mut R,
) -> Result<ActionId> {
    match mode {
        SelectMode::Greedy => Ok(greedy(&policy.model().forward(input)?)),
        SelectMode::Sample => Ok(sample_index(&policy.sampling_probs(input)?, rng)),
    }
}

pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// `log p_θ(τ) = log p_d(τ) + Σ_t log π(a_t|s_t)` for a trajectory with known
/// dynamics probability.
pub fn trajectory_log_prob<P: Policy + ?Sized>(policy: &P, traj: &Trajectory, dynamics_prob: f64) -> Result<f64> {
    let mut lp = dynamics_prob.ln();
    for step in traj.steps() {
        lp += policy.action_probs(Input::State(step.state))?[step.action].ln();
    }
    Ok(lp)
}

/// Expected trajectory reward `Σ_τ p_θ(τ) r(τ)` by full enumeration, together
/// with the total probability mass (1 for a proper policy).
pub fn expected_return<P: Policy + ?Sized>(policy: &P, spec: &MdpSpec) -> Result<(f64, f64)> {
    let all = crate::envs::enumerate_trajectories(spec, crate::envs::DEFAULT_ENUMERATION_CAP)?;
    let mut ret = 0.0;
    let mut mass = 0.0;
    for (traj, pd) in &all {
        let p = trajectory_log_prob(policy, traj, *pd)?.exp();
        ret += p * traj.reward();
        mass += p;
    }
    Ok((ret, mass))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn pairwise_prob_values() {
        assert_eq!(pairwise_prob(0.7, 0.7), 0.5);
        let p = pairwise_prob(40.0, 0.0);
        assert!(p <= 1.0 && 1.0 - p < 1e-17);
        assert!(pairwise_prob(-700.0, 0.0) > 0.0);
        assert!(pairwise_prob(700.0, -0.0).is_finite());
        assert!((pairwise_prob(3f64.ln(), 0.0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn pairwise_policy_examples() {
        assert_eq!(pairwise_probs(&[0.3, 0.3], false).unwrap(), vec![0.5, 0.5]);
        let p = pairwise_probs(&[1.0, 1.0, 1.0], true).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_matches_direct_products() {
        let lam = [2.0, 0.0, 0.0];
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect = [s(2.0) * s(2.0), s(-2.0) * s(0.0), s(-2.0) * s(0.0)];
        let got = pairwise_probs(&lam, false).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn dummy_absorbs_the_remainder() {
        // all equal, m=4: each real action gets 1/8
        let p = pairwise_probs(&[0.0, 0.0, 0.0, 0.0], true).unwrap();
        assert!((p[4] - 0.5).abs() < 1e-12);
        // m=2 never needs the dummy
        assert!(pairwise_probs(&[3.0, -3.0], true).unwrap()[2].abs() < 1e-12);
        // well-separated values concentrate mass on the leader
        let p = pairwise_probs(&[30.0, 0.0, -30.0], true).unwrap();
        assert!(p[3] < 1e-12);
    }

    #[test]
    fn thresholds() {
        assert_eq!(condition2_threshold(2), 0.0);
        assert!((condition2_threshold(3) - (3f64.sqrt() - 1.0).ln()).abs() < 1e-15);
        assert!((condition2_threshold(3) + 0.311_905_358_182_435_7).abs() < 1e-15);
        for m in 2..64 {
            assert!(condition2_threshold(m + 1) < condition2_threshold(m));
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0], 1.0);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let a = softmax(&[0.2, -1.0, 3.0], 1.0);
        let b = softmax(&[100.2, 99.0, 103.0], 1.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let e = std::f64::consts::E;
        let p = softmax(&[1.0, 0.0], 1.0);
        assert!((p[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn greedy_and_ties() {
        assert_eq!(greedy(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(greedy(&[0.5, 0.5]), 0);
    }

    #[test]
    fn sampled_frequency() {
        let mut model = LambdaModel::tabular(1, 2);
        model.params_mut()[0] = 9f64.ln();
        let policy = ListwisePolicy::new(model.clone());
        let pairwise = PairwisePolicy::new(model, true);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        for p in [&policy as &dyn Policy, &pairwise as &dyn Policy] {
            let zeros = (0..n)
                .filter(|_| select_action(p, Input::State(0), SelectMode::Sample, &mut rng).unwrap() == 0)
                .count();
            let f = zeros as f64 / n as f64;
            assert!((f - 0.9).abs() < 0.01, "{f}");
        }
    }

    #[test]
    fn dummy_never_sampled() {
        let model = LambdaModel::tabular(1, 3);
        let policy = PairwisePolicy::new(model, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!(select_action(&policy, Input::State(0), SelectMode::Sample, &mut rng).unwrap() < 3);
        }
    }
}
