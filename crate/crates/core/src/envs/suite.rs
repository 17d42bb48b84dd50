use std::collections::BTreeMap;

use super::tree::{make_binary_tree, BinaryTreeParams, DEFAULT_STEP_REWARD};
use super::MdpSpec;
use crate::error::{Error, Result};

/// Line of `states` cells. Action 0 moves left, 1 moves right; with
/// probability `slip` the opposite move happens. Starting at cell 0, every
/// action taken in the rightmost cell pays `goal_reward`, anything else pays
/// `step_reward`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainParams {
    pub states: usize,
    pub horizon: usize,
    pub slip: f64,
    pub goal_reward: f64,
    pub step_reward: f64,
}

impl Default for ChainParams {
    fn default() -> Self {
        ChainParams {
            states: 5,
            horizon: 8,
            slip: 0.3,
            goal_reward: 1.0,
            step_reward: 0.01,
        }
    }
}

pub fn make_chain(params: &ChainParams) -> Result<MdpSpec> {
    if params.states < 2 {
        return Err(Error::InvalidParameter("chain needs at least 2 states".into()));
    }
    if !(0.0..=1.0).contains(&params.slip) {
        return Err(Error::InvalidParameter(format!("slip {} outside [0,1]", params.slip)));
    }
    let n = params.states;
    let mut b = MdpSpec::builder(n, 2, params.horizon).initial(vec![(0, 1.0)]);
    for s in 0..n {
        let left = s.saturating_sub(1);
        let right = (s + 1).min(n - 1);
        let reward = if s == n - 1 {
            params.goal_reward
        } else {
            params.step_reward
        };
        b = b
            .transition(s, 0, merge_row(&[(left, 1.0 - params.slip), (right, params.slip)]))
            .transition(s, 1, merge_row(&[(right, 1.0 - params.slip), (left, params.slip)]))
            .reward(s, 0, reward)
            .reward(s, 1, reward);
    }
    b.build()
}

fn merge_row(entries: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut map = BTreeMap::new();
    for &(s, p) in entries {
        *map.entry(s).or_insert(0.0) += p;
    }
    map.into_iter().collect()
}

/// Deterministic `width × height` grid with four moves (up, down, left,
/// right; walls block). Start top-left, goal bottom-right is terminal; the
/// move that enters the goal pays `goal_reward`. This is the one suite
/// member with m = 4.
#[derive(Clone, Debug, PartialEq)]
pub struct GridParams {
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
    pub goal_reward: f64,
    pub step_reward: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            width: 3,
            height: 3,
            horizon: 6,
            goal_reward: 1.0,
            step_reward: 0.01,
        }
    }
}

pub fn make_grid(params: &GridParams) -> Result<MdpSpec> {
    let (w, h) = (params.width, params.height);
    if w * h < 2 {
        return Err(Error::InvalidParameter("grid needs at least 2 cells".into()));
    }
    let goal = w * h - 1;
    let mut b = MdpSpec::builder(w * h, 4, params.horizon)
        .initial(vec![(0, 1.0)])
        .terminal(goal);
    for s in 0..goal {
        let (x, y) = (s % w, s / w);
        let moves = [
            if y > 0 { s - w } else { s },
            if y + 1 < h { s + w } else { s },
            if x > 0 { s - 1 } else { s },
            if x + 1 < w { s + 1 } else { s },
        ];
        for (a, &next) in moves.iter().enumerate() {
            let reward = if next == goal {
                params.goal_reward
            } else {
                params.step_reward
            };
            b = b.transition(s, a, vec![(next, 1.0)]).reward(s, a, reward);
        }
    }
    b.build()
}

/// Parses an environment descriptor such as
/// `tree:T=4,roots=1,opt=0,rewards=0.1`, `chain:n=5,T=8,slip=0.3` or
/// `grid:w=3,h=3,T=6`. List values continue across commas until the next
/// `key=`.
pub fn parse_env(desc: &str) -> Result<MdpSpec> {
    let (kind, rest) = desc.split_once(':').unwrap_or((desc, ""));
    let args = parse_args(rest)?;
    let get_usize = |key: &str, default: usize| -> Result<usize> {
        match args.get(key) {
            None => Ok(default),
            Some(v) if v.len() == 1 => v[0]
                .parse()
                .map_err(|_| Error::Config(format!("{kind}: {key}={} is not an integer", v[0]))),
            Some(_) => Err(Error::Config(format!("{kind}: {key} takes a single value"))),
        }
    };
    let get_f64 = |key: &str, default: f64| -> Result<f64> {
        match args.get(key) {
            None => Ok(default),
            Some(v) if v.len() == 1 => v[0]
                .parse()
                .map_err(|_| Error::Config(format!("{kind}: {key}={} is not a number", v[0]))),
            Some(_) => Err(Error::Config(format!("{kind}: {key} takes a single value"))),
        }
    };
    let allowed: &[&str] = match kind.trim() {
        "tree" => &["T", "roots", "opt", "rewards", "rmax", "step"],
        "chain" => &["n", "T", "slip", "goal", "step"],
        "grid" => &["w", "h", "T", "goal", "step"],
        other => return Err(Error::Config(format!("unknown environment kind '{other}'"))),
    };
    if let Some(bad) = args.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::Config(format!("{kind}: unknown key '{bad}'")));
    }

    match kind.trim() {
        "tree" => {
            let opt = match args.get("opt") {
                None => vec![0],
                Some(v) => v
                    .iter()
                    .map(|s| s.parse().map_err(|_| Error::Config(format!("tree: bad leaf id '{s}'"))))
                    .collect::<Result<Vec<usize>>>()?,
            };
            let rewards = match args.get("rewards") {
                None => None,
                Some(v) => Some(
                    v.iter()
                        .map(|s| s.parse().map_err(|_| Error::Config(format!("tree: bad reward '{s}'"))))
                        .collect::<Result<Vec<f64>>>()?,
                ),
            };
            let default_rmax = rewards
                .as_ref()
                .map(|r| r.iter().copied().fold(1.0, f64::max))
                .unwrap_or(1.0);
            let r_max = get_f64("rmax", default_rmax)?;
            let params = BinaryTreeParams {
                depth: get_usize("T", 3)?,
                roots: get_usize("roots", 1)?,
                optimal_leaves: opt,
                r_max,
                leaf_rewards: rewards.unwrap_or_else(|| vec![0.1 * r_max]),
                step_reward: get_f64("step", DEFAULT_STEP_REWARD)?,
            };
            make_binary_tree(&params)
        }
        "chain" => {
            let d = ChainParams::default();
            make_chain(&ChainParams {
                states: get_usize("n", d.states)?,
                horizon: get_usize("T", d.horizon)?,
                slip: get_f64("slip", d.slip)?,
                goal_reward: get_f64("goal", d.goal_reward)?,
                step_reward: get_f64("step", d.step_reward)?,
            })
        }
        _ => {
            let d = GridParams::default();
            make_grid(&GridParams {
                width: get_usize("w", d.width)?,
                height: get_usize("h", d.height)?,
                horizon: get_usize("T", d.horizon)?,
                goal_reward: get_f64("goal", d.goal_reward)?,
                step_reward: get_f64("step", d.step_reward)?,
            })
        }
    }
}

fn parse_args(rest: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut args: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for token in rest.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match token.split_once('=') {
            Some((k, v)) => {
                let key = k.trim().to_string();
                if args.contains_key(&key) {
                    return Err(Error::Config(format!("duplicate key '{key}'")));
                }
                args.insert(key.clone(), vec![v.trim().to_string()]);
                current = Some(key);
            }
            None => match &current {
                Some(key) => args.get_mut(key).unwrap().push(token.to_string()),
                None => return Err(Error::Config(format!("value '{token}' has no key"))),
            },
        }
    }
    Ok(args)
}
