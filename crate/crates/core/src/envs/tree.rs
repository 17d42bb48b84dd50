use super::{ActionId, MdpSpec, StateId};
use crate::error::{Error, Result};

/// Per-step reward on non-final tree edges. Rewards must be strictly
/// positive, and the tree only assigns value to leaves.
pub const DEFAULT_STEP_REWARD: f64 = 1e-9;

/// Deterministic binary tree: `roots` initial states, each the root of a
/// complete binary tree of depth `depth`. Every root-to-leaf path is one
/// trajectory; leaves are indexed `0..roots·2^depth` left to right.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryTreeParams {
    pub depth: usize,
    pub roots: usize,
    pub optimal_leaves: Vec<usize>,
    pub r_max: f64,
    /// Rewards of the non-optimal leaves: either one value for all of them or
    /// one per leaf (entries at optimal leaves are ignored).
    pub leaf_rewards: Vec<f64>,
    pub step_reward: f64,
}

impl BinaryTreeParams {
    /// Single-root tree with one optimal leaf worth 1 and 0.1 elsewhere.
    pub fn single_optimal(depth: usize, optimal_leaf: usize) -> Self {
        BinaryTreeParams {
            depth,
            roots: 1,
            optimal_leaves: vec![optimal_leaf],
            r_max: 1.0,
            leaf_rewards: vec![0.1],
            step_reward: DEFAULT_STEP_REWARD,
        }
    }

    pub fn layout(&self) -> TreeLayout {
        TreeLayout {
            depth: self.depth,
            roots: self.roots,
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.roots << self.depth
    }

    /// Reward assigned to `leaf`.
    pub fn leaf_reward(&self, leaf: usize) -> f64 {
        if self.optimal_leaves.contains(&leaf) {
            self.r_max
        } else if self.leaf_rewards.len() == 1 {
            self.leaf_rewards[0]
        } else {
            self.leaf_rewards[leaf]
        }
    }
}

/// Breadth-first numbering of a forest of complete binary trees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TreeLayout {
    pub depth: usize,
    pub roots: usize,
}

impl TreeLayout {
    /// Id of the `index`-th node (left to right across all roots) at `level`.
    pub fn node(&self, level: usize, index: usize) -> StateId {
        self.roots * ((1 << level) - 1) + index
    }

    pub fn node_count(&self) -> usize {
        self.roots * ((1 << (self.depth + 1)) - 1)
    }

    /// (level, index-within-level) of a node id.
    pub fn locate(&self, state: StateId) -> (usize, usize) {
        let mut level = 0;
        while level < self.depth && state >= self.node(level + 1, 0) {
            level += 1;
        }
        (level, state - self.node(level, 0))
    }

    /// Root state and action sequence leading to `leaf`.
    pub fn path_to_leaf(&self, leaf: usize) -> (StateId, Vec<ActionId>) {
        let root = leaf >> self.depth;
        let actions = (0..self.depth)
            .rev()
            .map(|bit| (leaf >> bit) & 1)
            .collect();
        (self.node(0, root), actions)
    }

    /// Leaf reached by a root-to-leaf trajectory's (state, action) sequence.
    pub fn leaf_of(&self, root: StateId, actions: &[ActionId]) -> usize {
        actions.iter().fold(root, |idx, &a| 2 * idx + a)
    }
}

/// Builds the tree MDP. Leaves are terminal; rewards sit on the edge into a leaf.
pub fn make_binary_tree(params: &BinaryTreeParams) -> Result<MdpSpec> {
    if params.depth == 0 || params.depth > 24 {
        return Err(Error::InvalidParameter(format!("tree depth {} outside 1..=24", params.depth)));
    }
    if params.roots == 0 {
        return Err(Error::InvalidParameter("tree needs at least one root".into()));
    }
    let leaves = params.leaf_count();
    if params.optimal_leaves.is_empty() {
        return Err(Error::InvalidParameter("optimal leaf set is empty".into()));
    }
    if let Some(&bad) = params.optimal_leaves.iter().find(|&&l| l >= leaves) {
        return Err(Error::InvalidParameter(format!(
            "optimal leaf {bad} out of range (tree has {leaves} leaves)"
        )));
    }
    if params.leaf_rewards.len() != 1 && params.leaf_rewards.len() != leaves {
        return Err(Error::InvalidParameter(format!(
            "expected 1 or {leaves} leaf rewards, got {}",
            params.leaf_rewards.len()
        )));
    }
    for leaf in 0..leaves {
        let r = params.leaf_reward(leaf);
        if !(r > 0.0 && r <= params.r_max) {
            return Err(Error::InvalidParameter(format!(
                "leaf {leaf} reward {r} must lie in (0, r_max={}]",
                params.r_max
            )));
        }
    }

    let layout = params.layout();
    let mut builder = MdpSpec::builder(layout.node_count(), 2, params.depth);
    let p0 = 1.0 / params.roots as f64;
    builder = builder.initial((0..params.roots).map(|r| (layout.node(0, r), p0)).collect());
    for level in 0..params.depth {
        for index in 0..(params.roots << level) {
            let s = layout.node(level, index);
            for a in 0..2 {
                let child = 2 * index + a;
                let reward = if level + 1 == params.depth {
                    params.leaf_reward(child)
                } else {
                    params.step_reward
                };
                builder = builder
                    .transition(s, a, vec![(layout.node(level + 1, child), 1.0)])
                    .reward(s, a, reward);
            }
        }
    }
    for index in 0..leaves {
        builder = builder.terminal(layout.node(params.depth, index));
    }
    builder.build()
}
