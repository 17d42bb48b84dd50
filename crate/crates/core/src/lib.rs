//! Ranking policy gradient on small finite-horizon MDPs.
//!
//! * [`envs`]: MDP description, episode cursor, tree/chain/grid suite.
//! * [`model`]: λ-value models (tabular, linear, MLP), SGD, checkpoints.
//! * [`policy`]: pairwise and listwise policies over λ.
//! * [`gradients`]: trajectory estimators and supervised losses.
//! * [`offpolicy`]: shaping, replay buffers and the explore/imitate loop.
//! * [`theory`]: sample-complexity and exploration-efficiency calculators.
//! * [`harness`]: configs, metrics CSV, seed sweeps, aggregation.

pub mod envs;
pub mod error;
pub mod gradients;
pub mod harness;
pub mod model;
pub mod offpolicy;
pub mod policy;
pub mod theory;

pub use error::{Error, Result};
