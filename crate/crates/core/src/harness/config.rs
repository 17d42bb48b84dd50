//! Flat `key = value` config files. `#` starts a comment; blank lines are
//! ignored. `algorithm` is applied first as a preset, then every other key
//! overrides it, so a serialized config parses back to the same value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::offpolicy::{Algorithm, TrainRunConfig};

/// Ordered key/value pairs with duplicate detection.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        let key = k.trim().to_string();
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
        }
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on|off, got '{v}'"))),
    }
}

fn optional(key: &str, v: &str, none: &str) -> Result<Option<f64>> {
    if v == none {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

/// Parses a config from already split pairs; unknown keys are rejected.
pub fn config_from_pairs(pairs: &BTreeMap<String, String>) -> Result<TrainRunConfig> {
    let mut cfg = TrainRunConfig::default();
    if let Some(a) = pairs.get("algorithm") {
        cfg.apply_preset(a.parse::<Algorithm>()?);
    }
    for (k, v) in pairs {
        let v = v.as_str();
        match k.as_str() {
            "algorithm" => {}
            "env" => cfg.env = v.to_string(),
            "loss" => cfg.loss = v.parse()?,
            "explorer" => cfg.explorer = v.parse()?,
            "eps" => cfg.eps = num(k, v)?,
            "model" => cfg.model = v.parse()?,
            "hidden" => {
                cfg.hidden = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num(k, s.trim()))
                    .collect::<Result<_>>()?
            }
            "c_q" => cfg.c_q = optional(k, v, "off")?,
            "policy" => cfg.policy = v.parse()?,
            "dummy_action" => cfg.dummy_action = switch(k, v)?,
            "temperature" => cfg.temperature = num(k, v)?,
            "max_episodes" => cfg.max_episodes = num(k, v)?,
            "max_steps" => cfg.max_steps = num(k, v)?,
            "batch_size" => cfg.batch_size = num(k, v)?,
            "update_period" => cfg.update_period = num(k, v)?,
            "eval_period" => cfg.eval_period = num(k, v)?,
            "eval_episodes" => cfg.eval_episodes = num(k, v)?,
            "eval_mode" => cfg.eval_mode = v.parse()?,
            "seed" => cfg.seed = num(k, v)?,
            "learning_rate" => cfg.learning_rate = num(k, v)?,
            "explorer_learning_rate" => cfg.explorer_learning_rate = num(k, v)?,
            "momentum" => cfg.momentum = num(k, v)?,
            "margin" => cfg.margin = num(k, v)?,
            "regular_capacity" => cfg.regular_capacity = num(k, v)?,
            "nearopt_capacity" => cfg.nearopt_capacity = num(k, v)?,
            "unique_trajectories" => cfg.unique_trajectories = switch(k, v)?,
            "threshold" => cfg.threshold = optional(k, v, "auto")?,
            "epsilon" => cfg.epsilon = num(k, v)?,
            "shaping" => cfg.shaping = v.parse()?,
            "target" => cfg.target = optional(k, v, "auto")?,
            "audit_samples" => cfg.audit_samples = num(k, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
    }
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<TrainRunConfig> {
    config_from_pairs(&parse_pairs(text)?)
}

/// Every key, one per line, in a fixed order.
pub fn serialize_config(cfg: &TrainRunConfig) -> String {
    let onoff = |b: bool| if b { "on" } else { "off" };
    let opt = |x: Option<f64>, none: &str| x.map_or(none.to_string(), |v| v.to_string());
    let hidden: Vec<String> = cfg.hidden.iter().map(|h| h.to_string()).collect();
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("algorithm", cfg.algorithm.to_string());
    kv("env", cfg.env.clone());
    kv("loss", cfg.loss.to_string());
    kv("explorer", cfg.explorer.to_string());
    kv("eps", cfg.eps.to_string());
    kv("model", cfg.model.to_string());
    kv("hidden", hidden.join(","));
    kv("c_q", opt(cfg.c_q, "off"));
    kv("policy", cfg.policy.to_string());
    kv("dummy_action", onoff(cfg.dummy_action).into());
    kv("temperature", cfg.temperature.to_string());
    kv("max_episodes", cfg.max_episodes.to_string());
    kv("max_steps", cfg.max_steps.to_string());
    kv("batch_size", cfg.batch_size.to_string());
    kv("update_period", cfg.update_period.to_string());
    kv("eval_period", cfg.eval_period.to_string());
    kv("eval_episodes", cfg.eval_episodes.to_string());
    kv("eval_mode", cfg.eval_mode.to_string());
    kv("seed", cfg.seed.to_string());
    kv("learning_rate", cfg.learning_rate.to_string());
    kv("explorer_learning_rate", cfg.explorer_learning_rate.to_string());
    kv("momentum", cfg.momentum.to_string());
    kv("margin", cfg.margin.to_string());
    kv("regular_capacity", cfg.regular_capacity.to_string());
    kv("nearopt_capacity", cfg.nearopt_capacity.to_string());
    kv("unique_trajectories", onoff(cfg.unique_trajectories).into());
    kv("threshold", opt(cfg.threshold, "auto"));
    kv("epsilon", cfg.epsilon.to_string());
    kv("shaping", cfg.shaping.to_string());
    kv("target", opt(cfg.target, "auto"));
    kv("audit_samples", cfg.audit_samples.to_string());
    s
}
