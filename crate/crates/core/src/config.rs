//! Training hyperparameters, presets and the flat `key = value` format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bayes::{EtaMode, FirstLoss};
use crate::entropy::EntropyVariant;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Distributional critics with Bayesian observation losses and entropy weights.
    Tracer,
    /// Distributional critics without the Bayesian machinery.
    Driql,
    /// Huber ensemble critics with α-quantile aggregation.
    Riql,
    /// Twin critics with squared TD error.
    Iql,
}

impl Algorithm {
    pub fn is_distributional(self) -> bool {
        matches!(self, Algorithm::Tracer | Algorithm::Driql)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Tracer => "tracer",
            Algorithm::Driql => "driql",
            Algorithm::Riql => "riql",
            Algorithm::Iql => "iql",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tracer" => Ok(Algorithm::Tracer),
            "driql" => Ok(Algorithm::Driql),
            "riql" => Ok(Algorithm::Riql),
            "iql" => Ok(Algorithm::Iql),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub n_quantiles: usize,
    pub n_target_quantiles: usize,
    pub ensemble: usize,
    pub alpha: f64,
    pub kappa: f64,
    pub nu: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr: f64,
    pub polyak: f64,
    pub target_update_every: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub updates_per_epoch: usize,
    /// Width of every hidden layer.
    pub hidden: usize,
    /// Affine layers per network.
    pub depth: usize,
    pub embed_dim: usize,
    /// 0 makes the quantile head a single affine map.
    pub head_hidden: usize,
    pub obs_hidden: usize,
    pub eta_start: f64,
    pub eta_end: f64,
    pub eta_mode: EtaMode,
    pub first_loss: FirstLoss,
    pub entropy_weighting: bool,
    pub entropy_variant: EntropyVariant,
    /// Feed the reward to the quantile critics.
    pub reward_input: bool,
    pub normalize_obs: bool,
    pub w_max: f64,
    /// Save a checkpoint every this many epochs; the final epoch always saves.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            algorithm: Algorithm::Tracer,
            n_quantiles: 32,
            n_target_quantiles: 32,
            ensemble: 5,
            alpha: 0.25,
            kappa: 0.1,
            nu: 0.7,
            beta: 3.0,
            gamma: 0.99,
            lr: 1e-3,
            polyak: 0.05,
            target_update_every: 2,
            batch_size: 256,
            epochs: 3000,
            updates_per_epoch: 1000,
            hidden: 256,
            depth: 3,
            embed_dim: 256,
            head_hidden: 0,
            obs_hidden: 256,
            eta_start: 1e-4,
            eta_end: 1e-2,
            eta_mode: EtaMode::Joint,
            first_loss: FirstLoss::Quadratic,
            entropy_weighting: true,
            entropy_variant: EntropyVariant::Verbatim,
            reward_input: true,
            normalize_obs: false,
            w_max: 100.0,
            checkpoint_every: 50,
            seed: 0,
        }
    }

    /// Scaled down for a single CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 50,
            updates_per_epoch: 200,
            hidden: 64,
            embed_dim: 64,
            obs_hidden: 64,
            checkpoint_every: 10,
            ..TrainConfig::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(TrainConfig::paper()),
            "desk" => Ok(TrainConfig::desk()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.updates_per_epoch) as u64
    }

    /// Hidden widths of a `depth`-layer network.
    pub fn hidden_dims(&self) -> Vec<usize> {
        vec![self.hidden; self.depth.saturating_sub(1)]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_quantiles", self.n_quantiles),
            ("n_target_quantiles", self.n_target_quantiles),
            ("ensemble", self.ensemble),
            ("batch_size", self.batch_size),
            ("hidden", self.hidden),
            ("depth", self.depth),
            ("embed_dim", self.embed_dim),
            ("obs_hidden", self.obs_hidden),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.n_quantiles < 2 && self.algorithm == Algorithm::Tracer {
            return Err(Error::Config("entropy needs at least two quantiles".into()));
        }
        if self.algorithm == Algorithm::Iql && self.ensemble != 2 {
            return Err(Error::Config("iql uses exactly two critics (ensemble = 2)".into()));
        }
        let unit = [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("polyak", self.polyak),
        ];
        for (k, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{k} = {v} not in [0, 1]")));
            }
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return Err(Error::Config(format!("nu = {} not in (0, 1)", self.nu)));
        }
        let pos_f = [
            ("kappa", self.kappa),
            ("beta", self.beta),
            ("lr", self.lr),
            ("w_max", self.w_max),
        ];
        for (k, v) in pos_f {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.eta_start < 0.0 || self.eta_end < 0.0 {
            return Err(Error::Config("eta endpoints must be non-negative".into()));
        }
        if self.target_update_every == 0 {
            return Err(Error::Config("target_update_every must be positive".into()));
        }
        Ok(())
    }

    /// Apply one `key = value` setting. Dashes and underscores are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let bad = |e: String| Error::Config(format!("`{key}`: {e}"));
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
        }
        fn flag(v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "on" | "yes" | "1" => Ok(true),
                "false" | "off" | "no" | "0" => Ok(false),
                _ => Err(format!("expected a boolean, got `{v}`")),
            }
        }
        match key.as_str() {
            "algorithm" => self.algorithm = value.parse()?,
            "n_quantiles" | "n" => self.n_quantiles = num(value).map_err(bad)?,
            "n_target_quantiles" | "n_prime" => self.n_target_quantiles = num(value).map_err(bad)?,
            "ensemble" | "k" => self.ensemble = num(value).map_err(bad)?,
            "alpha" => self.alpha = num(value).map_err(bad)?,
            "kappa" => self.kappa = num(value).map_err(bad)?,
            "nu" => self.nu = num(value).map_err(bad)?,
            "beta" => self.beta = num(value).map_err(bad)?,
            "gamma" => self.gamma = num(value).map_err(bad)?,
            "lr" => self.lr = num(value).map_err(bad)?,
            "polyak" => self.polyak = num(value).map_err(bad)?,
            "target_update_every" => self.target_update_every = num(value).map_err(bad)?,
            "batch_size" | "batch" => self.batch_size = num(value).map_err(bad)?,
            "epochs" => self.epochs = num(value).map_err(bad)?,
            "updates_per_epoch" | "updates" => self.updates_per_epoch = num(value).map_err(bad)?,
            "hidden" => self.hidden = num(value).map_err(bad)?,
            "depth" => self.depth = num(value).map_err(bad)?,
            "embed_dim" => self.embed_dim = num(value).map_err(bad)?,
            "head_hidden" => self.head_hidden = num(value).map_err(bad)?,
            "obs_hidden" => self.obs_hidden = num(value).map_err(bad)?,
            "eta_start" => self.eta_start = num(value).map_err(bad)?,
            "eta_end" => self.eta_end = num(value).map_err(bad)?,
            "eta" => {
                let v: f64 = num(value).map_err(bad)?;
                self.eta_start = v;
                self.eta_end = v;
            }
            "eta_mode" => {
                self.eta_mode = match value {
                    "joint" => EtaMode::Joint,
                    "split" => EtaMode::Split,
                    _ => return Err(bad(format!("expected joint|split, got `{value}`"))),
                }
            }
            "first_loss" => {
                self.first_loss = match value {
                    "quadratic" => FirstLoss::Quadratic,
                    "huber" => FirstLoss::Huber,
                    _ => return Err(bad(format!("expected quadratic|huber, got `{value}`"))),
                }
            }
            "entropy_weighting" => self.entropy_weighting = flag(value).map_err(bad)?,
            "entropy_variant" => {
                self.entropy_variant = match value {
                    "verbatim" => EntropyVariant::Verbatim,
                    "density" => EntropyVariant::Density,
                    _ => return Err(bad(format!("expected verbatim|density, got `{value}`"))),
                }
            }
            "reward_input" => self.reward_input = flag(value).map_err(bad)?,
            "normalize_obs" => self.normalize_obs = flag(value).map_err(bad)?,
            "w_max" => self.w_max = num(value).map_err(bad)?,
            "checkpoint_every" => self.checkpoint_every = num(value).map_err(bad)?,
            "seed" => self.seed = num(value).map_err(bad)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parse flat `key = value` text. A `preset` line selects the base
    /// (desk when absent); later lines override it.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        let base = pairs
            .iter()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.as_str())
            .unwrap_or("desk");
        let mut cfg = TrainConfig::preset(base)?;
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        let v = serde_json::to_value(self).expect("plain struct");
        let mut out = String::new();
        if let serde_json::Value::Object(map) = v {
            for (k, val) in map {
                let s = match val {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                out.push_str(&format!("{k} = {s}\n"));
            }
        }
        out
    }
}

/// Split `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", no + 1)));
        };
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        TrainConfig::paper().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
        assert_eq!(TrainConfig::desk().total_steps(), 10_000);
        assert_eq!(TrainConfig::paper().hidden_dims(), vec![256, 256]);
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = TrainConfig::desk();
        cfg.algorithm = Algorithm::Riql;
        cfg.entropy_variant = EntropyVariant::Density;
        cfg.eta_mode = EtaMode::Split;
        cfg.seed = 77;
        let text = cfg.to_kv_text();
        assert_eq!(TrainConfig::from_kv_text(&text).unwrap(), cfg);
    }

    #[test]
    fn preset_and_overrides() {
        let cfg = TrainConfig::from_kv_text("preset = paper\n# note\nepochs = 3\nbatch-size = 8 # inline\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.hidden, 256);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(TrainConfig::from_kv_text("nonsense = 1").is_err());
        assert!(TrainConfig::from_kv_text("epochs").is_err());
        assert!(TrainConfig::from_kv_text("alpha = 2").is_err());
        assert!(TrainConfig::from_kv_text("algorithm = iql\nensemble = 5").is_err());
        assert!(TrainConfig::from_kv_text("entropy_weighting = maybe").is_err());
    }
}
