//! Flat `key = value` run configuration.
//!
//! One assignment per line; blank lines and text after a `#` that starts a
//! line or follows whitespace are ignored. Keys not listed in [`KEYS`] are
//! rejected, as are repeated keys.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::GanForm;
use crate::nets::ScoreHead;
use crate::synthbench::StructureMode;
use crate::trainer::TrainConfig;

/// Every accepted key, in serialization order.
pub const KEYS: [&str; 25] = [
    "variant",
    "dataset",
    "mode",
    "size",
    "batch_size",
    "epochs",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "buffer_capacity",
    "seed",
    "checkpoint_every",
    "alpha",
    "lambda",
    "gamma",
    "gan_form",
    "log_eps",
    "gen_width",
    "res_blocks",
    "disc_width",
    "disc_downsamplings",
    "disc_head",
    "spectral_norm",
    "power_iterations",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    explicit: BTreeSet<&'static str>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            explicit: BTreeSet::new(),
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn strip_comment(line: &str) -> &str {
    let mut prev_space = true;
    for (i, c) in line.char_indices() {
        if c == '#' && prev_space {
            return &line[..i];
        }
        prev_space = c.is_whitespace();
    }
    line
}

impl RunConfig {
    pub fn new(train: TrainConfig) -> Self {
        RunConfig {
            train,
            explicit: BTreeSet::new(),
        }
    }

    /// Parses a configuration file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let key = key.trim();
            if cfg.is_explicit(key) {
                return Err(Error::Config(format!("line {}: {key} assigned twice", n + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Assigns one key; later assignments override earlier ones.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = *KEYS
            .iter()
            .find(|k| **k == key)
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        let t = &mut self.train;
        match k {
            "variant" => t.variant = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "dataset" => {
                if value.is_empty() {
                    return Err(Error::Config("dataset path is empty".into()));
                }
                t.dataset = PathBuf::from(value)
            }
            "mode" => t.mode = StructureMode::parse(value).map_err(|e| Error::Config(e.to_string()))?,
            "size" => t.size = num(k, value)?,
            "batch_size" => t.batch_size = num(k, value)?,
            "epochs" => t.epochs = num(k, value)?,
            "lr" => t.adam.lr = num(k, value)?,
            "beta1" => t.adam.beta1 = num(k, value)?,
            "beta2" => t.adam.beta2 = num(k, value)?,
            "adam_eps" => t.adam.eps = num(k, value)?,
            "buffer_capacity" => t.buffer_capacity = num(k, value)?,
            "seed" => t.seed = num(k, value)?,
            "checkpoint_every" => t.checkpoint_every = num(k, value)?,
            "alpha" => t.weights.alpha = num(k, value)?,
            "lambda" => t.weights.lambda = num(k, value)?,
            "gamma" => t.weights.gamma = num(k, value)?,
            "gan_form" => {
                t.weights.gan_form = match value {
                    "log" => GanForm::Log,
                    "least_squares" => GanForm::LeastSquares,
                    _ => return Err(Error::Config(format!("gan_form: expected log or least_squares, got {value:?}"))),
                }
            }
            "log_eps" => t.weights.epsilon = num(k, value)?,
            "gen_width" => t.arch.gen_width = num(k, value)?,
            "res_blocks" => t.arch.res_blocks = num(k, value)?,
            "disc_width" => t.arch.disc_width = num(k, value)?,
            "disc_downsamplings" => t.arch.disc_downsamplings = num(k, value)?,
            "disc_head" => {
                t.arch.head = match value {
                    "sigmoid" => ScoreHead::Sigmoid,
                    "linear" => ScoreHead::Linear,
                    _ => return Err(Error::Config(format!("disc_head: expected sigmoid or linear, got {value:?}"))),
                }
            }
            "spectral_norm" => t.arch.spectral_norm = num(k, value)?,
            "power_iterations" => t.power_iterations = num(k, value)?,
            _ => unreachable!("every key in KEYS is handled"),
        }
        self.explicit.insert(k);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "variant" => t.variant.to_string(),
            "dataset" => t.dataset.display().to_string(),
            "mode" => t.mode.name().to_string(),
            "size" => t.size.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "epochs" => t.epochs.to_string(),
            "lr" => t.adam.lr.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "buffer_capacity" => t.buffer_capacity.to_string(),
            "seed" => t.seed.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "alpha" => t.weights.alpha.to_string(),
            "lambda" => t.weights.lambda.to_string(),
            "gamma" => t.weights.gamma.to_string(),
            "gan_form" => match t.weights.gan_form {
                GanForm::Log => "log",
                GanForm::LeastSquares => "least_squares",
            }
            .to_string(),
            "log_eps" => t.weights.epsilon.to_string(),
            "gen_width" => t.arch.gen_width.to_string(),
            "res_blocks" => t.arch.res_blocks.to_string(),
            "disc_width" => t.arch.disc_width.to_string(),
            "disc_downsamplings" => t.arch.disc_downsamplings.to_string(),
            "disc_head" => match t.arch.head {
                ScoreHead::Sigmoid => "sigmoid",
                ScoreHead::Linear => "linear",
            }
            .to_string(),
            "spectral_norm" => t.arch.spectral_norm.to_string(),
            "power_iterations" => t.power_iterations.to_string(),
            _ => return None,
        })
    }

    /// Every key with its effective value.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "{k} = {}", self.get(k).expect("known key")).expect("write to String");
        }
        out
    }

    /// Like [`RunConfig::serialize`], with keys that were never assigned
    /// marked as defaults. Parses back to the same configuration.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let v = self.get(k).expect("known key");
            if self.is_explicit(k) {
                writeln!(out, "{k} = {v}")
            } else {
                writeln!(out, "{k} = {v}  # default")
            }
            .expect("write to String");
        }
        out
    }
}
