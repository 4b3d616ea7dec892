//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # MUSK1, deep supervision
//! variant = MI-Net+DS
//! widths = 256,128,64,1
//! pooling = max
//! epochs = 50
//! ```
//!
//! Recognised keys: `variant`, `widths`, `pooling`, `lse_r`, `dropout`, `lr`,
//! `momentum`, `weight_decay`, `epochs`, `seed`, `folds`, `repeats`,
//! `standardize`, `shuffle`, `ds_weights`. Anything else is rejected. When a
//! key appears twice the later value wins, and command-line overrides are
//! applied after the file.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{NetworkSpec, Variant};
use crate::pooling::{PoolingMethod, PoolingSpec, DEFAULT_LSE_R};
use crate::training::TrainConfig;

pub const KEYS: [&str; 15] = [
    "variant",
    "widths",
    "pooling",
    "lse_r",
    "dropout",
    "lr",
    "momentum",
    "weight_decay",
    "epochs",
    "seed",
    "folds",
    "repeats",
    "standardize",
    "shuffle",
    "ds_weights",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub folds: usize,
    pub repeats: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            network: NetworkSpec::new(Variant::MINet),
            train: TrainConfig::default(),
            folds: 10,
            repeats: 5,
        }
    }
}

/// One `key = value` assignment and where it came from, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Setting {
    pub key: String,
    pub value: String,
    pub origin: String,
}

fn parse_setting(text: &str, origin: String) -> Result<Setting> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| Error::config(format!("{origin}: expected 'key = value', found '{}'", text.trim())))?;
    let key = key.trim().to_ascii_lowercase();
    if !KEYS.contains(&key.as_str()) {
        return Err(Error::config(format!(
            "{origin}: unknown config key '{key}' (known keys: {})",
            KEYS.join(", ")
        )));
    }
    Ok(Setting {
        key,
        value: value.trim().to_string(),
        origin,
    })
}

/// Reads settings from config text; `#` starts a comment.
pub fn parse_settings(text: &str, source: &str) -> Result<Vec<Setting>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_setting(line, format!("{source}: line {}", i + 1))?);
    }
    Ok(out)
}

/// Parses a command-line `key=value` override.
pub fn parse_override(text: &str) -> Result<Setting> {
    parse_setting(text, format!("override '{text}'"))
}

fn value<T: FromStr>(s: &Setting) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.value
        .parse()
        .map_err(|e| Error::config(format!("{}: bad value '{}' for {}: {e}", s.origin, s.value, s.key)))
}

fn flag(s: &Setting) -> Result<bool> {
    match s.value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!(
            "{}: {} expects true or false, got '{}'",
            s.origin, s.key, s.value
        ))),
    }
}

fn list<T: FromStr>(s: &Setting) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.value
        .trim_matches(|c| c == '(' || c == ')' || c == '[' || c == ']')
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|e| Error::config(format!("{}: bad {} entry '{}': {e}", s.origin, s.key, p.trim())))
        })
        .collect()
}

impl ExperimentConfig {
    /// Defaults overlaid with `settings` in order. Unset widths follow the
    /// variant's default structure.
    pub fn from_settings(settings: &[Setting]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut widths = None;
        let mut method = None;
        let mut lse_r = None;
        for s in settings {
            match s.key.as_str() {
                "variant" => cfg.network.variant = value(s)?,
                "widths" => widths = Some(list::<usize>(s)?),
                "pooling" => method = Some(value::<PoolingMethod>(s)?),
                "lse_r" => lse_r = Some(value::<f64>(s)?),
                "dropout" => cfg.network.dropout_rate = value(s)?,
                "lr" => cfg.train.learning_rate = value(s)?,
                "momentum" => cfg.train.momentum = value(s)?,
                "weight_decay" => cfg.train.weight_decay = value(s)?,
                "epochs" => cfg.train.epochs = value(s)?,
                "seed" => {
                    let seed: u64 = value(s)?;
                    cfg.network.seed = seed;
                    cfg.train.seed = seed;
                }
                "folds" => cfg.folds = value(s)?,
                "repeats" => cfg.repeats = value(s)?,
                "standardize" => cfg.train.standardize = flag(s)?,
                "shuffle" => cfg.train.shuffle_each_epoch = flag(s)?,
                "ds_weights" => cfg.network.ds_weights = if s.value.is_empty() { Vec::new() } else { list(s)? },
                other => unreachable!("key '{other}' passed validation"),
            }
        }
        cfg.network.widths = widths.unwrap_or_else(|| cfg.network.variant.default_widths());
        cfg.network.pooling = PoolingSpec {
            method: method.unwrap_or(PoolingMethod::Max),
            r: lse_r.unwrap_or(DEFAULT_LSE_R),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        Self::from_settings(&parse_settings(text, source)?)
    }

    /// Reads `path` (if any) and applies `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut settings = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_settings(&text, &p.display().to_string())?
            }
            None => Vec::new(),
        };
        for o in overrides {
            settings.push(parse_override(o)?);
        }
        Self::from_settings(&settings)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if self.folds < 2 {
            return Err(Error::config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats must be at least 1"));
        }
        Ok(())
    }

    /// Renders the configuration in the file format; parsing it back yields `self`.
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let t = &self.train;
        let join = |xs: Vec<String>| xs.join(",");
        let mut out = format!(
            "variant = {}\nwidths = {}\npooling = {}\nlse_r = {}\ndropout = {}\nlr = {}\nmomentum = {}\n\
             weight_decay = {}\nepochs = {}\nseed = {}\nfolds = {}\nrepeats = {}\nstandardize = {}\nshuffle = {}\n",
            n.variant.name(),
            join(n.widths.iter().map(usize::to_string).collect()),
            n.pooling.method.name(),
            n.pooling.r,
            n.dropout_rate,
            t.learning_rate,
            t.momentum,
            t.weight_decay,
            t.epochs,
            n.seed,
            self.folds,
            self.repeats,
            t.standardize,
            t.shuffle_each_epoch,
        );
        if !n.ds_weights.is_empty() {
            out.push_str(&format!(
                "ds_weights = {}\n",
                join(n.ds_weights.iter().map(f64::to_string).collect())
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let cfg = ExperimentConfig::parse("", "empty").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.train.learning_rate, 5e-4);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.train.weight_decay, 5e-3);
        assert_eq!(cfg.train.epochs, 50);
        assert_eq!((cfg.folds, cfg.repeats), (10, 5));
    }

    #[test]
    fn parses_every_key() {
        let text = "# all keys\nvariant = ds\nwidths = (64, 32, 1)\npooling = lse\nlse_r = 10\n\
                    dropout = 0.25\nlr = 0.01\nmomentum = 0.5\nweight_decay = 0\nepochs = 7\n\
                    seed = 42  # trailing\nfolds = 4\nrepeats = 2\nstandardize = off\nshuffle = no\n\
                    ds_weights = 1, 0.5\n";
        let cfg = ExperimentConfig::parse(text, "t").unwrap();
        assert_eq!(cfg.network.variant, Variant::MINetDs);
        assert_eq!(cfg.network.widths, vec![64, 32, 1]);
        assert_eq!(cfg.network.pooling, PoolingSpec::lse(10.0).unwrap());
        assert_eq!(cfg.network.dropout_rate, 0.25);
        assert_eq!(cfg.network.ds_weights, vec![1.0, 0.5]);
        assert_eq!((cfg.network.seed, cfg.train.seed), (42, 42));
        assert_eq!(cfg.train.epochs, 7);
        assert!(!cfg.train.standardize && !cfg.train.shuffle_each_epoch);
        assert_eq!((cfg.folds, cfg.repeats), (4, 2));
        assert_eq!(ExperimentConfig::parse(&cfg.to_text(), "again").unwrap(), cfg);
    }

    #[test]
    fn widths_follow_variant() {
        let cfg = ExperimentConfig::parse("variant = MI-Net+RC", "t").unwrap();
        assert_eq!(cfg.network.widths, vec![128, 128, 128, 1]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse("epochs = 3\nlearning_rate = 0.1\n", "exp.cfg").unwrap_err();
        let msg = err.to_string();
        assert_eq!(err.kind(), "config");
        assert!(msg.contains("learning_rate") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn overrides_win() {
        let mut settings = parse_settings("pooling = max\nepochs = 3\n", "f").unwrap();
        settings.push(parse_override("pooling=lse").unwrap());
        settings.push(parse_override("lse_r=10").unwrap());
        let cfg = ExperimentConfig::from_settings(&settings).unwrap();
        assert_eq!(cfg.network.pooling, PoolingSpec::lse(10.0).unwrap());
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "epochs = 0",
            "epochs = many",
            "lr = -1",
            "momentum = 1",
            "widths = 64,2",
            "variant = MI-Net+RC\nwidths = 128,64,1",
            "pooling = median",
            "pooling = lse\nlse_r = 0",
            "dropout = 1",
            "folds = 1",
            "standardize = maybe",
            "no equals sign",
        ] {
            let err = ExperimentConfig::parse(text, "t").unwrap_err();
            assert_eq!(err.kind(), "config", "{text}: {err}");
        }
    }
}
