//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; later assignments (including `--set` flags) override earlier
//! ones.

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use irunet_core::model::ModelConfig;
use irunet_core::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Noise levels assigned round-robin by `corrupt`.
    pub sigmas: Vec<u32>,
    pub data_seed: u64,
    pub split_ratio: f64,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sigmas: (0..=50).collect(),
            data_seed: 0,
            split_ratio: 0.8,
            parallel: true,
        }
    }
}

pub const KEYS: [&str; 21] = [
    "input_channels",
    "base_width",
    "stage_widths",
    "kernel",
    "dilation_rate",
    "sigma_min",
    "sigma_max",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "batch_size",
    "max_steps",
    "checkpoint_every",
    "init_seed",
    "epoch_seed",
    "sigmas",
    "data_seed",
    "split_ratio",
    "parallel",
    "preset",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("invalid value '{value}' for key '{key}'"))
}

/// Parses `"0..50"` (inclusive range) or a comma-separated list.
pub fn parse_sigmas(value: &str) -> Result<Vec<u32>> {
    let value = value.trim();
    let sigmas: Vec<u32> = if let Some((lo, hi)) = value.split_once("..") {
        let lo: u32 = num("sigmas", lo.trim())?;
        let hi: u32 = num("sigmas", hi.trim())?;
        if lo > hi {
            bail!("empty sigma range '{value}'");
        }
        (lo..=hi).collect()
    } else {
        value
            .split(',')
            .map(|s| num("sigmas", s.trim()))
            .collect::<Result<_>>()?
    };
    if sigmas.is_empty() {
        bail!("no sigma values given");
    }
    Ok(sigmas)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "input_channels" => m.input_channels = num(key, value)?,
            "base_width" => m.base_width = num(key, value)?,
            "stage_widths" => {
                let ws: Vec<usize> = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?;
                m.stage_widths = ws
                    .try_into()
                    .map_err(|_| anyhow!("stage_widths needs exactly 4 comma-separated values"))?;
            }
            "kernel" => m.kernel = num(key, value)?,
            "dilation_rate" => m.dilation_rate = num(key, value)?,
            "sigma_min" => m.sigma_range.0 = num(key, value)?,
            "sigma_max" => m.sigma_range.1 = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "beta1" => t.beta1 = num(key, value)?,
            "beta2" => t.beta2 = num(key, value)?,
            "epsilon" => t.epsilon = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "max_steps" => t.max_steps = num(key, value)?,
            "checkpoint_every" => t.checkpoint_every = num(key, value)?,
            "init_seed" => t.init_seed = num(key, value)?,
            "epoch_seed" => t.epoch_seed = num(key, value)?,
            "sigmas" => self.sigmas = parse_sigmas(value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "split_ratio" => self.split_ratio = num(key, value)?,
            "parallel" => self.parallel = num(key, value)?,
            // Replaces every model field, so put it before other model keys.
            "preset" => {
                *m = match value {
                    "tiny" => ModelConfig::tiny(),
                    "default" => ModelConfig::default(),
                    _ => bail!("invalid value '{value}' for key 'preset' (tiny, default)"),
                }
            }
            _ => bail!("unknown config key '{key}' (known keys: {})", KEYS.join(", ")),
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn assign(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("expected key=value, got '{assignment}'"))?;
        self.set(key.trim(), value)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.assign(line).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then each `overrides` entry.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut config = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            config
                .apply_text(&text)
                .with_context(|| format!("in config file {}", path.display()))?;
        }
        for o in overrides {
            config.assign(o).context("in --set")?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.split_ratio) {
            bail!("split_ratio must lie in [0, 1]");
        }
        Ok(())
    }

    /// Every effective value, one `key=value` per entry.
    pub fn entries(&self) -> Vec<String> {
        let m = &self.model;
        let t = &self.train;
        let w = m.stage_widths;
        let sigmas = self.sigmas.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        vec![
            format!("input_channels={}", m.input_channels),
            format!("base_width={}", m.base_width),
            format!("stage_widths={},{},{},{}", w[0], w[1], w[2], w[3]),
            format!("kernel={}", m.kernel),
            format!("dilation_rate={}", m.dilation_rate),
            format!("sigma_min={}", m.sigma_range.0),
            format!("sigma_max={}", m.sigma_range.1),
            format!("learning_rate={}", t.learning_rate),
            format!("beta1={}", t.beta1),
            format!("beta2={}", t.beta2),
            format!("epsilon={}", t.epsilon),
            format!("batch_size={}", t.batch_size),
            format!("max_steps={}", t.max_steps),
            format!("checkpoint_every={}", t.checkpoint_every),
            format!("init_seed={}", t.init_seed),
            format!("epoch_seed={}", t.epoch_seed),
            format!("sigmas={sigmas}"),
            format!("data_seed={}", self.data_seed),
            format!("split_ratio={}", self.split_ratio),
            format!("parallel={}", self.parallel),
        ]
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in self.entries() {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("preset=tiny\nbatch_size=4\n# note\n\nsigmas=10,25\nlearning_rate=0.001").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.to_string()).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.model, ModelConfig::tiny());
    }

    #[test]
    fn unknown_key_names_the_key() {
        let err = RunConfig::default().apply_text("batch_size=2\nlearnig_rate=1").unwrap_err();
        assert!(format!("{err:#}").contains("learnig_rate"));
    }

    #[test]
    fn sigma_forms() {
        assert_eq!(parse_sigmas("0..3").unwrap(), [0, 1, 2, 3]);
        assert_eq!(parse_sigmas("25").unwrap(), [25]);
        assert!(parse_sigmas("5..1").is_err());
        assert!(parse_sigmas("a").is_err());
    }

    #[test]
    fn every_echoed_key_is_known() {
        for e in RunConfig::default().entries() {
            let key = e.split('=').next().unwrap();
            assert!(KEYS.contains(&key), "{key}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::load(None, &["beta1=1.5".into()]).is_err());
        assert!(RunConfig::load(None, &["stage_widths=1,2".into()]).is_err());
        assert!(RunConfig::load(None, &["batch_size=-1".into()]).is_err());
    }
}
