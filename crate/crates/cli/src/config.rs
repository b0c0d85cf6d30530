//! Flat `key = value` config files and the overrides built from flags.

use std::collections::BTreeMap;
use std::path::Path;

use cvf_core::engine::{Method, QueueSource, TrainConfig, VanillaConfig};
use cvf_core::world::WorldConfig;

use crate::error::{CliError, Result};

/// Ordered key/value pairs; later entries win.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides(pub BTreeMap<String, String>);

impl Overrides {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected key=value, got {raw:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(CliError::Config(format!("{origin}:{}: empty key or value", n + 1)));
            }
            map.insert(k.to_string(), v.to_string());
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    /// `self` with `other` laid on top.
    pub fn merged(mut self, other: &Overrides) -> Self {
        self.0.extend(other.0.iter().map(|(k, v)| (k.clone(), v.clone())));
        self
    }

    pub fn apply<C: Configurable>(&self, target: &mut C) -> Result<()> {
        for (k, v) in &self.0 {
            target.set_key(k, v).map_err(|m| CliError::Config(format!("{k} = {v}: {m}")))?;
        }
        Ok(())
    }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

/// A config struct settable from string pairs.
pub trait Configurable {
    fn set_key(&mut self, key: &str, value: &str) -> std::result::Result<(), String>;
}

impl Configurable for WorldConfig {
    fn set_key(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "n_entities" => self.n_entities = num(v)?,
            "n_attributes" => self.n_attributes = num(v)?,
            "values_per_attribute" => self.values_per_attribute = num(v)?,
            "answer_vocab" => self.answer_vocab = num(v)?,
            "forget_fraction" => self.forget_fraction = num(v)?,
            "realworld_fraction" => self.realworld_fraction = num(v)?,
            "patches" => self.patches = num(v)?,
            "d_img" => self.d_img = num(v)?,
            "noise_sigma" => self.noise_sigma = num(v)?,
            "realworld_shift" => self.realworld_shift = num(v)?,
            "seed" => self.seed = num(v)?,
            _ => return Err("unknown world key".into()),
        }
        Ok(())
    }
}

impl Configurable for VanillaConfig {
    fn set_key(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "learning_rate" => self.learning_rate = num(v)?,
            "momentum" => self.momentum = num(v)?,
            "epochs" => self.epochs = num(v)?,
            "batch_size" => self.batch_size = num(v)?,
            "grad_clip_norm" => self.grad_clip_norm = num(v)?,
            "seed" => self.seed = num(v)?,
            "init_seed" => self.init_seed = num(v)?,
            "threshold" => self.threshold = if v == "none" { None } else { Some(num(v)?) },
            _ => return Err("unknown training key".into()),
        }
        Ok(())
    }
}

impl Configurable for TrainConfig {
    fn set_key(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "learning_rate" => self.learning_rate = num(v)?,
            "momentum" => self.momentum = num(v)?,
            "epochs" => self.epochs = num(v)?,
            "batch_size_forget" => self.batch_size_forget = num(v)?,
            "batch_size_retain" => self.batch_size_retain = num(v)?,
            "alpha" => self.weights.alpha = num(v)?,
            "beta" => self.weights.beta = num(v)?,
            "lambda" => self.weights.lambda = num(v)?,
            "tau" => self.weights.tau = num(v)?,
            "r" => self.r = num(v)?,
            "queue_capacity" => self.queue_capacity = num(v)?,
            "queue_source" => self.queue_source = v.parse::<QueueSource>().map_err(|e| e.to_string())?,
            "grad_clip_norm" => self.grad_clip_norm = num(v)?,
            "nmse_grad_clip_norm" => self.nmse_grad_clip_norm = num(v)?,
            "seed" => self.seed = num(v)?,
            "method" => self.method = v.parse::<Method>().map_err(|e| e.to_string())?,
            _ => return Err("unknown unlearning key".into()),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_overrides() {
        let file = Overrides::parse("# header\nalpha = 2 # inline\n\nbeta=0.5\n", "f").unwrap();
        let mut flags = Overrides::default();
        flags.set("alpha", 3);
        let mut cfg = TrainConfig::default();
        file.merged(&flags).apply(&mut cfg).unwrap();
        assert_eq!(cfg.weights.alpha, 3.0);
        assert_eq!(cfg.weights.beta, 0.5);
    }

    #[test]
    fn malformed_lines_and_unknown_keys_are_config_errors() {
        assert!(matches!(Overrides::parse("alpha 2", "f"), Err(CliError::Config(_))));
        assert!(matches!(Overrides::parse("alpha=", "f"), Err(CliError::Config(_))));
        let o = Overrides::parse("gamma=1", "f").unwrap();
        assert!(matches!(o.apply(&mut TrainConfig::default()), Err(CliError::Config(_))));
        let o = Overrides::parse("epochs=-1", "f").unwrap();
        assert!(matches!(o.apply(&mut VanillaConfig::default()), Err(CliError::Config(_))));
    }

    #[test]
    fn threshold_can_be_disabled() {
        let mut cfg = VanillaConfig::default();
        Overrides::parse("threshold=none", "f").unwrap().apply(&mut cfg).unwrap();
        assert_eq!(cfg.threshold, None);
    }
}
