//! Flat `key = value` configuration files and the search configuration.

use std::collections::BTreeMap;
use std::fmt;

use crate::attention::AttentionMode;
use crate::error::{Error, Result};

/// Parse `key = value` lines. `#` starts a comment; blank lines are
/// ignored; later keys override earlier ones.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(i + 1, format!("expected 'key = value', got '{line}'")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::parse(i + 1, "empty key"));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Every knob of a search session. Defaults are desk scale.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub layers: usize,
    pub channels: usize,
    pub cells_per_layer_search: usize,
    pub stack_n: usize,
    pub k_paths: usize,
    pub rsp: bool,
    pub attention_mode: AttentionMode,
    pub epochs_cell: usize,
    pub epochs_path: usize,
    pub epochs_train: usize,
    pub batch_size: usize,
    pub lr_w: f64,
    pub momentum_w: f64,
    pub wd_w: f64,
    pub lr_arch: f64,
    pub momentum_arch: f64,
    pub wd_arch: f64,
    pub arch_noise: f64,
    pub seed: u64,
    pub crop: (usize, usize),
    pub num_classes: usize,
    pub in_channels: usize,
    /// Synthetic data used when no dataset directories are given.
    pub data_seed: u64,
    pub synth_train: usize,
    pub synth_val: usize,
    pub synth_size: usize,
    pub train_dir: Option<String>,
    pub val_dir: Option<String>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            channels: 16,
            cells_per_layer_search: 1,
            stack_n: 4,
            k_paths: 2,
            rsp: false,
            attention_mode: AttentionMode::PathNormalized,
            epochs_cell: 20,
            epochs_path: 10,
            epochs_train: 40,
            batch_size: 8,
            lr_w: 0.05,
            momentum_w: 0.95,
            wd_w: 0.0005,
            lr_arch: 0.005,
            momentum_arch: 0.0,
            wd_arch: 0.0001,
            arch_noise: 1e-3,
            seed: 0,
            crop: (64, 64),
            num_classes: 3,
            in_channels: 1,
            data_seed: 7,
            synth_train: 200,
            synth_val: 100,
            synth_size: 64,
            train_dir: None,
            val_dir: None,
        }
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::invalid(format!("bad value '{v}' for '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::invalid(format!("bad boolean '{v}' for '{key}'"))),
    }
}

impl SearchConfig {
    /// Apply one override.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "layers" => self.layers = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "cells_per_layer_search" => self.cells_per_layer_search = parse_num(key, v)?,
            "stack_n" => self.stack_n = parse_num(key, v)?,
            "k_paths" => self.k_paths = parse_num(key, v)?,
            "rsp" => self.rsp = parse_bool(key, v)?,
            "attention_mode" => self.attention_mode = v.parse()?,
            "epochs_cell" => self.epochs_cell = parse_num(key, v)?,
            "epochs_path" => self.epochs_path = parse_num(key, v)?,
            "epochs_train" => self.epochs_train = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr_w" => self.lr_w = parse_num(key, v)?,
            "momentum_w" => self.momentum_w = parse_num(key, v)?,
            "wd_w" => self.wd_w = parse_num(key, v)?,
            "lr_arch" => self.lr_arch = parse_num(key, v)?,
            "momentum_arch" => self.momentum_arch = parse_num(key, v)?,
            "wd_arch" => self.wd_arch = parse_num(key, v)?,
            "arch_noise" => self.arch_noise = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "crop" => {
                let (h, w) = v
                    .split_once('x')
                    .ok_or_else(|| Error::invalid(format!("crop must look like 64x64, got '{v}'")))?;
                self.crop = (parse_num(key, h)?, parse_num(key, w)?);
            }
            "num_classes" => self.num_classes = parse_num(key, v)?,
            "in_channels" => self.in_channels = parse_num(key, v)?,
            "data_seed" => self.data_seed = parse_num(key, v)?,
            "synth_train" => self.synth_train = parse_num(key, v)?,
            "synth_val" => self.synth_val = parse_num(key, v)?,
            "synth_size" => self.synth_size = parse_num(key, v)?,
            "train_dir" => self.train_dir = Some(v.to_string()),
            "val_dir" => self.val_dir = Some(v.to_string()),
            _ => return Err(Error::invalid(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Defaults overridden by the pairs of a config file.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.layers == 0 || self.channels == 0 || self.stack_n == 0 || self.k_paths == 0 {
            return bad("layers, channels, stack_n and k_paths must be >= 1".into());
        }
        if self.cells_per_layer_search != 1 {
            return bad("the search supernet uses exactly one cell per layer".into());
        }
        if self.rsp && !self.channels.is_multiple_of(2) {
            return bad(format!("rsp needs an even channel count, got {}", self.channels));
        }
        if self.epochs_cell == 0 && self.epochs_path == 0 && self.epochs_train == 0 {
            return bad("at least one phase needs epochs >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, v) in [("lr_w", self.lr_w), ("lr_arch", self.lr_arch)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        for (name, v) in [("momentum_w", self.momentum_w), ("momentum_arch", self.momentum_arch)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("wd_w", self.wd_w),
            ("wd_arch", self.wd_arch),
            ("arch_noise", self.arch_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.crop.0 < 4 || self.crop.1 < 4 {
            return bad(format!("crop {}x{} is too small", self.crop.0, self.crop.1));
        }
        if !(2..=255).contains(&self.num_classes) {
            return bad(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return bad(format!("in_channels must be 1 or 3, got {}", self.in_channels));
        }
        Ok(())
    }
}

impl fmt::Display for SearchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        m.insert("layers", self.layers.to_string());
        m.insert("channels", self.channels.to_string());
        m.insert("cells_per_layer_search", self.cells_per_layer_search.to_string());
        m.insert("stack_n", self.stack_n.to_string());
        m.insert("k_paths", self.k_paths.to_string());
        m.insert("rsp", (self.rsp as u8).to_string());
        m.insert("attention_mode", self.attention_mode.to_string());
        m.insert("epochs_cell", self.epochs_cell.to_string());
        m.insert("epochs_path", self.epochs_path.to_string());
        m.insert("epochs_train", self.epochs_train.to_string());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("lr_w", self.lr_w.to_string());
        m.insert("momentum_w", self.momentum_w.to_string());
        m.insert("wd_w", self.wd_w.to_string());
        m.insert("lr_arch", self.lr_arch.to_string());
        m.insert("momentum_arch", self.momentum_arch.to_string());
        m.insert("wd_arch", self.wd_arch.to_string());
        m.insert("arch_noise", self.arch_noise.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("crop", format!("{}x{}", self.crop.0, self.crop.1));
        m.insert("num_classes", self.num_classes.to_string());
        m.insert("in_channels", self.in_channels.to_string());
        m.insert("data_seed", self.data_seed.to_string());
        m.insert("synth_train", self.synth_train.to_string());
        m.insert("synth_val", self.synth_val.to_string());
        m.insert("synth_size", self.synth_size.to_string());
        if let Some(d) = &self.train_dir {
            m.insert("train_dir", d.clone());
        }
        if let Some(d) = &self.val_dir {
            m.insert("val_dir", d.clone());
        }
        for (k, v) in m {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_with_comments() {
        let p = parse_pairs("# top\nlayers = 3 # inline\n\n  rsp=1\n").unwrap();
        assert_eq!(p, vec![("layers".into(), "3".into()), ("rsp".into(), "1".into())]);
        assert!(parse_pairs("no equals sign").is_err());
    }

    #[test]
    fn display_roundtrips() {
        let mut c = SearchConfig::default();
        c.set("crop", "32x48").unwrap();
        c.set("attention_mode", "literal").unwrap();
        c.set("lr_w", "0.0125").unwrap();
        assert_eq!(SearchConfig::from_text(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn validation() {
        SearchConfig::default().validate().unwrap();
        let mut c = SearchConfig::default();
        c.rsp = true;
        c.channels = 15;
        assert!(c.validate().is_err());
        let mut c = SearchConfig::default();
        c.lr_w = 0.0;
        assert!(c.validate().is_err());
        assert!(SearchConfig::from_text("bogus = 1").is_err());
        assert!(SearchConfig::from_text("layers = x").is_err());
    }
}
