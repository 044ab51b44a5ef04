//! Experiment configuration: a flat `key = value` text format with a
//! canonical rendering whose hash names the run.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::simreg::SubsetMode;

/// Complete, seedable description of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Classification dataset id (`mnist`, `fashion_mnist`, `cifar10`,
    /// `cifar100`, `synthetic`).
    pub class_dataset: String,
    /// Regularization dataset id.
    pub reg_dataset: String,
    /// Directory holding the dataset files.
    pub data_dir: PathBuf,
    /// Convert RGB datasets to grayscale before use.
    pub grayscale: bool,
    /// Cap on training images (0 = all), sampled with the run seed.
    pub class_limit: usize,
    /// Cap on test images used for per-epoch logging (0 = all).
    pub eval_limit: usize,
    /// Regularization strength; 0 reproduces the unregularized baseline.
    pub alpha: f64,
    /// Similarity threshold in (0,1).
    pub th: f64,
    /// Second threshold, used by `target_mode = double`.
    pub th2: f64,
    /// Target construction: threshold | double | minus | plus | low | high | full.
    pub target_mode: String,
    /// Distance from +-1 at which target values are placed and network
    /// similarities are clamped before arctanh.
    pub eps_clamp: f64,
    pub epochs: usize,
    /// Classification batch size.
    pub batch_size: usize,
    /// Regularization image pairs per step (k).
    pub pair_batch: usize,
    /// Number of regularization images (N).
    pub n_reg: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Fraction of total steps after which lr is multiplied by 0.1 once.
    pub decay_at: f64,
    pub seed: u64,
    /// Architecture id (`desk` or `tiny`).
    pub arch: String,
    /// Run directories are created under this path.
    pub out_dir: PathBuf,
    /// Draw the same regularization pairs every step (diagnostic).
    pub freeze_reg_pairs: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            class_dataset: "mnist".into(),
            reg_dataset: "mnist".into(),
            data_dir: "data".into(),
            grayscale: false,
            class_limit: 0,
            eval_limit: 2000,
            alpha: 4.0,
            th: 0.2,
            th2: 0.0,
            target_mode: "threshold".into(),
            eps_clamp: 1e-6,
            epochs: 5,
            batch_size: 64,
            pair_batch: 16,
            n_reg: 1000,
            lr: 0.01,
            momentum: 0.9,
            decay_at: 0.75,
            seed: 0,
            arch: "desk".into(),
            out_dir: "runs".into(),
            freeze_reg_pairs: false,
        }
    }
}

impl ExperimentConfig {
    /// Parse the flat `key = value` format. Unknown keys and malformed
    /// values are rejected with their line number. Keys not present keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(Error::Config { line, details: format!("expected 'key = value', got '{raw}'") });
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value).map_err(|e| Error::Config { line, details: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::invalid(key, format!("cannot parse '{value}'")))
        }
        match key {
            "class_dataset" => self.class_dataset = value.to_string(),
            "reg_dataset" => self.reg_dataset = value.to_string(),
            "data_dir" => self.data_dir = value.into(),
            "grayscale" => self.grayscale = num::<bool>(key, value)?,
            "class_limit" => self.class_limit = num(key, value)?,
            "eval_limit" => self.eval_limit = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "th" => self.th = num(key, value)?,
            "th2" => self.th2 = num(key, value)?,
            "target_mode" => self.target_mode = value.to_string(),
            "eps_clamp" => self.eps_clamp = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "pair_batch" => self.pair_batch = num(key, value)?,
            "n_reg" => self.n_reg = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "decay_at" => self.decay_at = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "arch" => self.arch = value.to_string(),
            "out_dir" => self.out_dir = value.into(),
            "freeze_reg_pairs" => self.freeze_reg_pairs = num::<bool>(key, value)?,
            other => return Err(Error::invalid("config", format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::invalid("alpha", format!("must be >= 0, got {}", self.alpha)));
        }
        if !(self.th > 0.0 && self.th < 1.0) {
            return Err(Error::invalid("th", format!("must be in (0,1), got {}", self.th)));
        }
        if self.target_mode == "double" && !(self.th2 > 0.0 && self.th2 < self.th) {
            return Err(Error::invalid("th2", format!("double mode needs Th > Th2 > 0, got th={} th2={}", self.th, self.th2)));
        }
        self.target_kind()?;
        if !(self.eps_clamp > 0.0 && self.eps_clamp < 1.0) {
            return Err(Error::invalid("eps_clamp", format!("must be in (0,1), got {}", self.eps_clamp)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.pair_batch == 0 {
            return Err(Error::invalid("config", "epochs, batch_size and pair_batch must be positive"));
        }
        if self.n_reg < 2 {
            return Err(Error::invalid("n_reg", "need at least 2 regularization images"));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::invalid("lr", format!("must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", format!("must be in [0,1), got {}", self.momentum)));
        }
        if !(self.decay_at > 0.0 && self.decay_at <= 1.0) {
            return Err(Error::invalid("decay_at", format!("must be in (0,1], got {}", self.decay_at)));
        }
        Ok(())
    }

    /// Target construction described by `target_mode` / `th` / `th2`.
    pub fn target_kind(&self) -> Result<TargetModeSpec> {
        Ok(match self.target_mode.as_str() {
            "threshold" => TargetModeSpec::Threshold,
            "double" => TargetModeSpec::Double,
            other => TargetModeSpec::Subset(SubsetMode::parse(other)?),
        })
    }

    /// Canonical text rendering: every key, fixed order. The run hash is
    /// the SHA-256 of this text.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("alpha", self.alpha.to_string());
        kv("arch", self.arch.clone());
        kv("batch_size", self.batch_size.to_string());
        kv("class_dataset", self.class_dataset.clone());
        kv("class_limit", self.class_limit.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("decay_at", self.decay_at.to_string());
        kv("epochs", self.epochs.to_string());
        kv("eps_clamp", self.eps_clamp.to_string());
        kv("eval_limit", self.eval_limit.to_string());
        kv("freeze_reg_pairs", self.freeze_reg_pairs.to_string());
        kv("grayscale", self.grayscale.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("n_reg", self.n_reg.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("pair_batch", self.pair_batch.to_string());
        kv("reg_dataset", self.reg_dataset.clone());
        kv("seed", self.seed.to_string());
        kv("target_mode", self.target_mode.clone());
        kv("th", self.th.to_string());
        kv("th2", self.th2.to_string());
        s
    }

    /// First 12 hex characters of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetModeSpec {
    Threshold,
    Double,
    Subset(SubsetMode),
}
