//! INI-style run configuration: `key = value` lines, `#` or `;` comments,
//! `[section]` headers (ignored). Command-line flags are applied on top with
//! [`RunConfig::set`]. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::train::TrainConfig;

/// Every accepted key.
pub const KNOWN_KEYS: &[&str] = &[
    // training
    "epochs",
    "batch_size",
    "lr",
    "lr_halving_patience",
    "lambda",
    "epsilon",
    "sinkhorn_iters",
    "unsup_sinkhorn_iters",
    "sigma_pos",
    "p",
    "q",
    "k",
    "seed",
    "schedule",
    "kernel",
    "sigma",
    "ridge",
    "pooling",
    "sinkhorn_mode",
    "refit_max_iters",
    "refit_tol",
    // synthetic data
    "classes",
    "motifs_per_class",
    "dim",
    "motif_count_min",
    "motif_count_max",
    "length_min",
    "length_max",
    "background_std",
    "motif_std",
    "motif_radius",
    "train_size",
    "val_size",
    "test_size",
    // paths and runtime
    "train",
    "val",
    "test",
    "data",
    "out",
    "init",
    "metrics",
    "threads",
    // grids shipped with presets, for external sweep scripts
    "lambda_grid",
    "epsilon_grid",
    "sigma_pos_grid",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse { line: i + 1, msg: format!("expected `key = value`, got {line:?}") });
            };
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::InvalidParameter(format!("unknown configuration key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Typed lookup; a malformed value names its key.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|_| Error::InvalidParameter(format!("invalid value {v:?} for {key}"))))
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn positive(&self, key: &str, default: usize) -> Result<usize> {
        let v = self.or(key, default)?;
        if v == 0 {
            return Err(Error::InvalidParameter(format!("{key} must be positive")));
        }
        Ok(v)
    }

    fn list(&self, key: &str) -> Result<Vec<f64>> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::InvalidParameter(format!("invalid list entry {t:?} for {key}")))
                    })
                    .collect()
            })
            .unwrap_or(Ok(Vec::new()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.or("seed", 0)
    }

    /// Grid values for sweeps (`lambda_grid`, `epsilon_grid`, `sigma_pos_grid`).
    pub fn grid(&self, key: &str) -> Result<Vec<f64>> {
        self.list(key)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let kernel = match self.raw("kernel").unwrap_or("gaussian") {
            "gaussian" => {
                let sigma = match d.kernel {
                    KernelSpec::Gaussian { sigma } => sigma,
                    KernelSpec::Linear => 1.0,
                };
                KernelSpec::gaussian(self.or("sigma", sigma)?)?
            }
            "linear" => KernelSpec::Linear,
            other => return Err(Error::InvalidParameter(format!("invalid value {other:?} for kernel"))),
        };
        let sigma_pos = match self.raw("sigma_pos") {
            None | Some("none") | Some("off") => None,
            Some(_) => self.get("sigma_pos")?,
        };
        let cfg = TrainConfig {
            epochs: self.or("epochs", d.epochs)?,
            batch_size: self.positive("batch_size", d.batch_size)?,
            lr: self.or("lr", d.lr)?,
            lr_halving_patience: self.positive("lr_halving_patience", d.lr_halving_patience)?,
            lambda: self.or("lambda", d.lambda)?,
            epsilon: self.or("epsilon", d.epsilon)?,
            sinkhorn_iters: self.positive("sinkhorn_iters", d.sinkhorn_iters)?,
            unsup_sinkhorn_iters: self.positive("unsup_sinkhorn_iters", d.unsup_sinkhorn_iters)?,
            sigma_pos,
            p: self.positive("p", d.p)?,
            q: self.positive("q", d.q)?,
            k: self.positive("k", d.k)?,
            seed: self.seed()?,
            schedule: self.or("schedule", d.schedule)?,
            kernel,
            ridge: self.or("ridge", d.ridge)?,
            pooling: self.or("pooling", d.pooling)?,
            sinkhorn_mode: self.or("sinkhorn_mode", d.sinkhorn_mode)?,
            refit_max_iters: self.or("refit_max_iters", d.refit_max_iters)?,
            refit_tol: self.or("refit_tol", d.refit_tol)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Generator spec and `(train, val, test)` sizes.
    pub fn synth(&self) -> Result<(SynthSpec, [usize; 3])> {
        let d = SynthSpec::default();
        let spec = SynthSpec {
            classes: self.positive("classes", d.classes)?,
            motifs_per_class: self.positive("motifs_per_class", d.motifs_per_class)?,
            motif_dim: self.positive("dim", d.motif_dim)?,
            motif_count_range: (
                self.or("motif_count_min", d.motif_count_range.0)?,
                self.or("motif_count_max", d.motif_count_range.1)?,
            ),
            set_length_range: (
                self.or("length_min", d.set_length_range.0)?,
                self.or("length_max", d.set_length_range.1)?,
            ),
            background_std: self.or("background_std", d.background_std)?,
            motif_std: self.or("motif_std", d.motif_std)?,
            motif_radius: self.or("motif_radius", d.motif_radius)?,
            seed: self.seed()?,
        };
        spec.validate()?;
        let sizes = [self.or("train_size", 1000)?, self.or("val_size", 200)?, self.or("test_size", 500)?];
        Ok((spec, sizes))
    }
}
