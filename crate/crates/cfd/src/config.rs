//! Run configuration: one nested struct covering architecture, losses,
//! data, optimization and seeds; loaded from a TOML file with
//! `dotted.path=value` command-line overrides applied on the value tree.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::error::Error;
use crate::loss::LossWeights;
use crate::model::BackboneConfig;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// SGD momentum (ignored by Adam).
    pub momentum: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Identities per domain per batch.
    pub p: usize,
    /// Images per identity per batch.
    pub k_imgs: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            lr: 3.5e-4,
            momentum: 0.9,
            epochs: 30,
            steps_per_epoch: 8,
            p: 4,
            k_imgs: 4,
            grad_clip: 5.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        if !self.grad_clip.is_finite() || self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be finite and non-negative".into()));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.p == 0 || self.k_imgs == 0 {
            return Err(Error::Config(
                "epochs, steps and batch geometry must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub loss: LossWeights,
    pub data: SyntheticSpec,
    pub optim: OptimConfig,
    /// Seeds for repeated runs; single-run commands use the first.
    pub seeds: Vec<u64>,
    /// L2-normalize embeddings before retrieval distances.
    pub l2_normalize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            loss: LossWeights::default(),
            data: SyntheticSpec::default(),
            optim: OptimConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
            l2_normalize: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.data.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.optim.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.backbone.num_ids != self.data.num_ids {
            return Err(Error::Config(format!(
                "backbone.num_ids ({}) must match data.num_ids ({})",
                self.backbone.num_ids, self.data.num_ids
            )));
        }
        if self.backbone.num_domains != self.data.train_domains {
            return Err(Error::Config(format!(
                "backbone.num_domains ({}) must match data.train_domains ({})",
                self.backbone.num_domains, self.data.train_domains
            )));
        }
        if self.backbone.input != self.data.extents {
            return Err(Error::Config(
                "backbone.input must match data.extents".into(),
            ));
        }
        if self.optim.p > self.data.num_ids || self.optim.k_imgs > self.data.images_per_id {
            return Err(Error::Config("batch geometry exceeds dataset size".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("unserializable: {e}")))
    }

    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.to_toml()?.as_bytes());
        Ok(format!("{:x}", h.finalize()))
    }

    /// Loads a config file (or the defaults when `path` is `None`) and
    /// applies `dotted.path=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let base = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut tree: toml::Value = toml::from_str(&base)
            .map_err(|e| Error::Config(format!("malformed config file: {e}")))?;
        for ov in overrides {
            apply_override(&mut tree, ov)?;
        }
        // deserialize through the defaulted structs so partial files work
        let cfg: RunConfig = tree
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `a.b.c=value` and sets it in the TOML tree, creating
/// intermediate tables. The value is parsed as TOML (so numbers, bools
/// and arrays work) with a bare-string fallback.
fn apply_override(tree: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not of the form path=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() {
        return Err(Error::Config(format!("override '{spec}' has an empty path")));
    }
    let value: toml::Value = toml::from_str::<toml::Value>(&format!("v = {raw}"))
        .ok()
        .and_then(|t| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override path '{path}' crosses a non-table value"))
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    unreachable!("loop always returns on the last segment");
}
