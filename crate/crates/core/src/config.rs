//! Run configuration and its TOML representation.
//!
//! Sections `[data]`, `[loss]` and `[train]` must list every key; the optional
//! `[model]` section overrides the default encoder size.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::RandAugment;
use crate::backbone::EncoderConfig;
use crate::data::{ShiftConfig, ShiftKind};
use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Which target samples the per-epoch accuracy is measured on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    /// The unlabelled pool used during adaptation.
    Transductive,
    /// Labelled target samples kept out of adaptation.
    Holdout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self { embed_dim: e.embed_dim, depth: e.depth, heads: e.heads, mlp_dim: e.mlp_dim }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs_pretrain: usize,
    pub epochs_adapt: usize,
    pub batch_size: usize,
    pub labeled_batch_size: usize,
    pub mix_batch_size: usize,
    pub lr_encoder: f64,
    pub lr_classifier: f64,
    pub momentum: f64,
    /// Optimizer for source pretraining; adaptation always uses momentum SGD.
    pub pretrain_optimizer: OptimizerKind,
    pub pretrain_batch_size: usize,
    pub pretrain_lr_encoder: f64,
    pub pretrain_lr_classifier: f64,
    /// Fraction of the source split held out to measure validation accuracy.
    pub val_fraction: f64,
    pub k_reliable: usize,
    pub mix_beta: f64,
    pub mix_gamma: f64,
    pub augment_ops: usize,
    pub augment_magnitude: f64,
    pub eval_split: EvalSplit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs_pretrain: 20,
            epochs_adapt: 10,
            batch_size: 64,
            labeled_batch_size: 8,
            mix_batch_size: 16,
            lr_encoder: 0.001,
            lr_classifier: 0.01,
            momentum: 0.9,
            pretrain_optimizer: OptimizerKind::Adam,
            pretrain_batch_size: 16,
            pretrain_lr_encoder: 0.001,
            pretrain_lr_classifier: 0.001,
            val_fraction: 0.2,
            k_reliable: 2,
            mix_beta: 1.0,
            mix_gamma: 1.0,
            augment_ops: 2,
            augment_magnitude: 9.0,
            eval_split: EvalSplit::Transductive,
        }
    }
}

impl TrainConfig {
    pub fn augment(&self) -> RandAugment {
        RandAugment::new(self.augment_ops, self.augment_magnitude)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_classifier", self.lr_classifier),
            ("pretrain_lr_encoder", self.pretrain_lr_encoder),
            ("pretrain_lr_classifier", self.pretrain_lr_classifier),
            ("mix_beta", self.mix_beta),
            ("mix_gamma", self.mix_gamma),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.labeled_batch_size == 0 || self.mix_batch_size == 0 || self.pretrain_batch_size == 0 {
            return Err(Error::Config("labeled_batch_size, mix_batch_size and pretrain_batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: ShiftConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { data: ShiftConfig::default(), model: ModelConfig::default(), loss: LossWeights::default(), train: TrainConfig::default() }
    }
}

impl RunConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.data.image_size,
            channels: self.data.channels,
            patch_size: self.data.patch_size,
            embed_dim: self.model.embed_dim,
            depth: self.model.depth,
            heads: self.model.heads,
            mlp_dim: self.model.mlp_dim,
            num_classes: self.data.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.encoder().validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let data = doc_section(&doc, "data")?;
        let loss = doc_section(&doc, "loss")?;
        let train = doc_section(&doc, "train")?;
        let empty = toml::Table::new();
        let model = match doc.get("model") {
            Some(toml::Value::Table(t)) => t,
            Some(_) => return Err(Error::Config("[model] must be a table".into())),
            None => &empty,
        };
        let dm = ModelConfig::default();
        let shift_kind: String = req(data, "data", "shift_kind")?;
        let cfg = Self {
            data: ShiftConfig {
                num_classes: req(data, "data", "num_classes")?,
                image_size: req(data, "data", "image_size")?,
                patch_size: req(data, "data", "patch_size")?,
                channels: req(data, "data", "channels")?,
                shots: req(data, "data", "shots")?,
                n_source: req(data, "data", "n_source")?,
                n_unlabeled: req(data, "data", "n_unlabeled")?,
                n_holdout: req(data, "data", "n_holdout")?,
                shift_kind: shift_kind.parse::<ShiftKind>()?,
                seed: req(data, "data", "seed")?,
            },
            model: ModelConfig {
                embed_dim: opt(model, "model", "embed_dim", dm.embed_dim)?,
                depth: opt(model, "model", "depth", dm.depth)?,
                heads: opt(model, "model", "heads", dm.heads)?,
                mlp_dim: opt(model, "model", "mlp_dim", dm.mlp_dim)?,
            },
            loss: LossWeights {
                lambda_pwc: req(loss, "loss", "lambda_pwc")?,
                lambda_rmc: req(loss, "loss", "lambda_rmc")?,
                lambda_pr: req(loss, "loss", "lambda_pr")?,
                tau: req(loss, "loss", "tau")?,
                alpha: req(loss, "loss", "alpha")?,
            },
            train: TrainConfig {
                seed: req(train, "train", "seed")?,
                epochs_pretrain: req(train, "train", "epochs_pretrain")?,
                epochs_adapt: req(train, "train", "epochs_adapt")?,
                batch_size: req(train, "train", "batch_size")?,
                labeled_batch_size: req(train, "train", "labeled_batch_size")?,
                mix_batch_size: req(train, "train", "mix_batch_size")?,
                lr_encoder: req(train, "train", "lr_encoder")?,
                lr_classifier: req(train, "train", "lr_classifier")?,
                momentum: req(train, "train", "momentum")?,
                pretrain_optimizer: req(train, "train", "pretrain_optimizer")?,
                pretrain_batch_size: req(train, "train", "pretrain_batch_size")?,
                pretrain_lr_encoder: req(train, "train", "pretrain_lr_encoder")?,
                pretrain_lr_classifier: req(train, "train", "pretrain_lr_classifier")?,
                val_fraction: req(train, "train", "val_fraction")?,
                k_reliable: req(train, "train", "k_reliable")?,
                mix_beta: req(train, "train", "mix_beta")?,
                mix_gamma: req(train, "train", "mix_gamma")?,
                augment_ops: req(train, "train", "augment_ops")?,
                augment_magnitude: req(train, "train", "augment_magnitude")?,
                eval_split: req(train, "train", "eval_split")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form; independent of key order in the source file.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serializes");
        let digest = Sha256::digest(canonical.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn doc_section<'a>(doc: &'a toml::Table, name: &'static str) -> Result<&'a toml::Table> {
    match doc.get(name) {
        Some(toml::Value::Table(t)) => Ok(t),
        Some(_) => Err(Error::Config(format!("[{name}] must be a table"))),
        None => Err(Error::MissingKey { section: name.into(), key: "*".into() }),
    }
}

fn req<T: DeserializeOwned>(t: &toml::Table, section: &'static str, key: &str) -> Result<T> {
    let v = t.get(key).ok_or_else(|| Error::MissingKey { section: section.into(), key: key.into() })?;
    convert(v, section, key)
}

fn opt<T: DeserializeOwned>(t: &toml::Table, section: &'static str, key: &str, default: T) -> Result<T> {
    match t.get(key) {
        Some(v) => convert(v, section, key),
        None => Ok(default),
    }
}

fn convert<T: DeserializeOwned>(v: &toml::Value, section: &str, key: &str) -> Result<T> {
    // Integers are accepted where floats are expected.
    let v = match v {
        toml::Value::Integer(i) if std::any::type_name::<T>() == "f64" => toml::Value::Float(*i as f64),
        other => other.clone(),
    };
    v.try_into().map_err(|e: toml::de::Error| Error::Config(format!("[{section}].{key}: {}", e.message())))
}
