//! Versioned model archives.
//!
//! A checkpoint is a CBOR map holding the format version, the scalar type, the
//! encoder configuration, encoder and classifier parameter lists, and the
//! source validation accuracy measured when the model was pretrained.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Param, ParamStore};
use crate::backbone::{EncoderConfig, VisionTransformer, CLASSIFIER_PREFIX};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub version: u32,
    pub scalar: String,
    pub config: EncoderConfig,
    pub encoder: Vec<Param<T>>,
    pub classifier: Vec<Param<T>>,
    pub source_val_acc: Option<f64>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &VisionTransformer<T>, source_val_acc: Option<f64>) -> Self {
        let (classifier, encoder): (Vec<_>, Vec<_>) = model
            .params()
            .iter()
            .map(|(_, p)| Param { frozen: false, ..p.clone() })
            .partition(|p| p.name.starts_with(CLASSIFIER_PREFIX));
        Self { version: CHECKPOINT_VERSION, scalar: T::NAME.to_string(), config: model.config().clone(), encoder, classifier, source_val_acc }
    }

    /// Rebuilds the model; every parameter is trainable afterwards.
    pub fn to_model(&self) -> Result<VisionTransformer<T>> {
        let mut store = ParamStore::new();
        for p in self.encoder.iter().chain(&self.classifier) {
            store.add(p.name.clone(), p.value.clone());
        }
        VisionTransformer::from_params(self.config.clone(), store)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        ciborium::into_writer(self, w).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let ckpt: Self = ciborium::from_reader(r).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        if ckpt.scalar != T::NAME {
            return Err(Error::Checkpoint(format!("checkpoint stores {} weights, expected {}", ckpt.scalar, T::NAME)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(BufReader::new(f))
    }
}

/// SHA-256 over the names, shapes and bit patterns of the selected parameters.
pub fn params_digest<T: Scalar>(store: &ParamStore<T>, select: impl Fn(&Param<T>) -> bool) -> String {
    let mut h = Sha256::new();
    for (_, p) in store.iter().filter(|(_, p)| select(p)) {
        h.update(p.name.as_bytes());
        for d in p.value.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.as_f64().to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn classifier_digest<T: Scalar>(model: &VisionTransformer<T>) -> String {
    params_digest(model.params(), |p| p.name.starts_with(CLASSIFIER_PREFIX))
}
