//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! b"KGNEDCKP"  u32 version  u64 header_len  header (JSON)  u64 n_params  n_params x f64
//! ```
//!
//! The JSON header carries the model and context configuration and the
//! vocabulary, so a checkpoint alone is enough to assemble inputs and score.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Classifier, ModelConfig, TrainConfig};
use crate::context::ContextConfig;
use crate::error::{Error, Result};
use crate::tokenize::Vocab;

const MAGIC: &[u8; 8] = b"KGNEDCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Classifier,
    pub vocab: Vocab,
    pub context: ContextConfig,
    pub train: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    context: ContextConfig,
    train: Option<TrainConfig>,
    vocab: Vocab,
}

impl Checkpoint {
    pub fn new(model: Classifier, vocab: Vocab, context: ContextConfig, train: Option<TrainConfig>) -> Result<Self> {
        if model.config().vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "model vocab size {} does not match vocabulary of {}",
                model.config().vocab_size,
                vocab.len()
            )));
        }
        model.config().check_context(&context)?;
        Ok(Self {
            model,
            vocab,
            context,
            train,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            model: self.model.config().clone(),
            context: self.context.clone(),
            train: self.train.clone(),
            vocab: self.vocab.clone(),
        })?;
        let params = self.model.params();
        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + 8 + params.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rest = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if rest.len() < n {
                return Err(Error::Checkpoint(format!("file truncated while reading {what}")));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        if take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads version {CHECKPOINT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(take(8, "header length")?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(take(header_len, "header")?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let n = u64::from_le_bytes(take(8, "parameter count")?.try_into().unwrap()) as usize;
        let raw = take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("bad parameter count".into()))?, "parameters")?;
        let params: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after parameters", rest.len())));
        }
        let model = Classifier::from_params(header.model, params)?;
        Self::new(model, header.vocab, header.context, header.train)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::kg::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and refuses a checkpoint built for a different vocabulary size.
    pub fn load_for_vocab(path: &Path, vocab: &Vocab) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.vocab.len() != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with a vocabulary of {} entries, but {} were supplied",
                ck.vocab.len(),
                vocab.len()
            )));
        }
        Ok(ck)
    }
}
