//! Trend descriptions, the tiny adapter-tuned language model and text
//! embedding pooling.

mod describe;
mod lm;
mod pool;
mod vocab;

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use describe::{describe_series, Direction, Position, TrendDescriber, TrendFeatures, SLOPE_DEADBAND, SLOPE_SHARP};
pub use lm::{cross_entropy, encode_all, evaluate_loss, instruction_tune, log_softmax, LmConfig, LmHistory, TinyLm};
pub use pool::TextPooler;
pub use vocab::{TrendVocabulary, BOS, EOS, PAD};

use crate::tensor::{Array, Binder, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TextError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} outside the vocabulary")]
    UnknownId(usize),
    #[error("sequence length {len} exceeds the maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("bad language-model checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Json { line: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Adapter(#[from] crate::adapters::AdapterError),
}

/// One instruction-tuning example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub window: Vec<f64>,
    pub text: String,
}

pub fn write_jsonl(path: &Path, pairs: &[InstructionPair]) -> Result<(), TextError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut f, p).expect("pair serializes");
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<InstructionPair>, TextError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TextError::Json {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Distinct descriptions with their frozen LM token states.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextBank {
    pub texts: Vec<String>,
    pub states: Vec<Array>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TextBank {
    /// Runs the (frozen) model once per distinct text.
    pub fn build(lm: &TinyLm, vocab: &TrendVocabulary, texts: impl IntoIterator<Item = String>) -> Result<Self, TextError> {
        let mut bank = Self::default();
        for t in texts {
            if !bank.index.contains_key(&t) {
                bank.index.insert(t.clone(), bank.texts.len());
                bank.texts.push(t);
            }
        }
        for t in &bank.texts {
            let ids = vocab.tokenize(t)?;
            let tape = Tape::new();
            let b = Binder::new(&tape, &lm.store, false);
            let h = lm.hidden(&b, &[ids.clone()])?.value();
            bank.states.push(h.reshape(&[ids.len(), lm.config.d_lm])?);
        }
        Ok(bank)
    }

    pub fn id(&self, text: &str) -> Option<usize> {
        self.index.get(text).copied()
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Restores the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.texts.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }
}
