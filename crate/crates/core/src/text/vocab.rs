use serde::{Deserialize, Serialize};

use super::TextError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const WORDS: &[&str] = &[
    "<pad>", "<bos>", "<eos>", "the", "series", "is", "rising", "falling", "flat", "gently", "sharply", "with", "low",
    "moderate", "high", "volatility", ",", "peak", "trough", "early", "middle", "late", "level", "medium", ".",
];

/// Closed word-level vocabulary with dense ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrendVocabulary {
    pub tokens: Vec<String>,
}

impl Default for TrendVocabulary {
    fn default() -> Self {
        Self {
            tokens: WORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TrendVocabulary {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == word)
    }

    /// `[BOS, words…, EOS]`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, TextError> {
        let mut ids = vec![BOS];
        for word in text.split_whitespace() {
            let id = self.id(word).filter(|&i| i > EOS).ok_or_else(|| TextError::UnknownToken(word.to_string()))?;
            ids.push(id);
        }
        ids.push(EOS);
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i > EOS && i < self.size())
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}
