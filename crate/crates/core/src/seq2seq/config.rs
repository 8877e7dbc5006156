use serde::{Deserialize, Serialize};

use crate::corpus::LanguageId;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    /// Unidirectional stacked LSTM; the representation is the top layer's
    /// state at the last token.
    StackedLastState,
    /// Stacked BLSTM followed by element-wise max-pooling over time.
    BidirectionalMaxpool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub depth: usize,
    pub nhid: usize,
    pub emb_dim: usize,
    pub dropout_p: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            variant: EncoderVariant::BidirectionalMaxpool,
            depth: 1,
            nhid: 512,
            emb_dim: 384,
            dropout_p: 0.2,
        }
    }
}

impl EncoderConfig {
    /// Dimension of the sentence representation.
    pub fn repr_dim(&self) -> usize {
        match self.variant {
            EncoderVariant::StackedLastState => self.nhid,
            EncoderVariant::BidirectionalMaxpool => 2 * self.nhid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub depth: usize,
    pub nhid: usize,
    pub dropout_p: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            depth: 1,
            nhid: 512,
            dropout_p: 0.2,
        }
    }
}

/// Everything needed to rebuild a model's parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub languages: Vec<LanguageId>,
    /// Corpus vocabulary size per language; the model appends `<s>` and `</s>`.
    pub vocab_sizes: Vec<usize>,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.languages.len() < 2 {
            return bad("a model needs at least two languages".into());
        }
        if self.vocab_sizes.len() != self.languages.len() {
            return bad(format!(
                "{} vocabulary sizes for {} languages",
                self.vocab_sizes.len(),
                self.languages.len()
            ));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.languages.iter().all(|l| seen.insert(l)) {
            return bad("duplicate language".into());
        }
        if self.vocab_sizes.contains(&0) {
            return bad("vocabulary size must be positive".into());
        }
        let e = &self.encoder;
        let d = &self.decoder;
        if e.depth == 0 || e.nhid == 0 || e.emb_dim == 0 || d.depth == 0 || d.nhid == 0 {
            return bad("depth, hidden and embedding sizes must be positive".into());
        }
        for p in [e.dropout_p, d.dropout_p] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout probability {p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn language_index(&self, lang: &LanguageId) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn repr_dim(&self) -> usize {
        self.encoder.repr_dim()
    }

    /// Begin-of-sentence id for language `p` (decoder input only).
    pub fn bos(&self, p: usize) -> u32 {
        self.vocab_sizes[p] as u32
    }

    /// End-of-sentence id for language `p` (decoder target only).
    pub fn eos(&self, p: usize) -> u32 {
        self.vocab_sizes[p] as u32 + 1
    }

    /// Size of the embedding table and of the decoder softmax.
    pub fn model_vocab(&self, p: usize) -> usize {
        self.vocab_sizes[p] + 2
    }
}
