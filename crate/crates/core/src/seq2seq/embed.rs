use rand_chacha::ChaCha8Rng;

use super::model::{ModelGrads, ModelParams};
use super::network::{decoder_pass, encoder_forward};
use crate::corpus::{LanguageId, Sentence};
use crate::nn::{Real, Tensor2};
use crate::simsearch::EmbeddingMatrix;
use crate::{Error, Result};

/// Fixed-size representation of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbedding<T = f32> {
    pub values: Vec<T>,
    pub language: LanguageId,
    pub unit_norm: bool,
}

impl<T: Real> SentenceEmbedding<T> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt()
    }

    /// Copy scaled to unit L2 norm (a zero vector stays zero).
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        let values = if n > 0.0 {
            self.values.iter().map(|&x| T::from_f64(x.to_f64() / n)).collect()
        } else {
            self.values.clone()
        };
        SentenceEmbedding { values, language: self.language.clone(), unit_norm: true }
    }
}

fn no_dropout() -> Option<&'static mut ChaCha8Rng> {
    None
}

/// Embeds one sentence with dropout disabled.
pub fn encode<T: Real>(model: &ModelParams<T>, sentence: &[u32], lang: &LanguageId) -> Result<SentenceEmbedding<T>> {
    let p = model.config.language_index(lang)?;
    if sentence.is_empty() {
        return Err(Error::EmptySentence);
    }
    let (repr, _) = encoder_forward(model, p, &[sentence], no_dropout())?;
    Ok(SentenceEmbedding {
        values: repr.row(0).to_vec(),
        language: lang.clone(),
        unit_norm: false,
    })
}

/// Embeds a padded batch with dropout disabled; row `b` belongs to `sentences[b]`.
pub fn encode_batch<T: Real>(model: &ModelParams<T>, sentences: &[&[u32]], lang: &LanguageId) -> Result<Tensor2<T>> {
    let p = model.config.language_index(lang)?;
    Ok(encoder_forward(model, p, sentences, no_dropout())?.0)
}

/// Embeds a whole corpus column, batching sentences of similar length.
pub fn encode_corpus(
    model: &ModelParams<f32>,
    sentences: &[Sentence],
    lang: &LanguageId,
    batch_size: usize,
) -> Result<EmbeddingMatrix> {
    let d = model.repr_dim();
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.sort_by_key(|&i| sentences[i].tokens.len());
    let mut data = vec![0f32; sentences.len() * d];
    for chunk in order.chunks(batch_size.max(1)) {
        let batch: Vec<&[u32]> = chunk.iter().map(|&i| sentences[i].tokens.as_slice()).collect();
        let repr = encode_batch(model, &batch, lang)?;
        for (b, &i) in chunk.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(repr.row(b));
        }
    }
    EmbeddingMatrix::new(sentences.len(), d, data)
}

/// Element-wise mean, tagged with the language `mixed`.
pub fn combine_avg<T: Real>(embeddings: &[SentenceEmbedding<T>]) -> Result<SentenceEmbedding<T>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::InvalidParameter("cannot average zero embeddings".into()))?;
    let d = first.dim();
    if embeddings.iter().any(|e| e.dim() != d) {
        return Err(Error::ShapeMismatch("embeddings of different dimensions".into()));
    }
    if embeddings.len() == 1 {
        return Ok(first.clone());
    }
    let k = embeddings.len() as f64;
    let values = (0..d)
        .map(|j| T::from_f64(embeddings.iter().map(|e| e.values[j].to_f64()).sum::<f64>() / k))
        .collect();
    Ok(SentenceEmbedding {
        values,
        language: LanguageId::new("mixed")?,
        unit_norm: false,
    })
}

/// Batched [`combine_avg`] over `B x d` matrices.
pub(crate) fn average_rows<T: Real>(reprs: &[Tensor2<T>]) -> Tensor2<T> {
    if reprs.len() == 1 {
        return reprs[0].clone();
    }
    let k = reprs.len() as f64;
    let mut out = reprs[0].zeros_like();
    for (i, x) in out.as_mut_slice().iter_mut().enumerate() {
        *x = T::from_f64(reprs.iter().map(|r| r.as_slice()[i].to_f64()).sum::<f64>() / k);
    }
    out
}

pub struct DecodeNll<T> {
    /// Mean NLL per target token, end of sentence included.
    pub loss: f64,
    pub grads: ModelGrads<T>,
    pub d_embedding: Vec<T>,
}

/// Teacher-forced loss of `target` given `embedding`, with gradients for the
/// decoder, the bridge, the target embedding table and the input embedding.
pub fn decode_nll<T: Real>(
    model: &ModelParams<T>,
    embedding: &SentenceEmbedding<T>,
    target: &[u32],
    lang: &LanguageId,
) -> Result<DecodeNll<T>> {
    let q = model.config.language_index(lang)?;
    let emb = Tensor2::from_vec(1, embedding.dim(), embedding.values.clone())?;
    let mut grads = ModelGrads::new(model);
    let out = decoder_pass(model, q, &emb, &[target], no_dropout(), Some((&mut grads, 1.0)))?;
    Ok(DecodeNll {
        loss: out.mean_nll(),
        grads,
        d_embedding: out.d_embedding.expect("gradients requested").into_vec(),
    })
}
