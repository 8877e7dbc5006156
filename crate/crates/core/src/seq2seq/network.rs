use rand::Rng;

use super::config::EncoderVariant;
use super::model::{ModelGrads, ModelParams};
use crate::nn::{
    bilstm_backward, bilstm_forward, dropout_mask, last_state_backward, last_state_batch,
    maxpool_backward, maxpool_batch, softmax_xent_rows, BiLstmTape, LstmTape, MaxPoolTape, Real,
    SeqLayout, Tensor2,
};
use crate::{Error, Result};

fn check_tokens(sentences: &[&[u32]], vocab: usize) -> Result<SeqLayout> {
    for s in sentences {
        if let Some(&t) = s.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TargetOutOfRange { id: t as usize, vocab });
        }
    }
    SeqLayout::new(sentences.iter().map(|s| s.len()).collect())
}

fn apply_mask<T: Real>(x: &mut Tensor2<T>, mask: &Option<Tensor2<T>>) {
    if let Some(m) = mask {
        for (a, &b) in x.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *a *= b;
        }
    }
}

fn maybe_mask<T: Real, R: Rng>(rows: usize, cols: usize, p: f64, rng: Option<&mut R>) -> Option<Tensor2<T>> {
    match rng {
        Some(rng) if p > 0.0 => Some(dropout_mask(rows, cols, p, rng)),
        _ => None,
    }
}

/// Time-major embedding lookup; padded rows stay zero.
fn embed<T: Real>(table: &Tensor2<T>, sentences: &[&[u32]], layout: &SeqLayout, width: usize, offset: usize) -> Tensor2<T> {
    let mut x = Tensor2::zeros(layout.total_rows(), width);
    for (b, s) in sentences.iter().enumerate() {
        for (t, &tok) in s.iter().enumerate() {
            let r = layout.row(t, b);
            x.row_mut(r)[offset..offset + table.cols()].copy_from_slice(table.row(tok as usize));
        }
    }
    x
}

fn embed_backward<T: Real>(grad: &mut Tensor2<T>, dx: &Tensor2<T>, sentences: &[&[u32]], layout: &SeqLayout, offset: usize) {
    let e = grad.cols();
    for (b, s) in sentences.iter().enumerate() {
        for (t, &tok) in s.iter().enumerate() {
            let src = &dx.row(layout.row(t, b))[offset..offset + e];
            for (g, &d) in grad.row_mut(tok as usize).iter_mut().zip(src) {
                *g += d;
            }
        }
    }
}

enum LayerTape<T> {
    Uni(LstmTape<T>),
    Bi(BiLstmTape<T>),
}

enum PoolTape {
    Max(MaxPoolTape),
    Last,
}

/// Saved state of a batched encoder pass.
pub struct EncoderTape<T> {
    lang: usize,
    tokens: Vec<Vec<u32>>,
    layout: SeqLayout,
    masks: Vec<Option<Tensor2<T>>>,
    layers: Vec<LayerTape<T>>,
    pool: PoolTape,
}

impl<T> EncoderTape<T> {
    /// Max-pooling argmax pattern, `None` for the last-state encoder.
    pub fn pool_argmax(&self) -> Option<&[usize]> {
        match &self.pool {
            PoolTape::Max(t) => Some(t.argmax()),
            PoolTape::Last => None,
        }
    }
}

/// Encodes a batch of sentences of language `p` into `B x d` representations.
/// Dropout is applied to every layer input when `rng` is given.
pub fn encoder_forward<T: Real, R: Rng>(
    model: &ModelParams<T>,
    p: usize,
    sentences: &[&[u32]],
    mut rng: Option<&mut R>,
) -> Result<(Tensor2<T>, EncoderTape<T>)> {
    let cfg = &model.config.encoder;
    let layout = check_tokens(sentences, model.config.vocab_sizes[p])?;
    let enc = &model.encoders[p];
    let mut x = embed(&model.embeddings[p], sentences, &layout, cfg.emb_dim, 0);
    let mut masks = Vec::with_capacity(cfg.depth);
    let mut layers = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let mask = maybe_mask(x.rows(), x.cols(), cfg.dropout_p, rng.as_deref_mut());
        apply_mask(&mut x, &mask);
        masks.push(mask);
        let (h, tape) = match cfg.variant {
            EncoderVariant::StackedLastState => {
                let (h, t) = enc.fwd[l].forward(&x, &layout, false, None)?;
                (h, LayerTape::Uni(t))
            }
            EncoderVariant::BidirectionalMaxpool => {
                let (h, t) = bilstm_forward(&x, &layout, &enc.fwd[l], &enc.bwd[l])?;
                (h, LayerTape::Bi(t))
            }
        };
        layers.push(tape);
        x = h;
    }
    let (repr, pool) = match cfg.variant {
        EncoderVariant::StackedLastState => (last_state_batch(&x, &layout), PoolTape::Last),
        EncoderVariant::BidirectionalMaxpool => {
            let (r, t) = maxpool_batch(&x, &layout)?;
            (r, PoolTape::Max(t))
        }
    };
    let tape = EncoderTape {
        lang: p,
        tokens: sentences.iter().map(|s| s.to_vec()).collect(),
        layout,
        masks,
        layers,
        pool,
    };
    Ok((repr, tape))
}

/// Accumulates parameter gradients of the encoder pass given `d_repr` (`B x d`).
pub fn encoder_backward<T: Real>(
    model: &ModelParams<T>,
    tape: &EncoderTape<T>,
    d_repr: &Tensor2<T>,
    grads: &mut ModelGrads<T>,
) -> Result<()> {
    let p = tape.lang;
    let layout = &tape.layout;
    let mut dx = match &tape.pool {
        PoolTape::Max(t) => maxpool_backward(d_repr, t, layout),
        PoolTape::Last => last_state_backward(d_repr, layout),
    };
    let enc = &model.encoders[p];
    let genc = grads.encoder(model, p);
    for l in (0..tape.layers.len()).rev() {
        dx = match &tape.layers[l] {
            LayerTape::Uni(t) => enc.fwd[l].backward(t, layout, &dx, &mut genc.fwd[l])?.0,
            LayerTape::Bi(t) => {
                let (gf, gb) = (&mut genc.fwd[l], &mut genc.bwd[l]);
                bilstm_backward(t, layout, &dx, &enc.fwd[l], &enc.bwd[l], gf, gb)?
            }
        };
        apply_mask(&mut dx, &tape.masks[l]);
    }
    let tokens: Vec<&[u32]> = tape.tokens.iter().map(|s| s.as_slice()).collect();
    embed_backward(grads.embedding(model, p), &dx, &tokens, layout, 0);
    Ok(())
}

/// Result of a decoder pass over a batch.
pub struct DecodeOutput<T> {
    /// Summed negative log-likelihood over all target tokens (including `</s>`).
    pub nll_sum: f64,
    pub tokens: usize,
    /// Gradient w.r.t. the input embeddings, present when gradients were requested.
    pub d_embedding: Option<Tensor2<T>>,
}

impl<T> DecodeOutput<T> {
    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.tokens.max(1) as f64
    }
}

/// Teacher-forced decoder for language `q` conditioned on `emb` (`B x d`).
///
/// When `grads` is given the loss being differentiated is
/// `loss_scale · nll_sum / tokens`; parameter gradients are accumulated and
/// the embedding gradient returned.
pub fn decoder_pass<T: Real, R: Rng>(
    model: &ModelParams<T>,
    q: usize,
    emb: &Tensor2<T>,
    targets: &[&[u32]],
    mut rng: Option<&mut R>,
    grads: Option<(&mut ModelGrads<T>, f64)>,
) -> Result<DecodeOutput<T>> {
    let cfg = &model.config;
    let d = cfg.repr_dim();
    let e = cfg.encoder.emb_dim;
    let dh = cfg.decoder.nhid;
    let depth = cfg.decoder.depth;
    let bsz = targets.len();
    if emb.shape() != (bsz, d) {
        return Err(Error::ShapeMismatch(format!(
            "sentence embeddings {:?}, expected ({bsz}, {d})",
            emb.shape()
        )));
    }
    if targets.iter().any(|t| t.is_empty()) {
        return Err(Error::EmptySentence);
    }
    check_tokens(targets, cfg.vocab_sizes[q])?;
    let (bos, eos) = (cfg.bos(q), cfg.eos(q));
    let inputs: Vec<Vec<u32>> = targets
        .iter()
        .map(|t| std::iter::once(bos).chain(t.iter().copied()).collect())
        .collect();
    let input_refs: Vec<&[u32]> = inputs.iter().map(|s| s.as_slice()).collect();
    let layout = SeqLayout::new(inputs.iter().map(|s| s.len()).collect())?;
    let dec = &model.decoders[q];

    let init = emb.matmul(false, &model.bridge.w, false)?;
    let mut init = init;
    for r in 0..bsz {
        for (x, &b) in init.row_mut(r).iter_mut().zip(model.bridge.b.as_slice()) {
            *x += b;
        }
    }
    let h0: Vec<Tensor2<T>> = (0..depth).map(|l| init.columns(2 * l * dh, dh)).collect();
    let c0: Vec<Tensor2<T>> = (0..depth).map(|l| init.columns(2 * l * dh + dh, dh)).collect();

    let mut x = embed(&model.embeddings[q], &input_refs, &layout, e + d, 0);
    for b in 0..bsz {
        for t in 0..layout.lengths[b] {
            x.row_mut(layout.row(t, b))[e..].copy_from_slice(emb.row(b));
        }
    }
    let mut masks = Vec::with_capacity(depth);
    let mut tapes = Vec::with_capacity(depth);
    for l in 0..depth {
        let mask = maybe_mask(x.rows(), x.cols(), cfg.decoder.dropout_p, rng.as_deref_mut());
        apply_mask(&mut x, &mask);
        masks.push(mask);
        let (h, tape) = dec.layers[l].forward(&x, &layout, false, Some((&h0[l], &c0[l])))?;
        tapes.push(tape);
        x = h;
    }

    let mut rows = Vec::new();
    let mut gold = Vec::new();
    for b in 0..bsz {
        for t in 0..layout.lengths[b] {
            rows.push(layout.row(t, b));
            gold.push(if t < targets[b].len() { targets[b][t] } else { eos });
        }
    }
    let n = rows.len();
    let mut hv = Tensor2::zeros(n, dh);
    for (i, &r) in rows.iter().enumerate() {
        hv.row_mut(i).copy_from_slice(x.row(r));
    }
    let mut logits = hv.matmul(false, &dec.out_w, false)?;
    for i in 0..n {
        for (z, &b) in logits.row_mut(i).iter_mut().zip(dec.out_b.as_slice()) {
            *z += b;
        }
    }
    let (sum, mut dlogits) = softmax_xent_rows(&logits, &gold)?;
    let nll_sum = sum.to_f64();

    let Some((grads, loss_scale)) = grads else {
        return Ok(DecodeOutput { nll_sum, tokens: n, d_embedding: None });
    };
    dlogits.scale(T::from_f64(loss_scale / n as f64));
    let gdec = grads.decoder(model, q);
    gdec.out_w.add_assign(&hv.matmul(true, &dlogits, false)?);
    for i in 0..n {
        for (g, &v) in gdec.out_b.as_mut_slice().iter_mut().zip(dlogits.row(i)) {
            *g += v;
        }
    }
    let dhv = dlogits.matmul(false, &dec.out_w, true)?;
    let mut dx = Tensor2::zeros(layout.total_rows(), dh);
    for (i, &r) in rows.iter().enumerate() {
        dx.row_mut(r).copy_from_slice(dhv.row(i));
    }
    let mut dinit = Tensor2::zeros(bsz, 2 * depth * dh);
    for l in (0..depth).rev() {
        let (dxl, dh0, dc0) = dec.layers[l].backward(&tapes[l], &layout, &dx, &mut gdec.layers[l])?;
        dinit.set_columns(2 * l * dh, &dh0);
        dinit.set_columns(2 * l * dh + dh, &dc0);
        dx = dxl;
        apply_mask(&mut dx, &masks[l]);
    }
    embed_backward(grads.embedding(model, q), &dx, &input_refs, &layout, 0);
    let mut demb = Tensor2::zeros(bsz, d);
    for b in 0..bsz {
        let acc = demb.row_mut(b);
        for t in 0..layout.lengths[b] {
            for (a, &v) in acc.iter_mut().zip(&dx.row(layout.row(t, b))[e..]) {
                *a += v;
            }
        }
    }
    let gbridge = grads.bridge(model);
    gbridge.w.add_assign(&emb.matmul(true, &dinit, false)?);
    for b in 0..bsz {
        for (g, &v) in gbridge.b.as_mut_slice().iter_mut().zip(dinit.row(b)) {
            *g += v;
        }
    }
    demb.add_assign(&dinit.matmul(false, &model.bridge.w, true)?);
    Ok(DecodeOutput { nll_sum, tokens: n, d_embedding: Some(demb) })
}
