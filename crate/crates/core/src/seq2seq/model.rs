use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{EncoderVariant, ModelConfig};
use crate::nn::{LstmParams, Real, Tensor2};
use crate::{Error, Result};

const INIT_SCALE: f64 = 0.1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"MLSE";
const CHECKPOINT_VERSION: u32 = 1;

/// One encoder: `fwd[l]` for every layer, plus `bwd[l]` for bidirectional encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub fwd: Vec<LstmParams<T>>,
    pub bwd: Vec<LstmParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    pub layers: Vec<LstmParams<T>>,
    /// `nhid x model_vocab`
    pub out_w: Tensor2<T>,
    pub out_b: Tensor2<T>,
}

/// Affine map from a sentence embedding to the initial `(h, c)` of every
/// decoder layer, shared by all decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct Bridge<T> {
    pub w: Tensor2<T>,
    pub b: Tensor2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// Per-language token embeddings, shared by that language's encoder and decoder.
    pub embeddings: Vec<Tensor2<T>>,
    pub encoders: Vec<EncoderParams<T>>,
    pub decoders: Vec<DecoderParams<T>>,
    pub bridge: Bridge<T>,
}

impl<T: Real> EncoderParams<T> {
    fn zeros_like(&self) -> Self {
        EncoderParams {
            fwd: self.fwd.iter().map(LstmParams::zeros_like).collect(),
            bwd: self.bwd.iter().map(LstmParams::zeros_like).collect(),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2<T>)>) {
        for (dir, layers) in [("fwd", &self.fwd), ("bwd", &self.bwd)] {
            for (l, p) in layers.iter().enumerate() {
                for (name, t) in p.tensors() {
                    out.push((format!("{prefix}.{dir}{l}.{name}"), t));
                }
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor2<T>>) {
        for layers in [&mut self.fwd, &mut self.bwd] {
            for p in layers.iter_mut() {
                for (_, t) in p.tensors_mut() {
                    out.push(t);
                }
            }
        }
    }
}

impl<T: Real> DecoderParams<T> {
    fn zeros_like(&self) -> Self {
        DecoderParams {
            layers: self.layers.iter().map(LstmParams::zeros_like).collect(),
            out_w: self.out_w.zeros_like(),
            out_b: self.out_b.zeros_like(),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2<T>)>) {
        for (l, p) in self.layers.iter().enumerate() {
            for (name, t) in p.tensors() {
                out.push((format!("{prefix}.l{l}.{name}"), t));
            }
        }
        out.push((format!("{prefix}.out_w"), &self.out_w));
        out.push((format!("{prefix}.out_b"), &self.out_b));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor2<T>>) {
        for p in self.layers.iter_mut() {
            for (_, t) in p.tensors_mut() {
                out.push(t);
            }
        }
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
    }
}

impl<T: Real> Bridge<T> {
    fn zeros_like(&self) -> Self {
        Bridge {
            w: self.w.zeros_like(),
            b: self.b.zeros_like(),
        }
    }
}

/// Builds a model with seeded random weights.
pub fn init_model<T: Real>(config: ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let enc = config.encoder.clone();
    let dec = config.decoder.clone();
    let d = config.repr_dim();
    let l = config.languages.len();

    let embeddings = (0..l)
        .map(|p| Tensor2::uniform(config.model_vocab(p), enc.emb_dim, INIT_SCALE, &mut rng))
        .collect();
    let encoders = (0..l)
        .map(|_| {
            let bidir = enc.variant == EncoderVariant::BidirectionalMaxpool;
            let layer_in = |k: usize| {
                if k == 0 {
                    enc.emb_dim
                } else if bidir {
                    2 * enc.nhid
                } else {
                    enc.nhid
                }
            };
            let mut fwd = Vec::new();
            let mut bwd = Vec::new();
            for k in 0..enc.depth {
                fwd.push(LstmParams::init(layer_in(k), enc.nhid, &mut rng));
                if bidir {
                    bwd.push(LstmParams::init(layer_in(k), enc.nhid, &mut rng));
                }
            }
            EncoderParams { fwd, bwd }
        })
        .collect();
    let decoders = (0..l)
        .map(|p| DecoderParams {
            layers: (0..dec.depth)
                .map(|k| {
                    let input = if k == 0 { enc.emb_dim + d } else { dec.nhid };
                    LstmParams::init(input, dec.nhid, &mut rng)
                })
                .collect(),
            out_w: Tensor2::uniform(dec.nhid, config.model_vocab(p), INIT_SCALE, &mut rng),
            out_b: Tensor2::zeros(1, config.model_vocab(p)),
        })
        .collect();
    let bridge = Bridge {
        w: Tensor2::uniform(d, 2 * dec.depth * dec.nhid, INIT_SCALE, &mut rng),
        b: Tensor2::zeros(1, 2 * dec.depth * dec.nhid),
    };
    Ok(ModelParams {
        config,
        embeddings,
        encoders,
        decoders,
        bridge,
    })
}

impl<T: Real> ModelParams<T> {
    pub fn repr_dim(&self) -> usize {
        self.config.repr_dim()
    }

    /// Every parameter tensor with a stable name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor2<T>)> {
        let mut out = Vec::new();
        for (p, lang) in self.config.languages.iter().enumerate() {
            out.push((format!("emb.{lang}"), &self.embeddings[p]));
            self.encoders[p].visit(&format!("enc.{lang}"), &mut out);
            self.decoders[p].visit(&format!("dec.{lang}"), &mut out);
        }
        out.push(("bridge.w".into(), &self.bridge.w));
        out.push(("bridge.b".into(), &self.bridge.b));
        out
    }

    /// Same order as [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2<T>> {
        let mut out = Vec::new();
        for ((e, enc), dec) in self
            .embeddings
            .iter_mut()
            .zip(self.encoders.iter_mut())
            .zip(self.decoders.iter_mut())
        {
            out.push(e);
            enc.visit_mut(&mut out);
            dec.visit_mut(&mut out);
        }
        out.push(&mut self.bridge.w);
        out.push(&mut self.bridge.b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.as_slice().len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.as_slice().iter().map(|x| x.to_f64()))
            .collect()
    }

    pub fn load_flat(&mut self, values: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            for x in t.as_mut_slice() {
                *x = T::from_f64(values[off]);
                off += 1;
            }
        }
        assert_eq!(off, values.len(), "flat parameter length");
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let lstm = |p: &LstmParams<T>| LstmParams {
            w_ih: p.w_ih.cast(),
            w_hh: p.w_hh.cast(),
            bias: p.bias.cast(),
        };
        ModelParams {
            config: self.config.clone(),
            embeddings: self.embeddings.iter().map(Tensor2::cast).collect(),
            encoders: self
                .encoders
                .iter()
                .map(|e| EncoderParams {
                    fwd: e.fwd.iter().map(lstm).collect(),
                    bwd: e.bwd.iter().map(lstm).collect(),
                })
                .collect(),
            decoders: self
                .decoders
                .iter()
                .map(|d| DecoderParams {
                    layers: d.layers.iter().map(lstm).collect(),
                    out_w: d.out_w.cast(),
                    out_b: d.out_b.cast(),
                })
                .collect(),
            bridge: Bridge {
                w: self.bridge.w.cast(),
                b: self.bridge.b.cast(),
            },
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Plain-text per-tensor L2 norms, one `name<TAB>norm` line each.
    pub fn norms_report(&self) -> String {
        self.named_tensors()
            .iter()
            .map(|(n, t)| format!("{n}\t{:.6e}\n", t.sum_sq().sqrt()))
            .collect()
    }
}

/// Gradients for the components a training step touched; untouched
/// components stay `None` and their parameters are never written.
#[derive(Clone, Debug)]
pub struct ModelGrads<T> {
    pub embeddings: Vec<Option<Tensor2<T>>>,
    pub encoders: Vec<Option<EncoderParams<T>>>,
    pub decoders: Vec<Option<DecoderParams<T>>>,
    pub bridge: Option<Bridge<T>>,
}

impl<T: Real> ModelGrads<T> {
    pub fn new(model: &ModelParams<T>) -> Self {
        let l = model.config.languages.len();
        ModelGrads {
            embeddings: vec![None; l],
            encoders: vec![None; l],
            decoders: vec![None; l],
            bridge: None,
        }
    }

    pub fn embedding(&mut self, model: &ModelParams<T>, p: usize) -> &mut Tensor2<T> {
        self.embeddings[p].get_or_insert_with(|| model.embeddings[p].zeros_like())
    }

    pub fn encoder(&mut self, model: &ModelParams<T>, p: usize) -> &mut EncoderParams<T> {
        self.encoders[p].get_or_insert_with(|| model.encoders[p].zeros_like())
    }

    pub fn decoder(&mut self, model: &ModelParams<T>, p: usize) -> &mut DecoderParams<T> {
        self.decoders[p].get_or_insert_with(|| model.decoders[p].zeros_like())
    }

    pub fn bridge(&mut self, model: &ModelParams<T>) -> &mut Bridge<T> {
        self.bridge.get_or_insert_with(|| model.bridge.zeros_like())
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: ModelGrads<T>) {
        fn add<T: Real>(a: &mut Tensor2<T>, b: &Tensor2<T>) {
            a.add_assign(b)
        }
        fn add_lstm<T: Real>(a: &mut [LstmParams<T>], b: &[LstmParams<T>]) {
            for (x, y) in a.iter_mut().zip(b) {
                add(&mut x.w_ih, &y.w_ih);
                add(&mut x.w_hh, &y.w_hh);
                add(&mut x.bias, &y.bias);
            }
        }
        for (a, b) in self.embeddings.iter_mut().zip(other.embeddings) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => add(x, &y),
                (None, Some(y)) => *a = Some(y),
                _ => {}
            }
        }
        for (a, b) in self.encoders.iter_mut().zip(other.encoders) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => {
                    add_lstm(&mut x.fwd, &y.fwd);
                    add_lstm(&mut x.bwd, &y.bwd);
                }
                (None, Some(y)) => *a = Some(y),
                _ => {}
            }
        }
        for (a, b) in self.decoders.iter_mut().zip(other.decoders) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => {
                    add_lstm(&mut x.layers, &y.layers);
                    add(&mut x.out_w, &y.out_w);
                    add(&mut x.out_b, &y.out_b);
                }
                (None, Some(y)) => *a = Some(y),
                _ => {}
            }
        }
        match (self.bridge.as_mut(), other.bridge) {
            (Some(x), Some(y)) => {
                add(&mut x.w, &y.w);
                add(&mut x.b, &y.b);
            }
            (None, Some(y)) => self.bridge = Some(y),
            _ => {}
        }
    }

    /// Gradient flattened in [`ModelParams::flatten`] order, zeros for
    /// untouched components.
    pub fn flatten(&self, model: &ModelParams<T>) -> Vec<f64> {
        let mut out = Vec::with_capacity(model.num_params());
        let push = |out: &mut Vec<f64>, g: Option<&Tensor2<T>>, p: &Tensor2<T>| match g {
            Some(g) => out.extend(g.as_slice().iter().map(|x| x.to_f64())),
            None => out.extend(std::iter::repeat_n(0.0, p.as_slice().len())),
        };
        let lstm = |out: &mut Vec<f64>, g: Option<&LstmParams<T>>, p: &LstmParams<T>| {
            push(out, g.map(|g| &g.w_ih), &p.w_ih);
            push(out, g.map(|g| &g.w_hh), &p.w_hh);
            push(out, g.map(|g| &g.bias), &p.bias);
        };
        for p in 0..model.config.languages.len() {
            push(&mut out, self.embeddings[p].as_ref(), &model.embeddings[p]);
            let enc = &model.encoders[p];
            let genc = self.encoders[p].as_ref();
            for (l, layer) in enc.fwd.iter().enumerate() {
                lstm(&mut out, genc.map(|g| &g.fwd[l]), layer);
            }
            for (l, layer) in enc.bwd.iter().enumerate() {
                lstm(&mut out, genc.map(|g| &g.bwd[l]), layer);
            }
            let dec = &model.decoders[p];
            let gdec = self.decoders[p].as_ref();
            for (l, layer) in dec.layers.iter().enumerate() {
                lstm(&mut out, gdec.map(|g| &g.layers[l]), layer);
            }
            push(&mut out, gdec.map(|g| &g.out_w), &dec.out_w);
            push(&mut out, gdec.map(|g| &g.out_b), &dec.out_b);
        }
        push(&mut out, self.bridge.as_ref().map(|b| &b.w), &model.bridge.w);
        push(&mut out, self.bridge.as_ref().map(|b| &b.b), &model.bridge.b);
        out
    }

    /// Pairs every touched parameter tensor with its gradient.
    pub fn pair_with<'a>(&'a self, model: &'a mut ModelParams<T>) -> (Vec<&'a mut [T]>, Vec<&'a [T]>) {
        let mut params: Vec<&mut [T]> = Vec::new();
        let mut grads: Vec<&[T]> = Vec::new();
        let lstm = |ps: &'a mut [LstmParams<T>], gs: &'a [LstmParams<T>], params: &mut Vec<&'a mut [T]>, grads: &mut Vec<&'a [T]>| {
            for (p, g) in ps.iter_mut().zip(gs) {
                for ((_, pt), (_, gt)) in p.tensors_mut().into_iter().zip(g.tensors()) {
                    params.push(pt.as_mut_slice());
                    grads.push(gt.as_slice());
                }
            }
        };
        for (p, g) in model.embeddings.iter_mut().zip(&self.embeddings) {
            if let Some(g) = g {
                params.push(p.as_mut_slice());
                grads.push(g.as_slice());
            }
        }
        for (p, g) in model.encoders.iter_mut().zip(&self.encoders) {
            if let Some(g) = g {
                lstm(&mut p.fwd, &g.fwd, &mut params, &mut grads);
                lstm(&mut p.bwd, &g.bwd, &mut params, &mut grads);
            }
        }
        for (p, g) in model.decoders.iter_mut().zip(&self.decoders) {
            if let Some(g) = g {
                lstm(&mut p.layers, &g.layers, &mut params, &mut grads);
                params.push(p.out_w.as_mut_slice());
                grads.push(g.out_w.as_slice());
                params.push(p.out_b.as_mut_slice());
                grads.push(g.out_b.as_slice());
            }
        }
        if let Some(g) = &self.bridge {
            params.push(model.bridge.w.as_mut_slice());
            grads.push(g.w.as_slice());
            params.push(model.bridge.b.as_mut_slice());
            grads.push(g.b.as_slice());
        }
        (params, grads)
    }
}

/// Binary checkpoint: `MLSE`, u32 version, u64-length-prefixed JSON config,
/// u64 tensor count, then per tensor: u32-length-prefixed name, u32 rank,
/// u64 dims, little-endian f32 data (row-major).
pub fn checkpoint_bytes(model: &ModelParams<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Format(format!("serializing config: {e}")))?;
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    let tensors = model.named_tensors();
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &ModelParams<f32>, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Cursor::new(bytes);
    let trunc = |_| Error::Format("truncated checkpoint".into());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an MLSE checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let cfg = read_bytes(&mut r, cfg_len)?;
    let config: ModelConfig = serde_json::from_slice(&cfg)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut model = init_model::<f32>(config)?;
    let count = read_u64(&mut r)? as usize;
    let expected: Vec<(String, (usize, usize))> = model
        .named_tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape()))
        .collect();
    if count != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, config implies {}",
            expected.len()
        )));
    }
    for ((want_name, want_shape), t) in expected.into_iter().zip(model.tensors_mut()) {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_bytes(&mut r, name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<_>>()?;
        if name != want_name || dims != [want_shape.0, want_shape.1] {
            return Err(Error::Format(format!(
                "tensor `{name}` {dims:?} does not match expected `{want_name}` {want_shape:?}"
            )));
        }
        let raw = read_bytes(&mut r, want_shape.0 * want_shape.1 * 4)?;
        for (dst, chunk) in t.as_mut_slice().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(model)
}

fn read_bytes(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(buf)
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    Ok(u32::from_le_bytes(read_bytes(r, 4)?.try_into().unwrap()))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    Ok(u64::from_le_bytes(read_bytes(r, 8)?.try_into().unwrap()))
}
