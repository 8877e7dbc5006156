use std::fmt::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embed::{average_rows, encode_corpus};
use super::model::{ModelGrads, ModelParams};
use super::network::{decoder_pass, encoder_backward, encoder_forward, DecodeOutput};
use super::schedule::{sample_path, PathSchedule, TrainingPath};
use crate::corpus::{LanguageId, ParallelCorpus, Sentence};
use crate::nn::{clip_and_sgd_step, Real, SgdStats, Tensor2, DEFAULT_CLIP_NORM, DEFAULT_LR};
use crate::simsearch::{average_error, similarity_error_matrix, DistanceMetric};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub min_lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub dropout: bool,
    /// Compute the dev similarity error after every epoch (monitoring only).
    pub eval_similarity: bool,
    pub eval_metric: DistanceMetric,
    /// Mini-batches per length-bucketing pool.
    pub bucket_pool: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 96,
            lr: DEFAULT_LR,
            lr_decay: 0.5,
            min_lr: 1e-4,
            clip_norm: DEFAULT_CLIP_NORM,
            seed: 1,
            dropout: true,
            eval_similarity: true,
            eval_metric: DistanceMetric::Cosine,
            bucket_pool: 20,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.batch_size == 0 || self.bucket_pool == 0 {
            return bad("batch size and bucket pool must be positive");
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay < 1.0) || !(self.clip_norm > 0.0) {
            return bad("lr, lr_decay in (0, 1) and clip_norm must be positive");
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `decay` whenever the monitored dev
/// perplexity does not beat the best value seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub decay: f64,
    pub min_lr: f64,
    best: f64,
}

impl LrSchedule {
    pub fn new(lr: f64, decay: f64, min_lr: f64) -> Self {
        LrSchedule { lr, decay, min_lr, best: f64::INFINITY }
    }

    /// Records one epoch's dev perplexity; returns `false` once the rate has
    /// fallen below `min_lr`.
    pub fn observe(&mut self, dev_ppl: f64) -> bool {
        if dev_ppl < self.best {
            self.best = dev_ppl;
        } else {
            self.lr *= self.decay;
        }
        self.lr >= self.min_lr
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    pub lr: f64,
    pub clip_norm: f64,
    pub dropout: bool,
}

pub struct PathLoss<T> {
    /// Mean over targets of each target's mean token NLL.
    pub loss: f64,
    pub per_target: Vec<f64>,
    pub grads: Option<ModelGrads<T>>,
}

fn batch_tokens<'a>(corpus: &'a ParallelCorpus, lang: &LanguageId, rows: &[usize]) -> Result<Vec<&'a [u32]>> {
    let col: &[Sentence] = corpus
        .column(lang)
        .map_err(|_| Error::InvalidParameter(format!("batch has no column for language {lang}")))?;
    rows.iter()
        .map(|&r| {
            col.get(r)
                .map(|s| s.tokens.as_slice())
                .ok_or_else(|| Error::InvalidParameter(format!("row {r} out of range")))
        })
        .collect()
}

/// Forward (and optionally backward) pass of one path over the given rows.
pub fn path_loss<T: Real>(
    model: &ModelParams<T>,
    path: &TrainingPath,
    corpus: &ParallelCorpus,
    rows: &[usize],
    mut rng: Option<&mut ChaCha8Rng>,
    want_grads: bool,
) -> Result<PathLoss<T>> {
    if rows.is_empty() {
        return Err(Error::InvalidParameter("empty mini-batch".into()));
    }
    let cfg = &model.config;
    let mut reprs = Vec::with_capacity(path.arity());
    let mut tapes = Vec::with_capacity(path.arity());
    for l in path.sources() {
        let p = cfg.language_index(l)?;
        let toks = batch_tokens(corpus, l, rows)?;
        let (r, tape) = encoder_forward(model, p, &toks, rng.as_deref_mut())?;
        reprs.push(r);
        tapes.push(tape);
    }
    let emb = average_rows(&reprs);
    let n_targets = path.targets().len();
    let jobs: Vec<(usize, Vec<&[u32]>, Option<u64>)> = path
        .targets()
        .iter()
        .map(|l| {
            let seed = rng.as_deref_mut().map(|r| r.gen::<u64>());
            Ok((cfg.language_index(l)?, batch_tokens(corpus, l, rows)?, seed))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / n_targets as f64;
    let results: Vec<Result<(DecodeOutput<T>, Option<ModelGrads<T>>)>> = jobs
        .par_iter()
        .map(|(q, toks, seed)| {
            let mut drng = seed.map(ChaCha8Rng::seed_from_u64);
            let mut g = want_grads.then(|| ModelGrads::new(model));
            let out = decoder_pass(model, *q, &emb, toks, drng.as_mut(), g.as_mut().map(|g| (g, scale)))?;
            Ok((out, g))
        })
        .collect();
    let mut per_target = Vec::with_capacity(n_targets);
    let mut grads = want_grads.then(|| ModelGrads::new(model));
    let mut d_emb: Option<Tensor2<T>> = None;
    for r in results {
        let (out, g) = r?;
        per_target.push(out.mean_nll());
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            acc.merge(g);
        }
        if let Some(d) = out.d_embedding {
            match d_emb.as_mut() {
                Some(acc) => acc.add_assign(&d),
                None => d_emb = Some(d),
            }
        }
    }
    let loss = per_target.iter().sum::<f64>() / n_targets as f64;
    if let (Some(g), Some(mut d)) = (grads.as_mut(), d_emb) {
        d.scale(T::from_f64(1.0 / path.arity() as f64));
        for tape in &tapes {
            encoder_backward(model, tape, &d, g)?;
        }
    }
    Ok(PathLoss { loss, per_target, grads })
}

pub struct StepOutput {
    pub loss: f64,
    pub per_target: Vec<f64>,
    pub stats: SgdStats,
}

/// One clipped SGD step on `path` using the aligned `rows` of `corpus`.
/// Only the encoders, decoders and embedding tables on the path and the
/// shared bridge are modified.
pub fn train_minibatch<T: Real>(
    model: &mut ModelParams<T>,
    path: &TrainingPath,
    corpus: &ParallelCorpus,
    rows: &[usize],
    opts: &StepOptions,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    let out = path_loss(model, path, corpus, rows, opts.dropout.then_some(rng), true)?;
    if !out.loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {} on path {path}", out.loss)));
    }
    let grads = out.grads.expect("gradients requested");
    let (mut params, gs) = grads.pair_with(model);
    let stats = clip_and_sgd_step(&mut params, &gs, opts.lr, opts.clip_norm)?;
    Ok(StepOutput { loss: out.loss, per_target: out.per_target, stats })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_ppl: Vec<(LanguageId, f64)>,
    pub dev_sim_error: Option<f64>,
}

impl EpochLog {
    pub fn mean_dev_ppl(&self) -> f64 {
        self.dev_ppl.iter().map(|(_, p)| p).sum::<f64>() / self.dev_ppl.len().max(1) as f64
    }

    /// Tab-separated: epoch, lr, train loss, one perplexity per decoder, similarity error.
    pub fn line(&self) -> String {
        let mut s = format!("{}\t{}\t{:.6}", self.epoch, self.lr, self.train_loss);
        for (_, p) in &self.dev_ppl {
            write!(s, "\t{p:.4}").unwrap();
        }
        match self.dev_sim_error {
            Some(e) => write!(s, "\t{e:.6}").unwrap(),
            None => s.push_str("\t-"),
        }
        s
    }

    pub fn header(&self) -> String {
        let mut s = String::from("#epoch\tlr\ttrain_loss");
        for (l, _) in &self.dev_ppl {
            write!(s, "\tppl_{l}").unwrap();
        }
        s.push_str("\tsim_error");
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn log_text(&self) -> String {
        let mut s = String::new();
        if let Some(first) = self.epochs.first() {
            writeln!(s, "{}", first.header()).unwrap();
        }
        for e in &self.epochs {
            writeln!(s, "{}", e.line()).unwrap();
        }
        s
    }

    pub fn final_sim_error(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.dev_sim_error)
    }
}

/// Length-bucketed mini-batches: shuffle, sort pools of `pool` batches by
/// longest sentence, cut into batches, shuffle batch order.
fn make_batches(corpus: &ParallelCorpus, langs: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut rows: Vec<usize> = (0..corpus.len()).collect();
    rows.shuffle(rng);
    let longest = |r: usize| langs.iter().map(|&l| corpus.column_at(l)[r].tokens.len()).max().unwrap_or(0);
    let mut batches = Vec::new();
    for pool in rows.chunks(cfg.batch_size * cfg.bucket_pool) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&r| longest(r));
        batches.extend(pool.chunks(cfg.batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Per-decoder dev perplexity over every path of the schedule.
pub fn dev_perplexity(
    model: &ModelParams<f32>,
    dev: &ParallelCorpus,
    schedule: &PathSchedule,
    batch_size: usize,
) -> Result<Vec<(LanguageId, f64)>> {
    let targets: Vec<LanguageId> = schedule.target_languages().into_iter().collect();
    let mut nll = vec![0.0; targets.len()];
    let mut tokens = vec![0usize; targets.len()];
    let all: Vec<usize> = (0..dev.len()).collect();
    for (path, _) in schedule.entries() {
        for rows in all.chunks(batch_size) {
            let mut reprs = Vec::new();
            for l in path.sources() {
                let p = model.config.language_index(l)?;
                let toks = batch_tokens(dev, l, rows)?;
                reprs.push(encoder_forward(model, p, &toks, None::<&mut ChaCha8Rng>)?.0);
            }
            let emb = average_rows(&reprs);
            for l in path.targets() {
                let q = model.config.language_index(l)?;
                let toks = batch_tokens(dev, l, rows)?;
                let out = decoder_pass(model, q, &emb, &toks, None::<&mut ChaCha8Rng>, None)?;
                let t = targets.iter().position(|x| x == l).expect("target listed");
                nll[t] += out.nll_sum;
                tokens[t] += out.tokens;
            }
        }
    }
    Ok(targets
        .into_iter()
        .enumerate()
        .map(|(t, l)| (l, (nll[t] / tokens[t].max(1) as f64).exp()))
        .collect())
}

/// Average similarity error over all ordered pairs of `languages` on `dev`.
pub fn dev_similarity_error(
    model: &ModelParams<f32>,
    dev: &ParallelCorpus,
    languages: &[LanguageId],
    metric: DistanceMetric,
    batch_size: usize,
) -> Result<f64> {
    let embeddings = languages
        .iter()
        .map(|l| Ok((l.clone(), encode_corpus(model, dev.column(l)?, l, batch_size)?)))
        .collect::<Result<Vec<_>>>()?;
    let e = similarity_error_matrix(&embeddings, metric)?;
    average_error(&e, languages)
}

pub fn run_training(
    model: &mut ModelParams<f32>,
    train: &ParallelCorpus,
    dev: &ParallelCorpus,
    schedule: &PathSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    run_training_with(model, train, dev, schedule, cfg, |_| {})
}

/// Full training loop; `on_epoch` sees each epoch's log as soon as it is ready.
pub fn run_training_with(
    model: &mut ModelParams<f32>,
    train: &ParallelCorpus,
    dev: &ParallelCorpus,
    schedule: &PathSchedule,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut used = Vec::new();
    for (path, _) in schedule.entries() {
        for l in path.sources().iter().chain(path.targets()) {
            model.config.language_index(l)?;
            let i = train.language_index(l).ok_or_else(|| {
                Error::InvalidParameter(format!("training corpus has no column for language {l}"))
            })?;
            dev.column(l)?;
            if !used.contains(&i) {
                used.push(i);
            }
        }
    }
    let encoders: Vec<LanguageId> = schedule.source_languages().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lr = LrSchedule::new(cfg.lr, cfg.lr_decay, cfg.min_lr);
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let opts = StepOptions { lr: lr.lr, clip_norm: cfg.clip_norm, dropout: cfg.dropout };
        let batches = make_batches(train, &used, cfg, &mut rng);
        let mut loss_sum = 0.0;
        for (step, rows) in batches.iter().enumerate() {
            let path = sample_path(schedule, &mut rng);
            let out = train_minibatch(model, path, train, rows, &opts, &mut rng).map_err(|e| match e {
                Error::NonFinite(detail) => Error::Diverged { epoch, step, detail },
                other => other,
            })?;
            loss_sum += out.loss;
            log::debug!("epoch {epoch} step {step} path {path} loss {:.4} |g| {:.3}", out.loss, out.stats.grad_norm);
        }
        let dev_ppl = dev_perplexity(model, dev, schedule, cfg.batch_size)?;
        if dev_ppl.iter().any(|(_, p)| !p.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                step: batches.len(),
                detail: "non-finite dev perplexity".into(),
            });
        }
        let dev_sim_error = if cfg.eval_similarity && encoders.len() >= 2 {
            Some(dev_similarity_error(model, dev, &encoders, cfg.eval_metric, cfg.batch_size)?)
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            lr: lr.lr,
            train_loss: loss_sum / batches.len() as f64,
            dev_ppl,
            dev_sim_error,
        };
        log::info!("{} ({:.1}s)", log.line(), started.elapsed().as_secs_f64());
        on_epoch(&log);
        let keep_going = lr.observe(log.mean_dev_ppl());
        epochs.push(log);
        if !keep_going {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    Ok(TrainReport { epochs, stopped_early })
}
