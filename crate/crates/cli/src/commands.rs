use std::fs;
use std::io::{self, BufRead, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use log::info;
use mlse_core::bpe::learn_merges;
use mlse_core::corpus::{filter_corpus, load_parallel, split_dev, write_synthetic, SyntheticParams};
use mlse_core::seq2seq::{
    checkpoint_bytes, encode, encode_corpus, init_model, load_checkpoint, run_training, validate_schedule,
};
use mlse_core::simsearch::{similarity_error_matrix, topk_query};
use mlse_core::{BpeModel, DistanceMetric, EmbeddingMatrix, LanguageId, ModelConfig, ParallelCorpus, Sentence};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::GlobalOpts;

fn output_dir(g: &GlobalOpts) -> Result<PathBuf> {
    let dir = g.output.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn metric(g: &GlobalOpts) -> DistanceMetric {
    g.metric.map(Into::into).unwrap_or(DistanceMetric::Cosine)
}

fn file_name(path: &Path) -> Result<String> {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .with_context(|| format!("{} has no file name", path.display()))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

#[derive(Args, Debug, Serialize)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 3)]
    pub languages: usize,
    #[arg(long, default_value_t = 5500)]
    pub sentences: usize,
    #[arg(long, default_value_t = 200)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub swap_prob: f64,
    /// File stem; languages are written to `<stem>.f0`, `<stem>.f1`, ...
    #[arg(long, default_value = "synth")]
    pub stem: String,
}

pub fn gen_synth(g: &GlobalOpts, a: &GenSynthArgs) -> Result<()> {
    let dir = output_dir(g)?;
    let params = SyntheticParams {
        seed: g.seed.unwrap_or(1),
        languages: a.languages,
        sentences: a.sentences,
        vocab_size: a.vocab_size,
        swap_prob: a.swap_prob,
    };
    let corpus = mlse_core::corpus::gen_synthetic(&params)?;
    let mut manifest = Manifest::new("gen-synth", Some(params.seed), &params)?;
    for path in write_synthetic(&corpus, &params, &dir, &a.stem)? {
        manifest.output(&path)?;
    }
    manifest.write(&dir, &a.stem)?;
    info!("wrote {} sentences in {} languages to {}", corpus.len(), a.languages, dir.display());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct BpeLearnArgs {
    /// Training text, one sentence per line.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub merges: usize,
    /// Model file name inside the output directory.
    #[arg(long, default_value = "bpe.codes")]
    pub name: String,
}

pub fn bpe_learn(g: &GlobalOpts, a: &BpeLearnArgs) -> Result<()> {
    let dir = output_dir(g)?;
    let mut lines = Vec::new();
    for p in &a.inputs {
        lines.extend(read_lines(p)?);
    }
    let model = learn_merges(lines.iter().map(String::as_str), a.merges)?;
    let path = dir.join(&a.name);
    model.save(&path)?;
    let mut manifest = Manifest::new("bpe-learn", None, a)?;
    a.inputs.iter().for_each(|p| manifest.input(p));
    manifest.output(&path)?;
    manifest.write(&dir, &a.name)?;
    info!("learned {} merges, vocabulary {}", model.num_merges(), model.vocab_size());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct BpeApplyArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub bpe: PathBuf,
}

pub fn bpe_apply(g: &GlobalOpts, a: &BpeApplyArgs) -> Result<()> {
    let dir = output_dir(g)?;
    let model = BpeModel::load(&a.bpe)?;
    let mut out = String::new();
    for line in read_lines(&a.input)? {
        let s = model.apply(&line);
        out.push_str(&model.token_strings(&s.tokens)?.join(" "));
        out.push('\n');
    }
    let path = dir.join(format!("{}.bpe", file_name(&a.input)?));
    fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?;
    let mut manifest = Manifest::new("bpe-apply", None, a)?;
    manifest.input(&a.input);
    manifest.input(&a.bpe);
    manifest.output(&path)?;
    manifest.write(&dir, &file_name(&path)?)?;
    Ok(())
}

/// Tokenizes every column with its language's model.
fn tokenize(corpus: &mut ParallelCorpus, models: &[(LanguageId, BpeModel)]) {
    for (lang, col) in corpus.columns_mut() {
        let model = &models.iter().find(|(l, _)| l == lang).expect("model per language").1;
        for s in col.iter_mut() {
            s.tokens = model.apply(&s.text).tokens;
        }
    }
}

fn bpe_models(cfg: &RunConfig, train: &ParallelCorpus) -> Result<Vec<(LanguageId, BpeModel)>> {
    let learn = |langs: &[LanguageId]| -> Result<BpeModel> {
        let mut text = Vec::new();
        for l in langs {
            text.extend(train.column(l)?.iter().map(|s| s.text.as_str()));
        }
        Ok(learn_merges(text, cfg.bpe.merges)?)
    };
    if cfg.bpe.joint {
        let model = match cfg.bpe.models.values().next() {
            Some(p) => BpeModel::load(p)?,
            None => learn(&cfg.languages)?,
        };
        return Ok(cfg.languages.iter().map(|l| (l.clone(), model.clone())).collect());
    }
    cfg.languages
        .iter()
        .map(|l| {
            let model = match cfg.bpe.models.get(l) {
                Some(p) => BpeModel::load(p)?,
                None => learn(std::slice::from_ref(l))?,
            };
            Ok((l.clone(), model))
        })
        .collect()
}

pub fn train(g: &GlobalOpts) -> Result<()> {
    let Some(path) = &g.config else {
        bail!("train needs --config");
    };
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.output {
        cfg.output = out.clone();
    }
    if let Some(m) = g.metric {
        cfg.train.eval_metric = m.into();
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let exposure = validate_schedule(&schedule, &cfg.encoders())?;
    info!("schedule exposure: {exposure}");

    let files = cfg.corpus_files();
    let corpus = filter_corpus(&load_parallel(&files)?, cfg.corpus.max_words)?;
    let (mut train, mut dev) = split_dev(&corpus, cfg.corpus.dev_size, cfg.seed)?;
    info!("{} training and {} dev rows after filtering", train.len(), dev.len());
    let models = bpe_models(&cfg, &train)?;
    tokenize(&mut train, &models);
    tokenize(&mut dev, &models);

    let model_cfg = ModelConfig {
        languages: cfg.languages.clone(),
        vocab_sizes: models.iter().map(|(_, m)| m.vocab_size()).collect(),
        encoder: cfg.encoder.clone(),
        decoder: cfg.decoder.clone(),
        seed: cfg.seed,
    };
    let mut model = init_model(model_cfg)?;
    info!("{} parameters", model.num_params());
    let report = run_training(&mut model, &train, &dev, &schedule, &cfg.train)?;

    let dir = &cfg.output;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = Manifest::new("train", Some(cfg.seed), &cfg)?;
    files.iter().for_each(|(_, p)| manifest.input(p));
    for (lang, m) in &models {
        let p = dir.join(format!("bpe.{lang}"));
        m.save(&p)?;
        manifest.output(&p)?;
    }
    for p in dev.write_files(dir, "dev")? {
        manifest.output(&p)?;
    }
    let ckpt = dir.join("model.ckpt");
    fs::write(&ckpt, checkpoint_bytes(&model)?).with_context(|| format!("writing {}", ckpt.display()))?;
    manifest.output(&ckpt)?;
    let log = dir.join("train.log");
    fs::write(&log, report.log_text()).with_context(|| format!("writing {}", log.display()))?;
    manifest.output(&log)?;
    manifest.write(dir, "train")?;
    if let Some(e) = report.final_sim_error() {
        info!("final dev similarity error {:.2}%", 100.0 * e);
    }
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct EmbedArgs {
    /// Text file, one sentence per line.
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub bpe: PathBuf,
    #[arg(long)]
    pub lang: LanguageId,
    #[arg(long, default_value_t = 96)]
    pub batch_size: usize,
}

fn encode_lines(bpe: &BpeModel, lines: &[String]) -> Result<Vec<Sentence>> {
    lines
        .iter()
        .enumerate()
        .map(|(n, l)| {
            let s = bpe.apply(l);
            ensure!(!s.tokens.is_empty(), "line {} is empty", n + 1);
            Ok(s)
        })
        .collect()
}

pub fn embed(g: &GlobalOpts, a: &EmbedArgs) -> Result<()> {
    let dir = output_dir(g)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let bpe = BpeModel::load(&a.bpe)?;
    let sentences = encode_lines(&bpe, &read_lines(&a.input)?).with_context(|| a.input.display().to_string())?;
    let m = encode_corpus(&model, &sentences, &a.lang, a.batch_size)?;
    let path = dir.join(format!("{}.emb", file_name(&a.input)?));
    m.save(&path)?;
    let mut manifest = Manifest::new("embed", None, a)?;
    manifest.input(&a.input);
    manifest.input(&a.checkpoint);
    manifest.input(&a.bpe);
    manifest.output(&path)?;
    manifest.write(&dir, &file_name(&path)?)?;
    info!("embedded {} sentences into {} dimensions", m.rows(), m.dim());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct EvalSimArgs {
    /// Aligned embedding files as `LANG=PATH`.
    #[arg(required = true, num_args = 2..)]
    pub embeddings: Vec<String>,
}

pub fn eval_sim(g: &GlobalOpts, a: &EvalSimArgs) -> Result<()> {
    let mut inputs = Vec::new();
    for spec in &a.embeddings {
        let (lang, path) = spec.split_once('=').with_context(|| format!("`{spec}` is not LANG=PATH"))?;
        let lang = LanguageId::new(lang)?;
        let path = PathBuf::from(path);
        inputs.push((lang, EmbeddingMatrix::load(&path)?, path));
    }
    let metric = metric(g);
    let pairs: Vec<(LanguageId, EmbeddingMatrix)> = inputs.iter().map(|(l, m, _)| (l.clone(), m.clone())).collect();
    let report = similarity_error_matrix(&pairs, metric)?.report();
    print!("{report}");
    if g.output.is_some() {
        let dir = output_dir(g)?;
        let path = dir.join("eval-sim.tsv");
        fs::write(&path, &report).with_context(|| format!("writing {}", path.display()))?;
        let mut manifest = Manifest::new("eval-sim", None, metric.to_string())?;
        inputs.iter().for_each(|(_, _, p)| manifest.input(p));
        manifest.output(&path)?;
        manifest.write(&dir, "eval-sim")?;
    }
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct QueryArgs {
    /// Query sentences; read from stdin when absent.
    pub queries: Vec<String>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// BPE model of the query language.
    #[arg(long)]
    pub bpe: PathBuf,
    /// Language of the queries.
    #[arg(long)]
    pub lang: LanguageId,
    /// Embedding file to search.
    #[arg(long)]
    pub index: PathBuf,
    /// Text file aligned with the index rows.
    #[arg(long)]
    pub sentences: PathBuf,
}

pub fn query(g: &GlobalOpts, a: &QueryArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let bpe = BpeModel::load(&a.bpe)?;
    let index = EmbeddingMatrix::load(&a.index)?;
    let texts = read_lines(&a.sentences)?;
    ensure!(
        texts.len() == index.rows(),
        "{} has {} lines but the index has {} rows",
        a.sentences.display(),
        texts.len(),
        index.rows()
    );
    let queries = if a.queries.is_empty() {
        io::stdin().lock().lines().collect::<io::Result<Vec<_>>>()?
    } else {
        a.queries.clone()
    };
    let k = g.k.unwrap_or(5);
    let metric = metric(g);
    let mut out = io::stdout().lock();
    for q in &queries {
        let s = bpe.apply(q);
        ensure!(!s.tokens.is_empty(), "empty query");
        let e = encode(&model, &s.tokens, &a.lang)?;
        writeln!(out, "query\t{q}")?;
        for (rank, (i, sim)) in topk_query(&e.values, &index, k, metric)?.into_iter().enumerate() {
            writeln!(out, "{}\t{sim:.4}\t{i}\t{}", rank + 1, texts[i])?;
        }
    }
    Ok(())
}
