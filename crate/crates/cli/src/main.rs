//! `mlse`: generate corpora, learn BPE, train multilingual encoders, export
//! sentence embeddings and evaluate or query them.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mlse_core::DistanceMetric;

#[derive(Parser, Debug)]
#[command(name = "mlse", version, about = "Multilingual sentence embeddings")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Caps the worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub metric: Option<Metric>,
    /// Neighbours returned by `query`.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Directory receiving artifacts and manifests.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Metric {
    L2,
    Ip,
    Cosine,
}

impl From<Metric> for DistanceMetric {
    fn from(m: Metric) -> Self {
        match m {
            Metric::L2 => DistanceMetric::L2,
            Metric::Ip => DistanceMetric::InnerProduct,
            Metric::Cosine => DistanceMetric::Cosine,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic N-way parallel corpus.
    GenSynth(commands::GenSynthArgs),
    /// Learn BPE merges from text files.
    BpeLearn(commands::BpeLearnArgs),
    /// Segment a text file into subwords.
    BpeApply(commands::BpeApplyArgs),
    /// Train a model described by `--config`.
    Train,
    /// Export the embeddings of one text file.
    Embed(commands::EmbedArgs),
    /// Similarity error matrix over aligned embedding files.
    EvalSim(commands::EvalSimArgs),
    /// Nearest sentences for query texts.
    Query(commands::QueryArgs),
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("MLSE_LOG", "info");
    env_logger::Builder::from_env(env).format_timestamp(None).init();
}

fn main() {
    init_logging();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let msg = format!("{e:#}");
        let line: Vec<&str> = msg.lines().map(str::trim).filter(|l| !l.is_empty() && *l != "|").collect();
        eprintln!("error: {}", line.join(" "));
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.global.threads {
        anyhow::ensure!(n > 0, "--threads must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let g = &cli.global;
    match cli.command {
        Command::GenSynth(a) => commands::gen_synth(g, &a),
        Command::BpeLearn(a) => commands::bpe_learn(g, &a),
        Command::BpeApply(a) => commands::bpe_apply(g, &a),
        Command::Train => commands::train(g),
        Command::Embed(a) => commands::embed(g, &a),
        Command::EvalSim(a) => commands::eval_sim(g, &a),
        Command::Query(a) => commands::query(g, &a),
    }
}
