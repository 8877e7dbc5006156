//! TOML run configuration for `mlse train`. Every field has a default, so a
//! file only needs to list what differs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mlse_core::corpus::{corpus_paths, DEFAULT_MAX_WORDS};
use mlse_core::seq2seq::{DecoderConfig, TrainConfig};
use mlse_core::{EncoderConfig, LanguageId, PathSchedule, TrainingPath};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub languages: Vec<LanguageId>,
    /// Languages trained only as decoder targets; every other language must
    /// appear as a source in the schedule.
    pub target_only: Vec<LanguageId>,
    pub seed: u64,
    pub output: PathBuf,
    pub corpus: CorpusSection,
    pub bpe: BpeSection,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    /// Empty means the 1:N schedule over all languages.
    pub schedule: Vec<ScheduleEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Directory holding `<stem>.<lang>` files.
    pub dir: PathBuf,
    pub stem: String,
    /// Explicit per-language files; override `dir`/`stem`.
    pub files: BTreeMap<LanguageId, PathBuf>,
    pub max_words: usize,
    pub dev_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpeSection {
    pub merges: usize,
    /// One model shared by all languages instead of one per language.
    pub joint: bool,
    /// Pre-learned models; languages missing here are learned on the training split.
    pub models: BTreeMap<LanguageId, PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub sources: Vec<LanguageId>,
    pub targets: Vec<LanguageId>,
    pub coef: f64,
    #[serde(default)]
    pub autoencode: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            languages: Vec::new(),
            target_only: Vec::new(),
            seed: 1,
            output: PathBuf::from("run"),
            corpus: CorpusSection::default(),
            bpe: BpeSection::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            schedule: Vec::new(),
        }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            dir: PathBuf::from("."),
            stem: "train".into(),
            files: BTreeMap::new(),
            max_words: DEFAULT_MAX_WORDS,
            dev_size: 1000,
        }
    }
}

impl Default for BpeSection {
    fn default() -> Self {
        BpeSection { merges: 20_000, joint: false, models: BTreeMap::new() }
    }
}

impl RunConfig {
    /// Parses `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.corpus.dir = base.join(&cfg.corpus.dir);
        cfg.output = base.join(&cfg.output);
        for p in cfg.corpus.files.values_mut().chain(cfg.bpe.models.values_mut()) {
            *p = base.join(&*p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.len() < 2 {
            bail!("config needs at least two languages");
        }
        for lang in self.corpus.files.keys().chain(self.bpe.models.keys()).chain(&self.target_only) {
            if !self.languages.contains(lang) {
                bail!("language {lang} is not listed in `languages`");
            }
        }
        if self.corpus.dev_size == 0 {
            bail!("corpus.dev_size must be positive");
        }
        Ok(())
    }

    pub fn encoders(&self) -> Vec<LanguageId> {
        self.languages.iter().filter(|l| !self.target_only.contains(l)).cloned().collect()
    }

    pub fn corpus_files(&self) -> Vec<(LanguageId, PathBuf)> {
        corpus_paths(&self.corpus.dir, &self.corpus.stem, &self.languages)
            .into_iter()
            .map(|(l, p)| {
                let p = self.corpus.files.get(&l).cloned().unwrap_or(p);
                (l, p)
            })
            .collect()
    }

    pub fn schedule(&self) -> Result<PathSchedule> {
        if self.schedule.is_empty() {
            return Ok(PathSchedule::one_to_n(&self.languages)?);
        }
        let entries = self
            .schedule
            .iter()
            .map(|e| {
                let path = TrainingPath::with_options(e.sources.clone(), e.targets.clone(), e.autoencode)?;
                Ok((path, e.coef))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PathSchedule::new(entries)?)
    }
}
