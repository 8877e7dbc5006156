//! N-way parallel corpora.
//!
//! Row `i` of every language is a translation of row `i` of every other
//! language. Every operation here preserves that alignment: rows are kept or
//! dropped as a whole, never per language.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default cap on whitespace-delimited words per sentence.
pub const DEFAULT_MAX_WORDS: usize = 50;

/// Short ASCII language code such as `en` or `f1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageId(String);

impl LanguageId {
    pub fn new(code: impl Into<String>) -> Result<Self> {
        let code = code.into();
        if code.is_empty()
            || !code
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(Error::InvalidParameter(format!(
                "language code `{code}` must be nonempty ASCII alphanumeric"
            )));
        }
        Ok(LanguageId(code))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for LanguageId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        LanguageId::new(s)
    }
}

impl From<LanguageId> for String {
    fn from(id: LanguageId) -> String {
        id.0
    }
}

impl std::str::FromStr for LanguageId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LanguageId::new(s)
    }
}

/// One sentence: its (lowercased) surface text and, once tokenized, its token ids.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Sentence {
    pub tokens: Vec<u32>,
    pub text: String,
}

impl Sentence {
    pub fn from_text(text: impl Into<String>) -> Self {
        Sentence {
            tokens: Vec::new(),
            text: text.into(),
        }
    }

    /// Number of whitespace-delimited words, falling back to the token count
    /// for token-only sentences.
    pub fn word_count(&self) -> usize {
        if self.text.is_empty() {
            self.tokens.len()
        } else {
            self.text.split_whitespace().count()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    languages: Vec<LanguageId>,
    columns: Vec<Vec<Sentence>>,
}

impl ParallelCorpus {
    pub fn new(languages: Vec<LanguageId>, columns: Vec<Vec<Sentence>>) -> Result<Self> {
        if languages.is_empty() || languages.len() != columns.len() {
            return Err(Error::InvalidParameter(format!(
                "{} languages but {} sentence columns",
                languages.len(),
                columns.len()
            )));
        }
        let unique: HashSet<_> = languages.iter().collect();
        if unique.len() != languages.len() {
            return Err(Error::InvalidParameter("duplicate language code".into()));
        }
        let expected = columns[0].len();
        for (lang, col) in languages.iter().zip(&columns) {
            if col.len() != expected {
                return Err(Error::AlignmentMismatch {
                    lang: lang.to_string(),
                    expected,
                    found: col.len(),
                });
            }
        }
        Ok(ParallelCorpus { languages, columns })
    }

    pub fn languages(&self) -> &[LanguageId] {
        &self.languages
    }

    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    /// Number of aligned rows `S`.
    pub fn len(&self) -> usize {
        self.columns[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn language_index(&self, lang: &LanguageId) -> Option<usize> {
        self.languages.iter().position(|l| l == lang)
    }

    pub fn column(&self, lang: &LanguageId) -> Result<&[Sentence]> {
        self.language_index(lang)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn column_at(&self, index: usize) -> &[Sentence] {
        &self.columns[index]
    }

    pub fn columns_mut(&mut self) -> impl Iterator<Item = (&LanguageId, &mut Vec<Sentence>)> {
        self.languages.iter().zip(self.columns.iter_mut())
    }

    /// New corpus holding the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> ParallelCorpus {
        let columns = self
            .columns
            .iter()
            .map(|col| rows.iter().map(|&i| col[i].clone()).collect())
            .collect();
        ParallelCorpus {
            languages: self.languages.clone(),
            columns,
        }
    }

    /// Writes `<dir>/<stem>.<code>` for every language, one sentence per line.
    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let mut written = Vec::with_capacity(self.languages.len());
        for (lang, col) in self.languages.iter().zip(&self.columns) {
            let path = dir.join(format!("{stem}.{lang}"));
            let mut out = String::new();
            for s in col {
                out.push_str(&s.text);
                out.push('\n');
            }
            fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Reads one UTF-8 file per language and lowercases every line.
pub fn load_parallel(paths: &[(LanguageId, PathBuf)]) -> Result<ParallelCorpus> {
    let mut languages = Vec::with_capacity(paths.len());
    let mut columns = Vec::with_capacity(paths.len());
    for (lang, path) in paths {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.is_empty() {
            return Err(Error::EmptyFile(path.clone()));
        }
        let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
        let mut col = Vec::new();
        for (n, line) in body.split(|&b| b == b'\n').enumerate() {
            let line = std::str::from_utf8(line).map_err(|_| Error::InvalidUtf8 {
                path: path.clone(),
                line: n + 1,
            })?;
            col.push(Sentence::from_text(line.to_lowercase()));
        }
        languages.push(lang.clone());
        columns.push(col);
    }
    ParallelCorpus::new(languages, columns)
}

/// Paths following the `<stem>.<code>` naming convention.
pub fn corpus_paths(dir: &Path, stem: &str, languages: &[LanguageId]) -> Vec<(LanguageId, PathBuf)> {
    languages
        .iter()
        .map(|l| (l.clone(), dir.join(format!("{stem}.{l}"))))
        .collect()
}

/// Drops every row in which some sentence is empty, longer than `max_len`
/// words, or byte-identical to a sentence of an earlier retained row in the
/// same language.
pub fn filter_corpus(c: &ParallelCorpus, max_len: usize) -> Result<ParallelCorpus> {
    if max_len == 0 {
        return Err(Error::InvalidParameter("max_len must be at least 1".into()));
    }
    let mut seen: Vec<HashSet<&str>> = vec![HashSet::new(); c.num_languages()];
    let mut keep = Vec::new();
    for i in 0..c.len() {
        let ok = c.columns.iter().enumerate().all(|(p, col)| {
            let s = &col[i];
            let n = s.word_count();
            n >= 1 && n <= max_len && !seen[p].contains(s.text.as_str())
        });
        if ok {
            for (p, col) in c.columns.iter().enumerate() {
                seen[p].insert(col[i].text.as_str());
            }
            keep.push(i);
        }
    }
    if keep.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(c.select_rows(&keep))
}

/// Disjoint random partition into `(train, dev)`; both parts keep the
/// original row order.
pub fn split_dev(
    c: &ParallelCorpus,
    dev_size: usize,
    seed: u64,
) -> Result<(ParallelCorpus, ParallelCorpus)> {
    if dev_size >= c.len() {
        return Err(Error::InvalidParameter(format!(
            "dev size {dev_size} must be smaller than the corpus ({} rows)",
            c.len()
        )));
    }
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut dev = order[..dev_size].to_vec();
    let mut train = order[dev_size..].to_vec();
    dev.sort_unstable();
    train.sort_unstable();
    Ok((c.select_rows(&train), c.select_rows(&dev)))
}

/// Parameters of the synthetic corpus generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub seed: u64,
    pub languages: usize,
    pub sentences: usize,
    pub vocab_size: usize,
    pub swap_prob: f64,
}

impl SyntheticParams {
    /// `key=value` sidecar text.
    pub fn to_meta(&self) -> String {
        format!(
            "seed={}\nL={}\nS={}\nvocab_size={}\nswap_prob={}\n",
            self.seed, self.languages, self.sentences, self.vocab_size, self.swap_prob
        )
    }

    pub fn from_meta(text: &str) -> Result<Self> {
        let mut p = SyntheticParams {
            seed: 0,
            languages: 0,
            sentences: 0,
            vocab_size: 0,
            swap_prob: 0.0,
        };
        let bad = |k: &str| Error::Format(format!("bad value for `{k}` in metadata"));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("metadata line `{line}` is not key=value")))?;
            let v = v.trim();
            match k.trim() {
                "seed" => p.seed = v.parse().map_err(|_| bad(k))?,
                "L" => p.languages = v.parse().map_err(|_| bad(k))?,
                "S" => p.sentences = v.parse().map_err(|_| bad(k))?,
                "vocab_size" => p.vocab_size = v.parse().map_err(|_| bad(k))?,
                "swap_prob" => p.swap_prob = v.parse().map_err(|_| bad(k))?,
                other => return Err(Error::Format(format!("unknown metadata key `{other}`"))),
            }
        }
        Ok(p)
    }

    pub fn language_ids(&self) -> Vec<LanguageId> {
        (0..self.languages)
            .map(|p| LanguageId(format!("f{p}")))
            .collect()
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Pronounceable surface form of a token id; languages use rotated syllable
/// inventories so the same id is spelled differently in each.
fn spell(lang: usize, mut id: usize) -> String {
    let nc = CONSONANTS.len();
    let nv = VOWELS.len();
    let base = nc * nv;
    let mut word = String::new();
    let mut syllables = 0;
    while syllables < 2 || id > 0 {
        let syl = id % base;
        id /= base;
        word.push(CONSONANTS[(syl / nv + lang * 3) % nc] as char);
        word.push(VOWELS[(syl % nv + lang) % nv] as char);
        syllables += 1;
    }
    word
}

/// Cumulative Zipf(1) distribution over latent token ranks.
fn zipf_cdf(n: usize) -> Vec<f64> {
    let total: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let mut acc = 0.0;
    (1..=n)
        .map(|k| {
            acc += 1.0 / (k as f64 * total);
            acc
        })
        .collect()
}

struct Synthetic {
    corpus: ParallelCorpus,
    #[cfg_attr(not(test), allow(dead_code))]
    latent: Vec<Vec<u32>>,
}

fn generate(params: &SyntheticParams) -> Result<Synthetic> {
    let SyntheticParams {
        seed,
        languages,
        sentences,
        vocab_size,
        swap_prob,
    } = *params;
    if languages < 2 || sentences < 1 || vocab_size < 10 || !(0.0..=1.0).contains(&swap_prob) {
        return Err(Error::InvalidParameter(format!(
            "synthetic corpus needs L >= 2, S >= 1, vocab_size >= 10, swap_prob in [0,1]; got {params:?}"
        )));
    }
    let vocab = u32::try_from(vocab_size)
        .map_err(|_| Error::InvalidParameter("vocab_size too large".into()))?;

    let cdf = zipf_cdf(vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent: Vec<Vec<u32>> = (0..sentences)
        .map(|_| {
            let len = rng.gen_range(4..=20);
            (0..len)
                .map(|_| {
                    let u: f64 = rng.gen();
                    cdf.partition_point(|&c| c <= u).min(vocab_size - 1) as u32
                })
                .collect()
        })
        .collect();

    let mut columns = Vec::with_capacity(languages);
    for p in 0..languages {
        let mut substitution: Vec<u32> = (0..vocab).collect();
        if p > 0 {
            let mut perm_rng = ChaCha8Rng::seed_from_u64(seed);
            perm_rng.set_stream(1 + p as u64);
            substitution.shuffle(&mut perm_rng);
        }
        let mut swap_rng = ChaCha8Rng::seed_from_u64(seed);
        swap_rng.set_stream(1_000 + p as u64);
        let col = latent
            .iter()
            .map(|meaning| {
                let mut tokens: Vec<u32> =
                    meaning.iter().map(|&t| substitution[t as usize]).collect();
                let mut j = 0;
                while j + 1 < tokens.len() {
                    if swap_prob > 0.0 && swap_rng.gen_bool(swap_prob) {
                        tokens.swap(j, j + 1);
                        j += 2;
                    } else {
                        j += 1;
                    }
                }
                let text = tokens
                    .iter()
                    .map(|&t| spell(p, t as usize))
                    .collect::<Vec<_>>()
                    .join(" ");
                Sentence { tokens, text }
            })
            .collect();
        columns.push(col);
    }
    Ok(Synthetic {
        corpus: ParallelCorpus::new(params.language_ids(), columns)?,
        latent,
    })
}

/// Desk-scale stand-in for a real N-way parallel corpus.
///
/// Every row draws a random "meaning" (4 to 20 latent tokens, Zipf
/// distributed like word frequencies in natural text). Language `p`
/// renders it through a fixed bijective token substitution (identity for
/// language 0) and then swaps adjacent tokens with probability `swap_prob`.
/// Sentences carry both token ids (`< vocab_size`) and a lowercase text
/// rendering with one pseudo-word per token.
pub fn gen_synthetic(params: &SyntheticParams) -> Result<ParallelCorpus> {
    generate(params).map(|s| s.corpus)
}

/// Writes the per-language files plus a `<stem>.meta` sidecar.
pub fn write_synthetic(
    corpus: &ParallelCorpus,
    params: &SyntheticParams,
    dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    let mut written = corpus.write_files(dir, stem)?;
    let meta = dir.join(format!("{stem}.meta"));
    fs::write(&meta, params.to_meta()).map_err(|e| Error::io(&meta, e))?;
    written.push(meta);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lang(s: &str) -> LanguageId {
        LanguageId::new(s).unwrap()
    }

    fn corpus_from(rows: &[&[&str]]) -> ParallelCorpus {
        let l = rows[0].len();
        let languages = (0..l).map(|p| lang(&format!("l{p}"))).collect();
        let columns = (0..l)
            .map(|p| rows.iter().map(|r| Sentence::from_text(r[p])).collect())
            .collect();
        ParallelCorpus::new(languages, columns).unwrap()
    }

    fn synth(seed: u64, l: usize, s: usize, swap: f64) -> SyntheticParams {
        SyntheticParams {
            seed,
            languages: l,
            sentences: s,
            vocab_size: 50,
            swap_prob: swap,
        }
    }

    #[test]
    fn language_id_rules() {
        assert!(LanguageId::new("").is_err());
        assert!(LanguageId::new("e n").is_err());
        assert_eq!(lang("f1").as_str(), "f1");
    }

    #[test]
    fn load_two_files_and_lowercase() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("c.en"), "Hello World\nb\nc\n").unwrap();
        fs::write(dir.path().join("c.fr"), "x\ny\nz").unwrap();
        let c = load_parallel(&corpus_paths(dir.path(), "c", &[lang("en"), lang("fr")])).unwrap();
        assert_eq!(c.num_languages(), 2);
        assert_eq!(c.len(), 3);
        assert_eq!(c.column(&lang("en")).unwrap()[0].text, "hello world");
    }

    #[test]
    fn load_rejects_mismatch_empty_and_bad_utf8() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("c.en"), "a\nb\nc\n").unwrap();
        fs::write(dir.path().join("c.fr"), "a\nb\nc\nd\n").unwrap();
        fs::write(dir.path().join("c.es"), "").unwrap();
        fs::write(dir.path().join("c.ru"), b"a\n\xff\xfe\nc\n").unwrap();
        let load = |a: &str, b: &str| load_parallel(&corpus_paths(dir.path(), "c", &[lang(a), lang(b)]));
        assert!(matches!(load("en", "fr"), Err(Error::AlignmentMismatch { .. })));
        assert!(matches!(load("en", "es"), Err(Error::EmptyFile(_))));
        assert!(matches!(load("en", "ru"), Err(Error::InvalidUtf8 { line: 2, .. })));
    }

    #[test]
    fn filter_by_length() {
        let long = vec!["w"; 60].join(" ");
        let c = corpus_from(&[&["a b c", "a b c"], &[&long, "x"], &["a b c d e", "y"]]);
        let f = filter_corpus(&c, 50).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f.column_at(0)[0].text, "a b c");
        assert_eq!(f.column_at(0)[1].text, "a b c d e");
    }

    #[test]
    fn filter_removes_duplicates_in_any_language() {
        let c = corpus_from(&[&["a", "x"], &["a", "x"], &["b", "x"], &["c", "z"]]);
        let f = filter_corpus(&c, 50).unwrap();
        let texts: Vec<_> = f.column_at(0).iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, ["a", "c"]);
    }

    #[test]
    fn filter_everything_is_an_error() {
        let c = corpus_from(&[&["a b", "c d"]]);
        assert!(matches!(filter_corpus(&c, 1), Err(Error::EmptyCorpus)));
        assert!(filter_corpus(&c, 0).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_seed_dependent() {
        let a = gen_synthetic(&synth(1, 3, 5, 0.0)).unwrap();
        let b = gen_synthetic(&synth(1, 3, 5, 0.0)).unwrap();
        let c = gen_synthetic(&synth(2, 3, 5, 0.0)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_without_swaps_is_a_bijection() {
        let s = generate(&synth(1, 3, 200, 0.0)).unwrap();
        let c = &s.corpus;
        for (row, meaning) in s.latent.iter().enumerate() {
            assert_eq!(&c.column_at(0)[row].tokens, meaning);
        }
        for p in 1..3 {
            let mut map = std::collections::HashMap::new();
            let mut inverse = std::collections::HashMap::new();
            for row in 0..c.len() {
                let src = &c.column_at(0)[row].tokens;
                let dst = &c.column_at(p)[row].tokens;
                assert_eq!(src.len(), dst.len());
                for (&a, &b) in src.iter().zip(dst) {
                    assert_eq!(*map.entry(a).or_insert(b), b);
                    assert_eq!(*inverse.entry(b).or_insert(a), a);
                }
            }
        }
    }

    #[test]
    fn synthetic_text_matches_tokens() {
        let c = gen_synthetic(&synth(3, 2, 20, 0.3)).unwrap();
        for col in 0..2 {
            for s in c.column_at(col) {
                assert_eq!(s.word_count(), s.tokens.len());
                assert!((4..=20).contains(&s.tokens.len()));
                assert!(s.tokens.iter().all(|&t| t < 50));
                assert_eq!(s.text, s.text.to_lowercase());
            }
        }
    }

    #[test]
    fn synthetic_rejects_bad_parameters() {
        assert!(gen_synthetic(&synth(1, 1, 5, 0.0)).is_err());
        assert!(gen_synthetic(&synth(1, 2, 0, 0.0)).is_err());
        assert!(gen_synthetic(&SyntheticParams { vocab_size: 9, ..synth(1, 2, 5, 0.0) }).is_err());
        assert!(gen_synthetic(&synth(1, 2, 5, 1.5)).is_err());
    }

    #[test]
    fn spelling_is_injective() {
        for lang in 0..3 {
            let words: HashSet<_> = (0..10_000).map(|id| spell(lang, id)).collect();
            assert_eq!(words.len(), 10_000);
        }
    }

    #[test]
    fn meta_round_trip() {
        let p = synth(7, 3, 11, 0.25);
        assert_eq!(SyntheticParams::from_meta(&p.to_meta()).unwrap(), p);
    }

    #[test]
    fn split_dev_partitions() {
        let c = gen_synthetic(&synth(1, 2, 10, 0.0)).unwrap();
        let (train, dev) = split_dev(&c, 2, 9).unwrap();
        assert_eq!((train.len(), dev.len()), (8, 2));
        let mut all: Vec<_> = train
            .column_at(0)
            .iter()
            .chain(dev.column_at(0))
            .map(|s| s.text.clone())
            .collect();
        all.sort();
        let mut orig: Vec<_> = c.column_at(0).iter().map(|s| s.text.clone()).collect();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(split_dev(&c, 2, 9).unwrap(), (train, dev));

        let (train, dev) = split_dev(&c, 0, 9).unwrap();
        assert_eq!(train, c);
        assert!(dev.is_empty());
        assert!(split_dev(&c, 10, 9).is_err());
    }
}
