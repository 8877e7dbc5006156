//! Byte-pair encoding over whitespace-delimited words.
//!
//! Every word gets an end-of-word marker appended to its last character
//! before merges are learned or applied, so detokenization is unambiguous:
//! a symbol ending in [`EOW`] closes a word, any other symbol continues it.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::Sentence;
use crate::{Error, Result};

pub const EOW: &str = "</w>";
/// Unknown character inside a word.
pub const UNK: u32 = 0;
/// Unknown character closing a word.
pub const UNK_EOW: u32 = 1;
const RESERVED: [&str; 2] = ["<unk>", "<unk></w>"];
/// Desk-scale merge count; real corpora use 20000.
pub const DEFAULT_NUM_MERGES: usize = 200;

#[derive(Clone, Debug)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    alphabet: Vec<String>,
    symbols: Vec<String>,
    vocab: HashMap<String, u32>,
    // (left id, right id) -> (rank, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl PartialEq for BpeModel {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges && self.alphabet == other.alphabet
    }
}

impl BpeModel {
    /// Rebuilds the vocabulary from the initial symbols and the merge list.
    pub fn from_parts(mut alphabet: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        alphabet.sort();
        alphabet.dedup();
        let mut symbols = Vec::new();
        let mut vocab = HashMap::new();
        for s in RESERVED.iter().map(|s| s.to_string()).chain(alphabet.iter().cloned()) {
            intern(&mut vocab, &mut symbols, s);
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let (Some(&li), Some(&ri)) = (vocab.get(l), vocab.get(r)) else {
                return Err(Error::Format(format!("merge `{l} {r}` uses an unknown symbol")));
            };
            if l.ends_with(EOW) {
                return Err(Error::Format(format!("merge `{l} {r}` continues a closed word")));
            }
            let merged = intern(&mut vocab, &mut symbols, format!("{l}{r}"));
            if ranks.insert((li, ri), (rank, merged)).is_some() {
                return Err(Error::Format(format!("duplicate merge `{l} {r}`")));
            }
        }
        Ok(BpeModel {
            merges,
            alphabet,
            symbols,
            vocab,
            ranks,
        })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    /// Number of token ids, including the two reserved unknown ids.
    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn token_id(&self, symbol: &str) -> Option<u32> {
        self.vocab.get(symbol).copied()
    }

    /// Splits every word into characters, then applies merges in learned
    /// order. Characters never seen while learning become [`UNK`] or
    /// [`UNK_EOW`].
    pub fn apply(&self, text: &str) -> Sentence {
        let text = text.to_lowercase();
        let mut tokens = Vec::new();
        for word in text.split_whitespace() {
            self.encode_word(word, &mut tokens);
        }
        Sentence { tokens, text }
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let n = word.chars().count();
        let mut buf = String::new();
        let mut syms: Vec<u32> = word
            .chars()
            .enumerate()
            .map(|(k, ch)| {
                buf.clear();
                buf.push(ch);
                let last = k + 1 == n;
                if last {
                    buf.push_str(EOW);
                }
                match self.vocab.get(buf.as_str()) {
                    Some(&id) => id,
                    None if last => UNK_EOW,
                    None => UNK,
                }
            })
            .collect();
        // Lowest-rank-first is equivalent to applying merges in order: a merge
        // can only create pairs whose rank is higher than its own.
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, m)| (rank, w[0], w[1], m)))
                .min_by_key(|&(rank, ..)| rank);
            let Some((_, l, r, merged)) = best else { break };
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            syms = next;
        }
        out.extend(syms);
    }

    /// Subword strings for a token sequence, e.g. `["he", "llo</w>"]`.
    pub fn token_strings(&self, tokens: &[u32]) -> Result<Vec<&str>> {
        tokens
            .iter()
            .map(|&t| {
                self.symbol(t)
                    .ok_or_else(|| Error::MalformedTokens(format!("token id {t} out of range")))
            })
            .collect()
    }

    /// Inverse of [`BpeModel::apply`]; unknown tokens come back as `<unk>`.
    pub fn restore(&self, tokens: &[u32]) -> Result<String> {
        let mut text = String::new();
        let mut open = false;
        for (pos, sym) in self.token_strings(tokens)?.into_iter().enumerate() {
            if !open && !text.is_empty() {
                text.push(' ');
            }
            match sym.strip_suffix(EOW) {
                Some(stem) => {
                    text.push_str(stem);
                    open = false;
                }
                None => {
                    text.push_str(sym);
                    open = true;
                }
            }
            if pos + 1 == tokens.len() && open {
                return Err(Error::MalformedTokens(format!(
                    "sequence ends inside a word (continuation symbol `{sym}`)"
                )));
            }
        }
        Ok(text)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("bpe v1 {}\n", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        let _ = writeln!(s, "alphabet {}", self.alphabet.len());
        for a in &self.alphabet {
            let _ = writeln!(s, "{a}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let n: usize = header
            .strip_prefix("bpe v1 ")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("bad BPE header `{header}`")))?;
        let mut merges = Vec::with_capacity(n);
        for _ in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format("truncated merge list".into()))?;
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => return Err(Error::Format(format!("bad merge line `{line}`"))),
            }
        }
        let mut alphabet = Vec::new();
        if let Some(line) = lines.next() {
            let count: usize = line
                .strip_prefix("alphabet ")
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("bad alphabet header `{line}`")))?;
            for _ in 0..count {
                let sym = lines
                    .next()
                    .ok_or_else(|| Error::Format("truncated alphabet".into()))?;
                alphabet.push(sym.to_string());
            }
        }
        BpeModel::from_parts(alphabet, merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        BpeModel::from_text(&text)
    }
}

fn intern(vocab: &mut HashMap<String, u32>, symbols: &mut Vec<String>, s: String) -> u32 {
    if let Some(&id) = vocab.get(&s) {
        return id;
    }
    let id = symbols.len() as u32;
    vocab.insert(s.clone(), id);
    symbols.push(s);
    id
}

/// Greedy frequency-based merge learning.
///
/// Repeatedly merges the most frequent adjacent symbol pair (ties go to the
/// lexicographically smallest `(left, right)`) until `num_merges` merges are
/// learned or no pair occurs at least twice.
pub fn learn_merges<'a, I>(sentences: I, num_merges: usize) -> Result<BpeModel>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut word_freq: HashMap<String, u64> = HashMap::new();
    let mut any = false;
    for s in sentences {
        any = true;
        for w in s.to_lowercase().split_whitespace() {
            *word_freq.entry(w.to_string()).or_default() += 1;
        }
    }
    if !any || word_freq.is_empty() {
        return Err(Error::InvalidParameter("cannot learn BPE from an empty corpus".into()));
    }
    let mut words: Vec<(String, u64)> = word_freq.into_iter().collect();
    words.sort();

    let mut symbols: Vec<String> = Vec::new();
    let mut ids: HashMap<String, u32> = HashMap::new();

    let mut seqs: Vec<Vec<u32>> = Vec::with_capacity(words.len());
    for (w, _) in &words {
        let n = w.chars().count();
        let seq = w
            .chars()
            .enumerate()
            .map(|(k, ch)| {
                let mut s = ch.to_string();
                if k + 1 == n {
                    s.push_str(EOW);
                }
                intern(&mut ids, &mut symbols, s)
            })
            .collect();
        seqs.push(seq);
    }
    let alphabet = symbols.clone();

    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, seq) in seqs.iter().enumerate() {
        let f = words[wi].1 as i64;
        for p in seq.windows(2) {
            *counts.entry((p[0], p[1])).or_default() += f;
            where_.entry((p[0], p[1])).or_default().insert(wi);
        }
    }

    let mut merges = Vec::with_capacity(num_merges);
    while merges.len() < num_merges {
        let mut best: Option<((u32, u32), i64)> = None;
        for (&pair, &c) in &counts {
            if c < 2 {
                continue;
            }
            best = match best {
                None => Some((pair, c)),
                Some((bp, bc)) => {
                    let better = c > bc
                        || (c == bc
                            && (&symbols[pair.0 as usize], &symbols[pair.1 as usize])
                                < (&symbols[bp.0 as usize], &symbols[bp.1 as usize]));
                    if better {
                        Some((pair, c))
                    } else {
                        Some((bp, bc))
                    }
                }
            };
        }
        let Some(((l, r), _)) = best else { break };
        let joined = format!("{}{}", symbols[l as usize], symbols[r as usize]);
        let merged = intern(&mut ids, &mut symbols, joined);
        merges.push((symbols[l as usize].clone(), symbols[r as usize].clone()));

        let mut affected: Vec<usize> = where_
            .remove(&(l, r))
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        for wi in affected {
            let f = words[wi].1 as i64;
            let seq = &mut seqs[wi];
            for p in seq.windows(2) {
                let key = (p[0], p[1]);
                if let Some(c) = counts.get_mut(&key) {
                    *c -= f;
                }
            }
            let mut next = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == l && seq[i + 1] == r {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(seq[i]);
                    i += 1;
                }
            }
            *seq = next;
            for p in seq.windows(2) {
                let key = (p[0], p[1]);
                *counts.entry(key).or_default() += f;
                where_.entry(key).or_default().insert(wi);
            }
        }
        counts.retain(|_, c| *c > 0);
    }

    BpeModel::from_parts(alphabet, merges)
}

/// Convenience wrapper matching [`BpeModel::apply`].
pub fn apply_merges(sentence_text: &str, model: &BpeModel) -> Sentence {
    model.apply(sentence_text)
}

/// Convenience wrapper matching [`BpeModel::restore`].
pub fn restore_text(tokens: &[u32], model: &BpeModel) -> Result<String> {
    model.restore(tokens)
}
