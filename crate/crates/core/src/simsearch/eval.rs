use std::fmt::Write;

use super::search::{nearest_naive, pairwise_scores_blocked, DEFAULT_BLOCK};
use super::{DistanceMetric, EmbeddingMatrix};
use crate::corpus::LanguageId;
use crate::{Error, Result};

/// Off-diagonal similarity error counts between every ordered pair of languages.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMatrix {
    languages: Vec<LanguageId>,
    sentences: usize,
    /// `errors[p * L + q]`: sentences of `p` whose nearest `q` embedding is not their translation.
    errors: Vec<usize>,
}

impl ErrorMatrix {
    pub fn languages(&self) -> &[LanguageId] {
        &self.languages
    }

    pub fn sentences(&self) -> usize {
        self.sentences
    }

    pub fn count(&self, p: usize, q: usize) -> usize {
        self.errors[p * self.languages.len() + q]
    }

    /// Error rate in [0, 1]; `None` on the diagonal.
    pub fn rate(&self, p: usize, q: usize) -> Option<f64> {
        (p != q).then(|| self.count(p, q) as f64 / self.sentences as f64)
    }

    fn index(&self, l: &LanguageId) -> Result<usize> {
        self.languages
            .iter()
            .position(|x| x == l)
            .ok_or_else(|| Error::UnknownLanguage(l.to_string()))
    }

    fn mean_over(&self, pairs: impl Iterator<Item = (usize, usize)>) -> f64 {
        let (sum, n) = pairs.fold((0.0, 0usize), |(s, n), (p, q)| (s + self.rate(p, q).unwrap(), n + 1));
        sum / n as f64
    }

    /// Grid of percentages with an `All` row and column holding the mean
    /// over the off-diagonal entries of each column, row, and the whole grid.
    pub fn report(&self) -> String {
        let l = self.languages.len();
        let mut s = String::new();
        for lang in &self.languages {
            write!(s, "\t{lang}").unwrap();
        }
        s.push_str("\tAll\n");
        for p in 0..l {
            write!(s, "{}", self.languages[p]).unwrap();
            for q in 0..l {
                match self.rate(p, q) {
                    Some(r) => write!(s, "\t{:.2}", 100.0 * r).unwrap(),
                    None => s.push_str("\t--"),
                }
            }
            let row = self.mean_over((0..l).filter(|&q| q != p).map(|q| (p, q)));
            writeln!(s, "\t{:.2}", 100.0 * row).unwrap();
        }
        s.push_str("All");
        for q in 0..l {
            let col = self.mean_over((0..l).filter(|&p| p != q).map(|p| (p, q)));
            write!(s, "\t{:.2}", 100.0 * col).unwrap();
        }
        let all = self.mean_over((0..l).flat_map(|p| (0..l).filter(move |&q| q != p).map(move |q| (p, q))));
        writeln!(s, "\t{:.2}", 100.0 * all).unwrap();
        s
    }
}

fn check_inputs(embeddings: &[(LanguageId, EmbeddingMatrix)]) -> Result<usize> {
    if embeddings.len() < 2 {
        return Err(Error::InvalidParameter("similarity error needs at least two languages".into()));
    }
    let (s, d) = (embeddings[0].1.rows(), embeddings[0].1.dim());
    if s == 0 {
        return Err(Error::EmptyCorpus);
    }
    for (l, m) in embeddings {
        if m.rows() != s || m.dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "embeddings for {l} are {}x{}, expected {s}x{d}",
                m.rows(),
                m.dim()
            )));
        }
    }
    Ok(s)
}

fn build(
    embeddings: &[(LanguageId, EmbeddingMatrix)],
    nearest: impl Fn(&EmbeddingMatrix, &EmbeddingMatrix) -> Result<Vec<usize>>,
) -> Result<ErrorMatrix> {
    let s = check_inputs(embeddings)?;
    let l = embeddings.len();
    let mut errors = vec![0; l * l];
    for p in 0..l {
        for q in 0..l {
            if p != q {
                let nn = nearest(&embeddings[p].1, &embeddings[q].1)?;
                errors[p * l + q] = nn.iter().enumerate().filter(|&(i, &j)| i != j).count();
            }
        }
    }
    Ok(ErrorMatrix {
        languages: embeddings.iter().map(|(l, _)| l.clone()).collect(),
        sentences: s,
        errors,
    })
}

/// Row `i` of every matrix must embed the same sentence. For each ordered
/// pair `(p, q)` counts rows of `p` whose nearest row in `q` is not `i`.
pub fn similarity_error_matrix(
    embeddings: &[(LanguageId, EmbeddingMatrix)],
    metric: DistanceMetric,
) -> Result<ErrorMatrix> {
    build(embeddings, |a, b| {
        Ok(pairwise_scores_blocked(a, b, metric, DEFAULT_BLOCK)?
            .into_iter()
            .map(|n| n.index)
            .collect())
    })
}

/// Same as [`similarity_error_matrix`] with the plain double loop.
pub fn similarity_error_matrix_naive(
    embeddings: &[(LanguageId, EmbeddingMatrix)],
    metric: DistanceMetric,
) -> Result<ErrorMatrix> {
    build(embeddings, |a, b| nearest_naive(a, b, metric))
}

/// Mean error rate over all ordered pairs `p != q` drawn from `subset`.
pub fn average_error(e: &ErrorMatrix, subset: &[LanguageId]) -> Result<f64> {
    let idx: Vec<usize> = subset.iter().map(|l| e.index(l)).collect::<Result<_>>()?;
    if idx.len() < 2 {
        return Err(Error::InvalidParameter("average error needs at least two languages".into()));
    }
    Ok(e.mean_over(
        idx.iter()
            .flat_map(|&p| idx.iter().filter(move |&&q| q != p).map(move |&q| (p, q))),
    ))
}
