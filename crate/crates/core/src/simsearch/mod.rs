//! Exact nearest-neighbour search over sentence embeddings and the
//! cross-lingual similarity error.

mod eval;
pub mod kernel;
mod search;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use eval::{
    average_error, similarity_error_matrix, similarity_error_matrix_naive, ErrorMatrix,
};
pub use search::{
    nearest_index, nearest_naive, pairwise_scores_blocked, pairwise_topk_blocked, topk_query,
    Neighbor, DEFAULT_BLOCK,
};

const EMB_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistanceMetric {
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "ip")]
    InnerProduct,
    #[serde(rename = "cosine")]
    Cosine,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 3] = [DistanceMetric::L2, DistanceMetric::InnerProduct, DistanceMetric::Cosine];

    /// Converts a distance into a similarity (larger is closer).
    pub fn similarity_of(self, distance: f64) -> f64 {
        match self {
            DistanceMetric::L2 | DistanceMetric::InnerProduct => -distance,
            DistanceMetric::Cosine => 1.0 - distance,
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceMetric::L2 => "l2",
            DistanceMetric::InnerProduct => "ip",
            DistanceMetric::Cosine => "cosine",
        })
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(DistanceMetric::L2),
            "ip" | "inner_product" => Ok(DistanceMetric::InnerProduct),
            "cosine" => Ok(DistanceMetric::Cosine),
            _ => Err(Error::InvalidParameter(format!("unknown metric `{s}` (expected l2, ip or cosine)"))),
        }
    }
}

pub(crate) fn norm(x: &[f32]) -> f64 {
    (kernel::dot(x, x) as f64).sqrt()
}

pub(crate) fn inv(n: f64) -> f64 {
    if n > 0.0 {
        1.0 / n
    } else {
        0.0
    }
}

/// Ranking key of a candidate (larger is closer) from its raw f32
/// reduction and the inverse of its norm.
#[inline(always)]
pub(crate) fn rank_key(metric: DistanceMetric, raw: f32, inv_nc: f64) -> f64 {
    match metric {
        DistanceMetric::L2 => -(raw as f64),
        DistanceMetric::InnerProduct => raw as f64,
        DistanceMetric::Cosine => raw as f64 * inv_nc,
    }
}

/// Distance corresponding to a ranking key, given the query norm.
pub(crate) fn key_to_distance(metric: DistanceMetric, key: f64, nq: f64) -> f64 {
    match metric {
        DistanceMetric::L2 => (-key).sqrt(),
        DistanceMetric::InnerProduct => -key,
        DistanceMetric::Cosine => {
            if nq > 0.0 {
                1.0 - key / nq
            } else {
                1.0
            }
        }
    }
}

pub(crate) fn raw(metric: DistanceMetric, a: &[f32], b: &[f32]) -> f32 {
    match metric {
        DistanceMetric::L2 => kernel::sq_dist(a, b),
        _ => kernel::dot(a, b),
    }
}

fn check_pair(x: &[f32], y: &[f32]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("vector dimensions {} and {}", x.len(), y.len())));
    }
    Ok(())
}

/// Euclidean distance, negative inner product, or `1 - cos` (1 for a zero vector).
pub fn distance(x: &[f32], y: &[f32], metric: DistanceMetric) -> Result<f64> {
    check_pair(x, y)?;
    let key = rank_key(metric, raw(metric, x, y), inv(norm(y)));
    Ok(key_to_distance(metric, key, norm(x)))
}

pub fn similarity(x: &[f32], y: &[f32], metric: DistanceMetric) -> Result<f64> {
    Ok(metric.similarity_of(distance(x, y, metric)?))
}

/// `S x d` row-major f32 embeddings with cached L2 norms.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    norms: Vec<f64>,
    inv_norms: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::ShapeMismatch("embedding dimension must be positive".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!("{} values for {rows}x{dim}", data.len())));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding row {} has a non-finite value", i / dim)));
        }
        let norms: Vec<f64> = data.chunks_exact(dim).map(norm).collect();
        let inv_norms = norms.iter().map(|&n| inv(n)).collect();
        Ok(EmbeddingMatrix { rows, dim, data, norms, inv_norms })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch("rows of unequal length".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    pub(crate) fn inv_norms(&self) -> &[f64] {
        &self.inv_norms
    }

    /// Rows scaled to unit L2 norm; zero rows stay zero.
    pub fn normalized(&self) -> EmbeddingMatrix {
        let mut data = self.data.clone();
        for (row, &n) in data.chunks_exact_mut(self.dim).zip(&self.norms) {
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
            }
        }
        EmbeddingMatrix::new(self.rows, self.dim, data).expect("normalizing keeps values finite")
    }

    pub fn select_rows(&self, idx: &[usize]) -> EmbeddingMatrix {
        let data = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        EmbeddingMatrix {
            rows: idx.len(),
            dim: self.dim,
            data,
            norms: idx.iter().map(|&i| self.norms[i]).collect(),
            inv_norms: idx.iter().map(|&i| self.inv_norms[i]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != EMB_MAGIC {
            return Err(Error::Format("not an EMB1 embedding file".into()));
        }
        let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let dim = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let expected = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(20))
            .ok_or_else(|| Error::Format("embedding header overflows".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "embedding file has {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let data = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, dim, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distances_of_small_vectors() {
        let x = [1.0, 0.0];
        let y = [0.0, 1.0];
        assert!((distance(&x, &y, DistanceMetric::L2).unwrap() - 2f64.sqrt()).abs() < 1e-7);
        assert_eq!(distance(&x, &y, DistanceMetric::InnerProduct).unwrap(), 0.0);
        assert!((distance(&x, &y, DistanceMetric::Cosine).unwrap() - 1.0).abs() < 1e-12);
        assert!(distance(&x, &x, DistanceMetric::Cosine).unwrap().abs() < 1e-12);
        assert_eq!(distance(&[3.0, 4.0], &[0.0, 0.0], DistanceMetric::L2).unwrap(), 5.0);
        assert!(distance(&x, &[1.0], DistanceMetric::L2).is_err());
    }

    #[test]
    fn cosine_with_zero_vector_is_one() {
        assert_eq!(distance(&[0.0, 0.0], &[1.0, 2.0], DistanceMetric::Cosine).unwrap(), 1.0);
    }

    #[test]
    fn cosine_ignores_scale() {
        let a = [0.3, -1.2, 2.0];
        let b = [0.6, -2.4, 4.0];
        assert!(distance(&a, &b, DistanceMetric::Cosine).unwrap().abs() < 1e-6);
    }

    #[test]
    fn metric_parse_and_display() {
        for m in DistanceMetric::ALL {
            assert_eq!(m.to_string().parse::<DistanceMetric>().unwrap(), m);
        }
        assert!("manhattan".parse::<DistanceMetric>().is_err());
    }

    #[test]
    fn emb_file_round_trip() {
        let m = EmbeddingMatrix::from_rows(&[vec![1.0, -2.5, 0.0], vec![3.0, 4.0, 1e-8]]).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(bytes.len(), 20 + 6 * 4);
        assert_eq!(EmbeddingMatrix::from_bytes(&bytes).unwrap(), m);
        assert!(EmbeddingMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(EmbeddingMatrix::from_bytes(b"EMB2").is_err());
    }

    #[test]
    fn rejects_non_finite_and_bad_shape() {
        assert!(EmbeddingMatrix::new(1, 2, vec![1.0, f32::NAN]).is_err());
        assert!(EmbeddingMatrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let m = EmbeddingMatrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap().normalized();
        assert!((m.norm(0) - 1.0).abs() < 1e-6);
        assert_eq!(m.row(1), &[0.0, 0.0]);
    }
}
