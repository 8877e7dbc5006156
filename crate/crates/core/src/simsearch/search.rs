use rayon::prelude::*;

use super::kernel::{tile, Dot, Panels, Reduction, SqDiff, PANEL, TILE_ROWS};
use super::{key_to_distance, norm, rank_key, raw, DistanceMetric, EmbeddingMatrix};
use crate::{Error, Result};

/// Candidate rows per block.
pub const DEFAULT_BLOCK: usize = 256;
const QUERY_BLOCK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

fn check_dims(q: usize, m: &EmbeddingMatrix) -> Result<()> {
    if q != m.dim() {
        return Err(Error::ShapeMismatch(format!("query dimension {q}, matrix dimension {}", m.dim())));
    }
    if m.rows() == 0 {
        return Err(Error::ShapeMismatch("empty candidate matrix".into()));
    }
    Ok(())
}

/// Index of the closest row of `m`; ties go to the lowest index.
pub fn nearest_index(query: &[f32], m: &EmbeddingMatrix, metric: DistanceMetric) -> Result<usize> {
    check_dims(query.len(), m)?;
    let inv = m.inv_norms();
    let mut best = (f64::NEG_INFINITY, 0);
    for j in 0..m.rows() {
        let key = rank_key(metric, raw(metric, query, m.row(j)), inv[j]);
        if key > best.0 {
            best = (key, j);
        }
    }
    Ok(best.1)
}

/// Reference double loop: nearest row of `m` for every row of `q`.
pub fn nearest_naive(q: &EmbeddingMatrix, m: &EmbeddingMatrix, metric: DistanceMetric) -> Result<Vec<usize>> {
    (0..q.rows()).map(|i| nearest_index(q.row(i), m, metric)).collect()
}

/// Nearest neighbour of every row of `q` among the rows of `m`.
///
/// Candidates are packed into SIMD panels and visited in blocks of
/// `block_size` rows; each block is scanned by register tiles of six
/// queries. Query blocks run in parallel. Results equal [`nearest_index`]
/// bit for bit.
pub fn pairwise_scores_blocked(
    q: &EmbeddingMatrix,
    m: &EmbeddingMatrix,
    metric: DistanceMetric,
    block_size: usize,
) -> Result<Vec<Neighbor>> {
    check_dims(q.dim(), m)?;
    if block_size == 0 {
        return Err(Error::InvalidParameter("block size must be positive".into()));
    }
    let panels = Panels::pack(m.as_slice(), m.rows(), m.dim());
    let block_panels = block_size.div_ceil(2 * PANEL) * 2;
    let mut best = vec![(f64::NEG_INFINITY, 0usize); q.rows()];
    best.par_chunks_mut(QUERY_BLOCK).enumerate().for_each(|(bi, chunk)| {
        let scan = Scan { q, m, panels: &panels, metric, start: bi * QUERY_BLOCK, block_panels };
        match metric {
            DistanceMetric::L2 => scan.run::<SqDiff>(chunk),
            _ => scan.run::<Dot>(chunk),
        }
    });
    Ok(best
        .into_iter()
        .enumerate()
        .map(|(i, (key, index))| Neighbor { index, distance: key_to_distance(metric, key, q.norm(i)) })
        .collect())
}

struct Scan<'a> {
    q: &'a EmbeddingMatrix,
    m: &'a EmbeddingMatrix,
    panels: &'a Panels,
    metric: DistanceMetric,
    start: usize,
    block_panels: usize,
}

impl Scan<'_> {
    fn run<K: Reduction>(&self, best: &mut [(f64, usize)]) {
        let n = best.len();
        for b0 in (0..self.panels.len()).step_by(self.block_panels) {
            let b1 = (b0 + self.block_panels).min(self.panels.len());
            let mut i = 0;
            while i + TILE_ROWS <= n {
                self.rows::<K, TILE_ROWS>(best, i, b0, b1);
                i += TILE_ROWS;
            }
            match n - i {
                1 => self.rows::<K, 1>(best, i, b0, b1),
                2 => self.rows::<K, 2>(best, i, b0, b1),
                3 => self.rows::<K, 3>(best, i, b0, b1),
                4 => self.rows::<K, 4>(best, i, b0, b1),
                5 => self.rows::<K, 5>(best, i, b0, b1),
                _ => {}
            }
        }
    }

    #[inline(always)]
    fn rows<K: Reduction, const R: usize>(&self, best: &mut [(f64, usize)], i: usize, b0: usize, b1: usize) {
        let qs: [&[f32]; R] = std::array::from_fn(|r| self.q.row(self.start + i + r));
        let inv = self.m.inv_norms();
        let mut out = [[0.0f32; 2 * PANEL]; R];
        for p in (b0..b1).step_by(2) {
            tile::<K, R>(qs, self.panels, p, &mut out);
            let first = p * PANEL;
            let width = (self.m.rows() - first).min(2 * PANEL);
            for (r, row) in out.iter().enumerate() {
                let slot = &mut best[i + r];
                for (j, &v) in row[..width].iter().enumerate() {
                    let key = rank_key(self.metric, v, inv[first + j]);
                    if key > slot.0 {
                        *slot = (key, first + j);
                    }
                }
            }
        }
    }
}

/// `k` nearest rows of `m` for every row of `q`, closest first, ties by index.
pub fn pairwise_topk_blocked(
    q: &EmbeddingMatrix,
    m: &EmbeddingMatrix,
    metric: DistanceMetric,
    k: usize,
) -> Result<Vec<Vec<Neighbor>>> {
    check_dims(q.dim(), m)?;
    if k == 0 {
        return Err(Error::InvalidParameter("k must be positive".into()));
    }
    let k = k.min(m.rows());
    let inv = m.inv_norms();
    Ok((0..q.rows())
        .into_par_iter()
        .map(|i| {
            let mut list: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            let qr = q.row(i);
            for j in 0..m.rows() {
                let key = rank_key(metric, raw(metric, qr, m.row(j)), inv[j]);
                if list.len() == k && !(key > list[k - 1].0) {
                    continue;
                }
                let pos = list.partition_point(|x| x.0 >= key);
                list.insert(pos, (key, j));
                list.truncate(k);
            }
            let nq = norm(qr);
            list.into_iter()
                .map(|(key, index)| Neighbor { index, distance: key_to_distance(metric, key, nq) })
                .collect()
        })
        .collect())
}

/// The `k` most similar rows of `m`, as `(index, similarity)` sorted by
/// decreasing similarity.
pub fn topk_query(query: &[f32], m: &EmbeddingMatrix, k: usize, metric: DistanceMetric) -> Result<Vec<(usize, f64)>> {
    let q = EmbeddingMatrix::new(1, query.len(), query.to_vec())?;
    let lists = pairwise_topk_blocked(&q, m, metric, k)?;
    Ok(lists[0]
        .iter()
        .map(|n| (n.index, metric.similarity_of(n.distance)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingMatrix::new(rows, dim, (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn nearest_of_a_member_is_itself() {
        let m = random(50, 8, 1);
        for metric in [DistanceMetric::L2, DistanceMetric::Cosine] {
            for i in 0..50 {
                assert_eq!(nearest_index(m.row(i), &m, metric).unwrap(), i);
            }
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let m = EmbeddingMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        for metric in DistanceMetric::ALL {
            assert_eq!(nearest_index(&[1.0, 0.0], &m, metric).unwrap(), 1);
        }
        let q = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(pairwise_scores_blocked(&q, &m, DistanceMetric::L2, 1).unwrap()[0].index, 1);
    }

    #[test]
    fn blocked_matches_naive_for_odd_shapes() {
        for (s, t, d, block) in [(1, 1, 1, 1), (5, 9, 3, 2), (67, 130, 20, 16), (9, 5, 33, 512)] {
            let q = random(s, d, s as u64);
            let m = random(t, d, t as u64 + 100);
            for metric in DistanceMetric::ALL {
                let naive = nearest_naive(&q, &m, metric).unwrap();
                let blocked = pairwise_scores_blocked(&q, &m, metric, block).unwrap();
                for (i, n) in blocked.iter().enumerate() {
                    assert_eq!(n.index, naive[i]);
                    let d = super::super::distance(q.row(i), m.row(naive[i]), metric).unwrap();
                    assert_eq!(n.distance.to_bits(), d.to_bits());
                }
            }
        }
    }

    #[test]
    fn topk_sorted_and_k1_is_nearest() {
        let m = random(40, 6, 3);
        let q = random(1, 6, 4);
        for metric in DistanceMetric::ALL {
            let top = topk_query(q.row(0), &m, 5, metric).unwrap();
            assert_eq!(top.len(), 5);
            assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
            let one = topk_query(q.row(0), &m, 1, metric).unwrap();
            assert_eq!(one[0].0, nearest_index(q.row(0), &m, metric).unwrap());
            assert_eq!(top[0], one[0]);
        }
        assert_eq!(topk_query(q.row(0), &m, 100, DistanceMetric::L2).unwrap().len(), 40);
        assert!(topk_query(q.row(0), &m, 0, DistanceMetric::L2).is_err());
    }

    #[test]
    fn topk_matches_full_sort() {
        let m = random(30, 4, 8);
        let q = random(1, 4, 9);
        let mut all: Vec<(usize, f64)> = (0..30)
            .map(|j| (j, super::super::similarity(q.row(0), m.row(j), DistanceMetric::Cosine).unwrap()))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let top = topk_query(q.row(0), &m, 7, DistanceMetric::Cosine).unwrap();
        assert_eq!(top, all[..7].to_vec());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = random(3, 4, 1);
        assert!(nearest_index(&[1.0; 3], &m, DistanceMetric::L2).is_err());
    }
}
