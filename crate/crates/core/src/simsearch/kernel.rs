//! f32 reductions with a fixed serial order per pair. The blocked kernel
//! runs one pair per SIMD lane, each lane performing exactly the same
//! sequence of fused multiply-adds as [`reduce`], so blocked and scalar
//! results are bit-identical.

/// Candidates per packed panel (one 512-bit vector of f32).
pub const PANEL: usize = 16;
/// Queries per register tile.
pub const TILE_ROWS: usize = 6;

pub trait Reduction: Copy + Send + Sync + 'static {
    const SQUARED_DIFF: bool;
    fn step(acc: f32, a: f32, b: f32) -> f32;
}

#[derive(Clone, Copy)]
pub struct Dot;

#[derive(Clone, Copy)]
pub struct SqDiff;

impl Reduction for Dot {
    const SQUARED_DIFF: bool = false;
    #[inline(always)]
    fn step(acc: f32, a: f32, b: f32) -> f32 {
        a.mul_add(b, acc)
    }
}

impl Reduction for SqDiff {
    const SQUARED_DIFF: bool = true;
    #[inline(always)]
    fn step(acc: f32, a: f32, b: f32) -> f32 {
        let d = a - b;
        d.mul_add(d, acc)
    }
}

/// Serial reduction `acc = step(acc, a[k], b[k])` for `k = 0..d`.
pub fn reduce<K: Reduction>(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| K::step(acc, x, y))
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    reduce::<Dot>(a, b)
}

pub fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    reduce::<SqDiff>(a, b)
}

/// Candidate rows regrouped into dimension-major panels of [`PANEL`] rows;
/// the last panel is zero-padded.
pub struct Panels {
    dim: usize,
    rows: usize,
    data: Vec<f32>,
}

impl Panels {
    pub fn pack(data: &[f32], rows: usize, dim: usize) -> Self {
        let n = rows.div_ceil(PANEL);
        let mut out = vec![0.0; n * dim * PANEL];
        for r in 0..rows {
            let (p, lane) = (r / PANEL, r % PANEL);
            let base = p * dim * PANEL;
            for k in 0..dim {
                out[base + k * PANEL + lane] = data[r * dim + k];
            }
        }
        Panels { dim, rows, data: out }
    }

    pub fn len(&self) -> usize {
        self.rows.div_ceil(PANEL)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// Valid rows in panel `p`.
    pub fn width(&self, p: usize) -> usize {
        (self.rows - p * PANEL).min(PANEL)
    }

    fn panel(&self, p: usize) -> &[f32] {
        &self.data[p * self.dim * PANEL..(p + 1) * self.dim * PANEL]
    }
}

/// Reductions of `R` query rows against two panels: `out[r][j]` for the
/// `2·PANEL` candidates of panels `p` and `p + 1` (the second may be absent).
pub fn tile<K: Reduction, const R: usize>(q: [&[f32]; R], panels: &Panels, p: usize, out: &mut [[f32; 2 * PANEL]; R]) {
    let a = panels.panel(p);
    let b = if p + 1 < panels.len() { panels.panel(p + 1) } else { a };
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime and all slices
            // have `dim` (queries) or `dim·PANEL` (panels) elements.
            unsafe { avx512::tile::<K, R>(q, a, b, panels.dim, out) };
            return;
        }
    }
    tile_portable::<K, R>(q, a, b, panels.dim, out);
}

fn tile_portable<K: Reduction, const R: usize>(q: [&[f32]; R], a: &[f32], b: &[f32], dim: usize, out: &mut [[f32; 2 * PANEL]; R]) {
    for row in out.iter_mut() {
        row.fill(0.0);
    }
    for k in 0..dim {
        let ca = &a[k * PANEL..(k + 1) * PANEL];
        let cb = &b[k * PANEL..(k + 1) * PANEL];
        for r in 0..R {
            let x = q[r][k];
            for l in 0..PANEL {
                out[r][l] = K::step(out[r][l], x, ca[l]);
                out[r][PANEL + l] = K::step(out[r][PANEL + l], x, cb[l]);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use super::{Reduction, PANEL};
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx512f")]
    pub unsafe fn tile<K: Reduction, const R: usize>(
        q: [&[f32]; R],
        a: &[f32],
        b: &[f32],
        dim: usize,
        out: &mut [[f32; 2 * PANEL]; R],
    ) {
        assert!(a.len() >= dim * PANEL && b.len() >= dim * PANEL);
        let q: [&[f32]; R] = std::array::from_fn(|r| &q[r][..dim]);
        let mut acc_a = [_mm512_setzero_ps(); R];
        let mut acc_b = [_mm512_setzero_ps(); R];
        let (pa, pb) = (a.as_ptr(), b.as_ptr());
        for k in 0..dim {
            let ca = _mm512_loadu_ps(pa.wrapping_add(k * PANEL));
            let cb = _mm512_loadu_ps(pb.wrapping_add(k * PANEL));
            for r in 0..R {
                let x = _mm512_set1_ps(q[r][k]);
                if K::SQUARED_DIFF {
                    let da = _mm512_sub_ps(x, ca);
                    let db = _mm512_sub_ps(x, cb);
                    acc_a[r] = _mm512_fmadd_ps(da, da, acc_a[r]);
                    acc_b[r] = _mm512_fmadd_ps(db, db, acc_b[r]);
                } else {
                    acc_a[r] = _mm512_fmadd_ps(x, ca, acc_a[r]);
                    acc_b[r] = _mm512_fmadd_ps(x, cb, acc_b[r]);
                }
            }
        }
        for r in 0..R {
            _mm512_storeu_ps(out[r].as_mut_ptr(), acc_a[r]);
            _mm512_storeu_ps(out[r][PANEL..].as_mut_ptr(), acc_b[r]);
        }
    }
}
