use rand::Rng;

use super::tensor::{Real, Tensor2};

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<T: Real, R: Rng>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Tensor2<T> {
    let keep = T::from_f64(1.0 / (1.0 - p));
    let mut m = Tensor2::zeros(rows, cols);
    for v in m.as_mut_slice() {
        if !rng.gen_bool(p) {
            *v = keep;
        }
    }
    m
}
