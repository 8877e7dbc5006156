use super::tensor::{Real, Tensor2};
use crate::{Error, Result};

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` (`N x V`), with its gradient. Perplexity is `exp(loss)`.
pub fn softmax_xent_loss<T: Real>(logits: &Tensor2<T>, targets: &[u32]) -> Result<(T, Tensor2<T>)> {
    let (sum, mut d) = softmax_xent_rows(logits, targets)?;
    let n = T::from_f64(targets.len().max(1) as f64);
    d.scale(T::ONE / n);
    Ok((sum / n, d))
}

/// Summed NLL and the unscaled gradient `softmax - onehot`.
pub fn softmax_xent_rows<T: Real>(logits: &Tensor2<T>, targets: &[u32]) -> Result<(T, Tensor2<T>)> {
    let (n, v) = logits.shape();
    if targets.len() != n {
        return Err(Error::ShapeMismatch(format!("{} targets for {n} rows", targets.len())));
    }
    let mut d = Tensor2::zeros(n, v);
    let mut total = T::ZERO;
    for (r, &tgt) in targets.iter().enumerate() {
        let tgt = tgt as usize;
        if tgt >= v {
            return Err(Error::TargetOutOfRange { id: tgt, vocab: v });
        }
        let row = logits.row(r);
        let m = row.iter().copied().fold(row[0], T::max);
        let mut z = T::ZERO;
        let drow = d.row_mut(r);
        for (dj, &x) in drow.iter_mut().zip(row) {
            let e = (x - m).exp();
            *dj = e;
            z += e;
        }
        let inv = T::ONE / z;
        drow.iter_mut().for_each(|x| *x *= inv);
        drow[tgt] -= T::ONE;
        total += z.ln() + m - row[tgt];
    }
    Ok((total, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uniform_logits_give_log_v() {
        let logits = Tensor2::<f64>::zeros(3, 8);
        let (loss, _) = softmax_xent_loss(&logits, &[0, 5, 7]).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let mut logits = Tensor2::<f64>::zeros(2, 4);
        logits.set(0, 1, 60.0);
        logits.set(1, 3, 60.0);
        let (loss, _) = softmax_xent_loss(&logits, &[1, 3]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor2::<f64>::uniform(3, 5, 3.0, &mut rng);
        let targets = [4, 0, 2];
        let mut want = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let z: f64 = logits.row(r).iter().map(|x| x.exp()).sum();
            want -= (logits.get(r, t as usize).exp() / z).ln();
        }
        want /= 3.0;
        let (loss, d) = softmax_xent_loss(&logits, &targets).unwrap();
        assert!((loss - want).abs() < 1e-12);
        for r in 0..3 {
            let s: f64 = d.row(r).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn shift_invariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor2::<f64>::uniform(2, 6, 2.0, &mut rng);
        let mut shifted = logits.clone();
        shifted.row_mut(1).iter_mut().for_each(|x| *x += 123.0);
        let a = softmax_xent_loss(&logits, &[1, 2]).unwrap();
        let b = softmax_xent_loss(&shifted, &[1, 2]).unwrap();
        assert!((a.0 - b.0).abs() < 1e-10);
    }

    #[test]
    fn out_of_range_target() {
        let logits = Tensor2::<f64>::zeros(1, 4);
        assert!(matches!(
            softmax_xent_loss(&logits, &[4]),
            Err(Error::TargetOutOfRange { id: 4, vocab: 4 })
        ));
    }
}
