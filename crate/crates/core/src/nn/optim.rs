use super::tensor::Real;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdStats {
    /// Global L2 norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to the gradients (1 when no clipping happened).
    pub scale: f64,
}

pub fn global_norm<T: Real>(grads: &[&[T]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x.to_f64() * x.to_f64())
        .sum::<f64>()
        .sqrt()
}

/// Global-norm clipping followed by a plain SGD update `θ -= lr · g`.
pub fn clip_and_sgd_step<T: Real>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    lr: f64,
    clip_norm: f64,
) -> Result<SgdStats> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidParameter(format!("learning rate must be positive, got {lr}")));
    }
    if !(clip_norm > 0.0) {
        return Err(Error::InvalidParameter(format!("clip norm must be positive, got {clip_norm}")));
    }
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::ShapeMismatch("parameter and gradient lists differ".into()));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
    let step = T::from_f64(lr * scale);
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, &d) in p.iter_mut().zip(g.iter()) {
            *x -= step * d;
        }
    }
    Ok(SgdStats { grad_norm: norm, scale })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clips_norm_four_to_two() {
        let mut a = vec![0.0f64; 2];
        let mut b = vec![0.0f64; 2];
        let ga = [2.0, 2.0];
        let gb = [2.0, -2.0];
        let stats = clip_and_sgd_step(&mut [&mut a, &mut b], &[&ga, &gb], 1.0, 2.0).unwrap();
        assert_eq!(stats.grad_norm, 4.0);
        assert_eq!(stats.scale, 0.5);
        assert_eq!(a, [-1.0, -1.0]);
        assert_eq!(b, [-1.0, 1.0]);
    }

    #[test]
    fn small_gradients_untouched() {
        let mut a = vec![1.0f64];
        clip_and_sgd_step(&mut [&mut a], &[&[1.0]], 0.5, 2.0).unwrap();
        assert_eq!(a, [0.5]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut a = vec![1.0f64];
        assert!(clip_and_sgd_step(&mut [&mut a], &[&[1.0]], 0.0, 2.0).is_err());
        assert!(matches!(
            clip_and_sgd_step(&mut [&mut a], &[&[f64::NAN]], 0.1, 2.0),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(a, [1.0]);
    }
}
