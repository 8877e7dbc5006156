use super::lstm::SeqLayout;
use super::tensor::{Real, Tensor2};
use crate::{Error, Result};

/// Element-wise max over the valid rows of `h` (`T x d`).
pub fn maxpool_time<T: Real>(h: &Tensor2<T>, mask: &[bool]) -> Result<Vec<T>> {
    Ok(maxpool_with_argmax(h, mask)?.0)
}

fn maxpool_with_argmax<T: Real>(h: &Tensor2<T>, mask: &[bool]) -> Result<(Vec<T>, Vec<usize>)> {
    if mask.len() != h.rows() {
        return Err(Error::ShapeMismatch(format!(
            "mask of {} flags for {} timesteps",
            mask.len(),
            h.rows()
        )));
    }
    let first = mask
        .iter()
        .position(|&m| m)
        .ok_or_else(|| Error::InvalidParameter("max-pooling needs a valid timestep".into()))?;
    let mut out = h.row(first).to_vec();
    let mut arg = vec![first; h.cols()];
    for t in first + 1..h.rows() {
        if !mask[t] {
            continue;
        }
        for (j, &v) in h.row(t).iter().enumerate() {
            // strict: ties keep the lowest timestep
            if v > out[j] {
                out[j] = v;
                arg[j] = t;
            }
        }
    }
    Ok((out, arg))
}

/// Argmax timestep per (sequence, feature), kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MaxPoolTape {
    argmax: Vec<usize>,
    dim: usize,
}

impl MaxPoolTape {
    /// Winning timestep per (sequence, feature), sequence-major.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }

    /// Gradient of a single-sequence pool: each output gradient goes to its
    /// argmax timestep only.
    pub fn backward_single<T: Real>(&self, d_out: &[T], steps: usize) -> Tensor2<T> {
        let mut dh = Tensor2::zeros(steps, self.dim);
        for (j, (&t, &g)) in self.argmax.iter().zip(d_out).enumerate() {
            dh.set(t, j, g);
        }
        dh
    }

    pub fn single<T: Real>(h: &Tensor2<T>, mask: &[bool]) -> Result<(Vec<T>, MaxPoolTape)> {
        let (out, argmax) = maxpool_with_argmax(h, mask)?;
        Ok((out, MaxPoolTape { argmax, dim: h.cols() }))
    }
}

/// Max-pools every sequence of a padded batch; returns `batch x d`.
pub fn maxpool_batch<T: Real>(h: &Tensor2<T>, layout: &SeqLayout) -> Result<(Tensor2<T>, MaxPoolTape)> {
    let d = h.cols();
    let bsz = layout.batch();
    if h.rows() != layout.total_rows() {
        return Err(Error::ShapeMismatch("pooling input rows".into()));
    }
    let mut out = Tensor2::zeros(bsz, d);
    let mut argmax = vec![0usize; bsz * d];
    for b in 0..bsz {
        out.row_mut(b).copy_from_slice(h.row(layout.row(0, b)));
        for t in 1..layout.lengths[b] {
            let row = h.row(layout.row(t, b));
            let o = out.row_mut(b);
            for j in 0..d {
                if row[j] > o[j] {
                    o[j] = row[j];
                    argmax[b * d + j] = t;
                }
            }
        }
    }
    Ok((out, MaxPoolTape { argmax, dim: d }))
}

pub fn maxpool_backward<T: Real>(d_out: &Tensor2<T>, tape: &MaxPoolTape, layout: &SeqLayout) -> Tensor2<T> {
    let d = tape.dim;
    let mut dh = Tensor2::zeros(layout.total_rows(), d);
    for b in 0..layout.batch() {
        for j in 0..d {
            let t = tape.argmax[b * d + j];
            dh.set(layout.row(t, b), j, d_out.get(b, j));
        }
    }
    dh
}

/// Hidden state at the final valid timestep of a single sequence.
pub fn last_state_repr<T: Real>(h_top: &Tensor2<T>, length: usize) -> Result<Vec<T>> {
    if length == 0 || length > h_top.rows() {
        return Err(Error::InvalidParameter(format!(
            "length {length} for a sequence of {} steps",
            h_top.rows()
        )));
    }
    Ok(h_top.row(length - 1).to_vec())
}

pub fn last_state_batch<T: Real>(h_top: &Tensor2<T>, layout: &SeqLayout) -> Tensor2<T> {
    let mut out = Tensor2::zeros(layout.batch(), h_top.cols());
    for (b, &len) in layout.lengths.iter().enumerate() {
        out.row_mut(b).copy_from_slice(h_top.row(layout.row(len - 1, b)));
    }
    out
}

pub fn last_state_backward<T: Real>(d_out: &Tensor2<T>, layout: &SeqLayout) -> Tensor2<T> {
    let mut dh = Tensor2::zeros(layout.total_rows(), d_out.cols());
    for (b, &len) in layout.lengths.iter().enumerate() {
        dh.row_mut(layout.row(len - 1, b)).copy_from_slice(d_out.row(b));
    }
    dh
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor2<f64> {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn pool_example_and_argmax_routing() {
        let h = t(&[&[1.0, -2.0], &[0.0, 5.0]]);
        let (out, tape) = MaxPoolTape::single(&h, &[true, true]).unwrap();
        assert_eq!(out, [1.0, 5.0]);
        let dh = tape.backward_single(&[1.0, 1.0], 2);
        assert_eq!(dh, t(&[&[1.0, 0.0], &[0.0, 1.0]]));
    }

    #[test]
    fn pool_single_row_and_masks() {
        let h = t(&[&[3.0, -1.0]]);
        assert_eq!(maxpool_time(&h, &[true]).unwrap(), [3.0, -1.0]);
        let h = t(&[&[1.0, 1.0], &[7.0, 7.0]]);
        assert_eq!(maxpool_time(&h, &[true, false]).unwrap(), [1.0, 1.0]);
        assert!(maxpool_time(&h, &[false, false]).is_err());
        assert!(maxpool_time(&h, &[true]).is_err());
    }

    #[test]
    fn ties_route_to_lowest_timestep() {
        let h = t(&[&[2.0], &[2.0]]);
        let (_, tape) = MaxPoolTape::single(&h, &[true, true]).unwrap();
        assert_eq!(tape.backward_single(&[1.0], 2), t(&[&[1.0], &[0.0]]));
    }

    #[test]
    fn batch_pool_matches_single() {
        let layout = SeqLayout::new(vec![2, 3]).unwrap();
        // rows: t0b0, t0b1, t1b0, t1b1, t2b0(pad), t2b1
        let h = t(&[&[1.0], &[4.0], &[3.0], &[2.0], &[99.0], &[5.0]]);
        let (out, tape) = maxpool_batch(&h, &layout).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 5.0]);
        let dh = maxpool_backward(&t(&[&[1.0], &[2.0]]), &tape, &layout);
        assert_eq!(dh.as_slice(), &[0.0, 0.0, 1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn last_state() {
        let h = t(&[&[1.0], &[2.0], &[3.0]]);
        assert_eq!(last_state_repr(&h, 3).unwrap(), [3.0]);
        assert_eq!(last_state_repr(&h, 1).unwrap(), [1.0]);
        assert!(last_state_repr(&h, 0).is_err());
        let layout = SeqLayout::new(vec![1, 2]).unwrap();
        let h = t(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        assert_eq!(last_state_batch(&h, &layout).as_slice(), &[1.0, 4.0]);
    }
}
