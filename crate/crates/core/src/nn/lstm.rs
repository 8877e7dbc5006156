//! LSTM layers (no peepholes), gate order `[input, forget, candidate, output]`:
//!
//! ```text
//! i = σ(W_i x + U_i h + b_i)   f = σ(W_f x + U_f h + b_f)
//! g = tanh(W_g x + U_g h + b_g) o = σ(W_o x + U_o h + b_o)
//! c' = f ⊙ c + i ⊙ g           h' = o ⊙ tanh(c')
//! ```
//!
//! In a padded batch, steps past a sequence's length carry the previous
//! state unchanged. A left-to-right pass therefore ends on the state of the
//! last valid token and a right-to-left pass starts from the initial state
//! at each sequence's own last token, which makes results independent of
//! padding.

use rand::Rng;

use super::tensor::{gemm, Real, Tensor2};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    /// `input x 4·hidden`
    pub w_ih: Tensor2<T>,
    /// `hidden x 4·hidden`
    pub w_hh: Tensor2<T>,
    /// `1 x 4·hidden`
    pub bias: Tensor2<T>,
}

impl<T: Real> LstmParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_ih: Tensor2::zeros(input, 4 * hidden),
            w_hh: Tensor2::zeros(hidden, 4 * hidden),
            bias: Tensor2::zeros(1, 4 * hidden),
        }
    }

    /// Weights uniform in `[-0.1, 0.1]`, forget-gate bias 1, other biases 0.
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut bias = Tensor2::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            bias.set(0, j, T::ONE);
        }
        LstmParams {
            w_ih: Tensor2::uniform(input, 4 * hidden, 0.1, rng),
            w_hh: Tensor2::uniform(hidden, 4 * hidden, 0.1, rng),
            bias,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.rows()
    }

    pub fn zeros_like(&self) -> Self {
        LstmParams::zeros(self.input_dim(), self.hidden())
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor2<T>); 3] {
        [("w_ih", &self.w_ih), ("w_hh", &self.w_hh), ("bias", &self.bias)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor2<T>); 3] {
        [
            ("w_ih", &mut self.w_ih),
            ("w_hh", &mut self.w_hh),
            ("bias", &mut self.bias),
        ]
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        if h == 0
            || self.w_hh.cols() != 4 * h
            || self.w_ih.cols() != 4 * h
            || self.bias.shape() != (1, 4 * h)
        {
            return Err(Error::ShapeMismatch(format!(
                "inconsistent LSTM parameters: w_ih {:?}, w_hh {:?}, bias {:?}",
                self.w_ih.shape(),
                self.w_hh.shape(),
                self.bias.shape()
            )));
        }
        Ok(())
    }
}

/// One LSTM step on a single example.
pub fn lstm_cell_step<T: Real>(
    x: &[T],
    h_prev: &[T],
    c_prev: &[T],
    p: &LstmParams<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    p.check()?;
    let h = p.hidden();
    if x.len() != p.input_dim() || h_prev.len() != h || c_prev.len() != h {
        return Err(Error::ShapeMismatch(format!(
            "cell step: x {} (want {}), h {} / c {} (want {h})",
            x.len(),
            p.input_dim(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let mut pre = p.bias.as_slice().to_vec();
    for (k, &xk) in x.iter().enumerate() {
        for (j, v) in pre.iter_mut().enumerate() {
            *v += xk * p.w_ih.get(k, j);
        }
    }
    for (k, &hk) in h_prev.iter().enumerate() {
        for (j, v) in pre.iter_mut().enumerate() {
            *v += hk * p.w_hh.get(k, j);
        }
    }
    let mut h_new = vec![T::ZERO; h];
    let mut c_new = vec![T::ZERO; h];
    for j in 0..h {
        let i = pre[j].sigmoid();
        let f = pre[h + j].sigmoid();
        let g = pre[2 * h + j].tanh();
        let o = pre[3 * h + j].sigmoid();
        c_new[j] = f * c_prev[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
    Ok((h_new, c_new))
}

/// Shape of a time-major padded batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub steps: usize,
    pub lengths: Vec<usize>,
}

impl SeqLayout {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(Error::EmptySentence);
        }
        let steps = *lengths.iter().max().unwrap_or(&0);
        Ok(SeqLayout { steps, lengths })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn total_rows(&self) -> usize {
        self.steps * self.batch()
    }

    pub fn row(&self, t: usize, b: usize) -> usize {
        t * self.batch() + b
    }

    pub fn valid(&self, t: usize, b: usize) -> bool {
        t < self.lengths[b]
    }
}

/// Values saved by a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmTape<T> {
    reverse: bool,
    x: Tensor2<T>,
    /// Activated gates, `rows x 4h`.
    gates: Vec<T>,
    tanh_c: Vec<T>,
    h_prev: Tensor2<T>,
    c_prev: Vec<T>,
}

impl<T: Real> LstmParams<T> {
    /// Runs the layer over a padded batch. `x` is `steps·batch x input`;
    /// returns the per-step hidden states (`steps·batch x hidden`).
    pub fn forward(
        &self,
        x: &Tensor2<T>,
        layout: &SeqLayout,
        reverse: bool,
        init: Option<(&Tensor2<T>, &Tensor2<T>)>,
    ) -> Result<(Tensor2<T>, LstmTape<T>)> {
        self.check()?;
        let h = self.hidden();
        let bsz = layout.batch();
        let rows = layout.total_rows();
        if x.shape() != (rows, self.input_dim()) {
            return Err(Error::ShapeMismatch(format!(
                "LSTM input {:?}, expected ({rows}, {})",
                x.shape(),
                self.input_dim()
            )));
        }
        let (mut h_state, mut c_state) = match init {
            Some((h0, c0)) => {
                if h0.shape() != (bsz, h) || c0.shape() != (bsz, h) {
                    return Err(Error::ShapeMismatch("LSTM initial state".into()));
                }
                (h0.clone(), c0.as_slice().to_vec())
            }
            None => (Tensor2::zeros(bsz, h), vec![T::ZERO; bsz * h]),
        };

        let g4 = 4 * h;
        let mut pre = x.matmul(false, &self.w_ih, false)?;
        for r in 0..rows {
            for (v, &b) in pre.row_mut(r).iter_mut().zip(self.bias.as_slice()) {
                *v += b;
            }
        }
        let mut gates = vec![T::ZERO; rows * g4];
        let mut tanh_c = vec![T::ZERO; rows * h];
        let mut h_prev = Tensor2::zeros(rows, h);
        let mut c_prev = vec![T::ZERO; rows * h];
        let mut out = Tensor2::zeros(rows, h);

        for s in 0..layout.steps {
            let t = if reverse { layout.steps - 1 - s } else { s };
            let r0 = t * bsz;
            gemm(
                bsz,
                h,
                g4,
                T::ONE,
                h_state.as_slice(),
                false,
                self.w_hh.as_slice(),
                false,
                T::ONE,
                pre.rows_slice_mut(r0, r0 + bsz),
            );
            h_prev.rows_slice_mut(r0, r0 + bsz).copy_from_slice(h_state.as_slice());
            c_prev[r0 * h..(r0 + bsz) * h].copy_from_slice(&c_state);
            for b in 0..bsz {
                if !layout.valid(t, b) {
                    continue;
                }
                let r = r0 + b;
                let p = pre.row(r);
                let gr = &mut gates[r * g4..(r + 1) * g4];
                let hs = h_state.row_mut(b);
                let cs = &mut c_state[b * h..(b + 1) * h];
                for j in 0..h {
                    let i = p[j].sigmoid();
                    let f = p[h + j].sigmoid();
                    let g = p[2 * h + j].tanh();
                    let o = p[3 * h + j].sigmoid();
                    gr[j] = i;
                    gr[h + j] = f;
                    gr[2 * h + j] = g;
                    gr[3 * h + j] = o;
                    let c = f * cs[j] + i * g;
                    let tc = c.tanh();
                    cs[j] = c;
                    tanh_c[r * h + j] = tc;
                    hs[j] = o * tc;
                }
            }
            out.rows_slice_mut(r0, r0 + bsz).copy_from_slice(h_state.as_slice());
        }

        Ok((
            out,
            LstmTape {
                reverse,
                x: x.clone(),
                gates,
                tanh_c,
                h_prev,
                c_prev,
            },
        ))
    }

    /// Backpropagates `d_out` (gradient w.r.t. every output row). Parameter
    /// gradients are accumulated into `grads`; returns `(dx, dh0, dc0)`.
    pub fn backward(
        &self,
        tape: &LstmTape<T>,
        layout: &SeqLayout,
        d_out: &Tensor2<T>,
        grads: &mut LstmParams<T>,
    ) -> Result<(Tensor2<T>, Tensor2<T>, Tensor2<T>)> {
        let h = self.hidden();
        let g4 = 4 * h;
        let bsz = layout.batch();
        let rows = layout.total_rows();
        if d_out.shape() != (rows, h) {
            return Err(Error::ShapeMismatch(format!(
                "LSTM output gradient {:?}, expected ({rows}, {h})",
                d_out.shape()
            )));
        }
        let mut dgates = Tensor2::zeros(rows, g4);
        let mut dh_carry = Tensor2::zeros(bsz, h);
        let mut dc_carry = vec![T::ZERO; bsz * h];
        let mut dh_rec = Tensor2::zeros(bsz, h);
        let one = T::ONE;

        for s in (0..layout.steps).rev() {
            let t = if tape.reverse { layout.steps - 1 - s } else { s };
            let r0 = t * bsz;
            for b in 0..bsz {
                let r = r0 + b;
                let dh_row = d_out.row(r);
                let carry = dh_carry.row_mut(b);
                for j in 0..h {
                    carry[j] += dh_row[j];
                }
                if !layout.valid(t, b) {
                    continue;
                }
                let gr = &tape.gates[r * g4..(r + 1) * g4];
                let dg = dgates.row_mut(r);
                let dc_b = &mut dc_carry[b * h..(b + 1) * h];
                for j in 0..h {
                    let (i, f, g, o) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                    let tc = tape.tanh_c[r * h + j];
                    let dh = carry[j];
                    let d_o = dh * tc;
                    let dc = dc_b[j] + dh * o * (one - tc * tc);
                    let d_i = dc * g;
                    let d_g = dc * i;
                    let d_f = dc * tape.c_prev[r * h + j];
                    dc_b[j] = dc * f;
                    dg[j] = d_i * i * (one - i);
                    dg[h + j] = d_f * f * (one - f);
                    dg[2 * h + j] = d_g * (one - g * g);
                    dg[3 * h + j] = d_o * o * (one - o);
                }
            }
            gemm(
                bsz,
                g4,
                h,
                one,
                dgates.rows_slice(r0, r0 + bsz),
                false,
                self.w_hh.as_slice(),
                true,
                T::ZERO,
                dh_rec.as_mut_slice(),
            );
            for b in 0..bsz {
                if layout.valid(t, b) {
                    dh_carry.row_mut(b).copy_from_slice(dh_rec.row(b));
                }
            }
        }

        gemm(
            self.input_dim(),
            rows,
            g4,
            one,
            tape.x.as_slice(),
            true,
            dgates.as_slice(),
            false,
            one,
            grads.w_ih.as_mut_slice(),
        );
        gemm(
            h,
            rows,
            g4,
            one,
            tape.h_prev.as_slice(),
            true,
            dgates.as_slice(),
            false,
            one,
            grads.w_hh.as_mut_slice(),
        );
        let db = grads.bias.as_mut_slice();
        for r in 0..rows {
            for (acc, &v) in db.iter_mut().zip(dgates.row(r)) {
                *acc += v;
            }
        }
        let dx = dgates.matmul(false, &self.w_ih, true)?;
        let dc0 = Tensor2::from_vec(bsz, h, dc_carry)?;
        Ok((dx, dh_carry, dc0))
    }
}

#[derive(Clone, Debug)]
pub struct BiLstmTape<T> {
    pub fwd: LstmTape<T>,
    pub bwd: LstmTape<T>,
}

/// Bidirectional layer: per-step concatenation `[h_fwd ; h_bwd]`, width `2·hidden`.
pub fn bilstm_forward<T: Real>(
    x: &Tensor2<T>,
    layout: &SeqLayout,
    p_fwd: &LstmParams<T>,
    p_bwd: &LstmParams<T>,
) -> Result<(Tensor2<T>, BiLstmTape<T>)> {
    if p_fwd.hidden() != p_bwd.hidden() {
        return Err(Error::ShapeMismatch(
            "forward and backward hidden sizes differ".into(),
        ));
    }
    let (hf, tf) = p_fwd.forward(x, layout, false, None)?;
    let (hb, tb) = p_bwd.forward(x, layout, true, None)?;
    let h = p_fwd.hidden();
    let mut out = Tensor2::zeros(x.rows(), 2 * h);
    out.set_columns(0, &hf);
    out.set_columns(h, &hb);
    Ok((out, BiLstmTape { fwd: tf, bwd: tb }))
}

/// Backward pass of [`bilstm_forward`]; returns the input gradient.
pub fn bilstm_backward<T: Real>(
    tape: &BiLstmTape<T>,
    layout: &SeqLayout,
    d_out: &Tensor2<T>,
    p_fwd: &LstmParams<T>,
    p_bwd: &LstmParams<T>,
    g_fwd: &mut LstmParams<T>,
    g_bwd: &mut LstmParams<T>,
) -> Result<Tensor2<T>> {
    let h = p_fwd.hidden();
    let (mut dx, _, _) = p_fwd.backward(&tape.fwd, layout, &d_out.columns(0, h), g_fwd)?;
    let (dxb, _, _) = p_bwd.backward(&tape.bwd, layout, &d_out.columns(h, h), g_bwd)?;
    dx.add_assign(&dxb);
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_parameters_give_zero_state() {
        let p = LstmParams::<f64>::zeros(3, 2);
        let (h, c) = lstm_cell_step(&[1.0, -2.0, 0.5], &[0.0; 2], &[0.0; 2], &p).unwrap();
        assert_eq!(h, [0.0, 0.0]);
        assert_eq!(c, [0.0, 0.0]);
    }

    #[test]
    fn scalar_cell_matches_hand_recomputation() {
        let mut p = LstmParams::<f64>::zeros(1, 1);
        let wi = [0.5, -0.3, 0.8, 0.1];
        let wh = [0.2, 0.4, -0.6, 0.7];
        let b = [0.1, 1.0, -0.2, 0.3];
        for j in 0..4 {
            p.w_ih.set(0, j, wi[j]);
            p.w_hh.set(0, j, wh[j]);
            p.bias.set(0, j, b[j]);
        }
        let (x, h0, c0) = (0.7, -0.4, 0.25);
        let i = sig(wi[0] * x + wh[0] * h0 + b[0]);
        let f = sig(wi[1] * x + wh[1] * h0 + b[1]);
        let g = (wi[2] * x + wh[2] * h0 + b[2]).tanh();
        let o = sig(wi[3] * x + wh[3] * h0 + b[3]);
        let c = f * c0 + i * g;
        let h = o * c.tanh();
        let (hh, cc) = lstm_cell_step(&[x], &[h0], &[c0], &p).unwrap();
        assert!((hh[0] - h).abs() < 1e-12);
        assert!((cc[0] - c).abs() < 1e-12);
        let again = lstm_cell_step(&[x], &[h0], &[c0], &p).unwrap();
        assert_eq!(again, (hh, cc));
    }

    #[test]
    fn cell_rejects_bad_shapes() {
        let p = LstmParams::<f64>::zeros(3, 2);
        assert!(lstm_cell_step(&[1.0], &[0.0; 2], &[0.0; 2], &p).is_err());
        assert!(lstm_cell_step(&[1.0; 3], &[0.0; 3], &[0.0; 2], &p).is_err());
    }

    #[test]
    fn sequence_forward_matches_cell_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LstmParams::<f64>::init(3, 4, &mut rng);
        let layout = SeqLayout::new(vec![3]).unwrap();
        let x = Tensor2::<f64>::uniform(3, 3, 1.0, &mut rng);
        let (out, _) = p.forward(&x, &layout, false, None).unwrap();
        let (mut h, mut c) = (vec![0.0; 4], vec![0.0; 4]);
        for t in 0..3 {
            (h, c) = lstm_cell_step(x.row(t), &h, &c, &p).unwrap();
            for j in 0..4 {
                assert!((out.get(t, j) - h[j]).abs() < 1e-12);
            }
        }
        let (rev, _) = p.forward(&x, &layout, true, None).unwrap();
        let (mut h, mut c) = (vec![0.0; 4], vec![0.0; 4]);
        for t in (0..3).rev() {
            (h, c) = lstm_cell_step(x.row(t), &h, &c, &p).unwrap();
            for j in 0..4 {
                assert!((rev.get(t, j) - h[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilstm_single_step_and_zero_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pf = LstmParams::<f64>::init(2, 3, &mut rng);
        let layout = SeqLayout::new(vec![1]).unwrap();
        let x = Tensor2::<f64>::uniform(1, 2, 1.0, &mut rng);
        let (out, _) = bilstm_forward(&x, &layout, &pf, &pf).unwrap();
        assert_eq!(out.cols(), 6);
        assert_eq!(&out.row(0)[..3], &out.row(0)[3..]);

        let z = LstmParams::<f64>::zeros(2, 3);
        let layout = SeqLayout::new(vec![4]).unwrap();
        let x = Tensor2::<f64>::uniform(4, 2, 1.0, &mut rng);
        let (out, _) = bilstm_forward(&x, &layout, &z, &z).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padded_rows_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = LstmParams::<f64>::init(2, 3, &mut rng);
        let short = Tensor2::<f64>::uniform(2, 2, 1.0, &mut rng);
        let long = Tensor2::<f64>::uniform(5, 2, 1.0, &mut rng);
        let layout = SeqLayout::new(vec![2, 5]).unwrap();
        let mut x = Tensor2::zeros(10, 2);
        for t in 0..5 {
            if t < 2 {
                x.row_mut(layout.row(t, 0)).copy_from_slice(short.row(t));
            } else {
                // garbage in padding
                x.row_mut(layout.row(t, 0)).copy_from_slice(&[9.0, -9.0]);
            }
            x.row_mut(layout.row(t, 1)).copy_from_slice(long.row(t));
        }
        for reverse in [false, true] {
            let (batched, _) = p.forward(&x, &layout, reverse, None).unwrap();
            let (alone, _) = p
                .forward(&short, &SeqLayout::new(vec![2]).unwrap(), reverse, None)
                .unwrap();
            for t in 0..2 {
                for j in 0..3 {
                    assert!((batched.get(layout.row(t, 0), j) - alone.get(t, j)).abs() < 1e-12);
                }
            }
        }
    }

    fn flat(p: &LstmParams<f64>) -> Vec<f64> {
        p.tensors().iter().flat_map(|(_, t)| t.as_slice().to_vec()).collect()
    }

    fn unflat(p: &mut LstmParams<f64>, v: &[f64]) {
        let mut off = 0;
        for (_, t) in p.tensors_mut() {
            let n = t.as_slice().len();
            t.as_mut_slice().copy_from_slice(&v[off..off + n]);
            off += n;
        }
    }

    #[test]
    fn cell_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = LstmParams::<f64>::init(2, 3, &mut rng);
            let layout = SeqLayout::new(vec![1]).unwrap();
            let x = Tensor2::<f64>::uniform(1, 2, 1.0, &mut rng);
            let h0 = Tensor2::<f64>::uniform(1, 3, 0.5, &mut rng);
            let c0 = Tensor2::<f64>::uniform(1, 3, 0.5, &mut rng);
            let w = Tensor2::<f64>::uniform(1, 3, 1.0, &mut rng);
            let f = |v: &[f64]| {
                let mut p = base.clone();
                unflat(&mut p, v);
                let (out, tape) = p.forward(&x, &layout, false, Some((&h0, &c0))).unwrap();
                let loss: f64 = out.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
                let mut g = p.zeros_like();
                p.backward(&tape, &layout, &w, &mut g).unwrap();
                (loss, flat(&g))
            };
            let err = finite_diff_check(f, &flat(&base), 1e-5, 1000, seed);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn padded_sequence_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = LstmParams::<f64>::init(3, 2, &mut rng);
        let layout = SeqLayout::new(vec![4, 2, 3]).unwrap();
        let x = Tensor2::<f64>::uniform(12, 3, 1.0, &mut rng);
        let w = Tensor2::<f64>::uniform(12, 2, 1.0, &mut rng);
        let h0 = Tensor2::<f64>::uniform(3, 2, 0.5, &mut rng);
        let c0 = Tensor2::<f64>::uniform(3, 2, 0.5, &mut rng);
        for reverse in [false, true] {
            // parameters, input, and initial state all checked together
            let n_p = flat(&base).len();
            let mut theta = flat(&base);
            theta.extend_from_slice(x.as_slice());
            theta.extend_from_slice(h0.as_slice());
            theta.extend_from_slice(c0.as_slice());
            let f = |v: &[f64]| {
                let mut p = base.clone();
                unflat(&mut p, &v[..n_p]);
                let xx = Tensor2::from_vec(12, 3, v[n_p..n_p + 36].to_vec()).unwrap();
                let hh = Tensor2::from_vec(3, 2, v[n_p + 36..n_p + 42].to_vec()).unwrap();
                let cc = Tensor2::from_vec(3, 2, v[n_p + 42..].to_vec()).unwrap();
                let (out, tape) = p.forward(&xx, &layout, reverse, Some((&hh, &cc))).unwrap();
                let loss: f64 = out.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
                let mut g = p.zeros_like();
                let (dx, dh0, dc0) = p.backward(&tape, &layout, &w, &mut g).unwrap();
                let mut grad = flat(&g);
                grad.extend_from_slice(dx.as_slice());
                grad.extend_from_slice(dh0.as_slice());
                grad.extend_from_slice(dc0.as_slice());
                (loss, grad)
            };
            let err = finite_diff_check(f, &theta, 1e-5, 10_000, 3);
            assert!(err < 1e-4, "reverse={reverse}: {err}");
        }
    }
}
