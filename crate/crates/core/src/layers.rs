//! GRU cell, bidirectional GRU over utterance sequences, dense layer, dropout.
//!
//! Vectors are row vectors, so `W·x` from the usual column-vector notation is
//! computed as `x·Wᵀ` and a whole sequence is projected with one product.

use rand::Rng;

use crate::params::{Graph, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// One GRU cell.
///
/// ```text
/// z  = σ(W_z·x + U_z·h + b_z)
/// r  = σ(W_r·x + U_r·h + b_r)
/// h~ = tanh(W_h·x + U_h·(r∘h) + b_h)
/// h' = (1 − z)∘h + z∘h~
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruCellParams {
    pub input: usize,
    pub hidden: usize,
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

impl GruCellParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut w = |g: &str| store.add_glorot(format!("{prefix}.w_{g}"), hidden, input, rng);
        let (w_z, w_r, w_h) = (w("z"), w("r"), w("h"));
        let mut u = |g: &str| store.add_glorot(format!("{prefix}.u_{g}"), hidden, hidden, rng);
        let (u_z, u_r, u_h) = (u("z"), u("r"), u("h"));
        let mut b = |g: &str| store.add_zeros(format!("{prefix}.b_{g}"), 1, hidden);
        let (b_z, b_r, b_h) = (b("z"), b("r"), b("h"));
        Self {
            input,
            hidden,
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
        }
    }
}

/// Forward and backward GRU cells; output width is `2 * hidden`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiGruParams {
    pub forward: GruCellParams,
    pub backward: GruCellParams,
}

impl BiGruParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            forward: GruCellParams::new(store, &format!("{prefix}.fwd"), input, hidden, rng),
            backward: GruCellParams::new(store, &format!("{prefix}.bwd"), input, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    pub fn output_width(&self) -> usize {
        2 * self.forward.hidden
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseParams {
    pub input: usize,
    pub output: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl DenseParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            input,
            output,
            w: store.add_glorot(format!("{prefix}.w"), output, input, rng),
            b: store.add_zeros(format!("{prefix}.b"), 1, output),
        }
    }
}

fn check_width<T: Scalar>(g: &Graph<T>, op: &'static str, x: Var, width: usize) -> Result<(), TensorError> {
    let s = g.shape(x);
    if s.cols != width {
        return Err(TensorError::Shape {
            op,
            left: s,
            right: crate::tensor::Shape::new(s.rows, width),
        });
    }
    Ok(())
}

/// Recurrent part of a step, given the input projections `x·Wᵀ + b`.
fn recur<T: Scalar>(
    g: &mut Graph<T>,
    cell: &GruCellParams,
    xz: Var,
    xr: Var,
    xh: Var,
    h_prev: Var,
) -> Result<Var, TensorError> {
    let (uz, ur, uh) = (g.param_t(cell.u_z)?, g.param_t(cell.u_r)?, g.param_t(cell.u_h)?);
    let hz = g.matmul(h_prev, uz)?;
    let z_pre = g.add(xz, hz)?;
    let z = g.sigmoid(z_pre)?;
    let hr = g.matmul(h_prev, ur)?;
    let r_pre = g.add(xr, hr)?;
    let r = g.sigmoid(r_pre)?;
    let rh = g.hadamard(r, h_prev)?;
    let hh = g.matmul(rh, uh)?;
    let c_pre = g.add(xh, hh)?;
    let cand = g.tanh(c_pre)?;
    let keep = g.affine(z, -T::one(), T::one())?;
    let kept = g.hadamard(keep, h_prev)?;
    let fresh = g.hadamard(z, cand)?;
    g.add(kept, fresh)
}

/// `x·Wᵀ + b` for a `u x in` input.
fn project<T: Scalar>(g: &mut Graph<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var, TensorError> {
    let wt = g.param_t(w)?;
    let xw = g.matmul(x, wt)?;
    let bv = g.param(b);
    g.add_row(xw, bv)
}

/// Single GRU step on a `1 x in` input and `1 x h` previous state.
pub fn gru_cell_step<T: Scalar>(
    g: &mut Graph<T>,
    cell: &GruCellParams,
    x: Var,
    h_prev: Var,
) -> Result<Var, TensorError> {
    check_width(g, "gru_cell_step", x, cell.input)?;
    check_width(g, "gru_cell_step", h_prev, cell.hidden)?;
    let xz = project(g, x, cell.w_z, cell.b_z)?;
    let xr = project(g, x, cell.w_r, cell.b_r)?;
    let xh = project(g, x, cell.w_h, cell.b_h)?;
    recur(g, cell, xz, xr, xh, h_prev)
}

/// Runs one direction over `seq`, returning the `u x h` state sequence.
/// Masked positions emit zero rows and leave the state untouched.
fn run_direction<T: Scalar>(
    g: &mut Graph<T>,
    cell: &GruCellParams,
    seq: Var,
    mask: &[bool],
    reverse: bool,
) -> Result<Var, TensorError> {
    let u = mask.len();
    let pz = project(g, seq, cell.w_z, cell.b_z)?;
    let pr = project(g, seq, cell.w_r, cell.b_r)?;
    let ph = project(g, seq, cell.w_h, cell.b_h)?;
    let zero = g.constant(Tensor::zeros(1, cell.hidden));
    let mut h = zero;
    let mut states = vec![zero; u];
    let order: Vec<usize> = if reverse {
        (0..u).rev().collect()
    } else {
        (0..u).collect()
    };
    for t in order {
        if !mask[t] {
            continue;
        }
        let xz = g.row(pz, t)?;
        let xr = g.row(pr, t)?;
        let xh = g.row(ph, t)?;
        h = recur(g, cell, xz, xr, xh, h)?;
        states[t] = h;
    }
    g.stack_rows(&states)
}

/// Bidirectional GRU over a `u x in` sequence; row `t` of the `u x 2h`
/// output is `[forward_t, backward_t]`. Both directions start from zero.
pub fn bigru_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &BiGruParams,
    seq: Var,
    mask: &[bool],
) -> Result<Var, TensorError> {
    let s = g.shape(seq);
    if s.rows == 0 {
        return Err(TensorError::Contract {
            op: "bigru_forward",
            reason: "empty sequence".into(),
        });
    }
    if mask.len() != s.rows {
        return Err(TensorError::Contract {
            op: "bigru_forward",
            reason: format!("mask length {} for {} positions", mask.len(), s.rows),
        });
    }
    check_width(g, "bigru_forward", seq, p.forward.input)?;
    let fwd = run_direction(g, &p.forward, seq, mask, false)?;
    let bwd = run_direction(g, &p.backward, seq, mask, true)?;
    g.concat_cols(&[fwd, bwd])
}

pub fn dense_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &DenseParams,
    x: Var,
    activation: Activation,
) -> Result<Var, TensorError> {
    check_width(g, "dense_forward", x, p.input)?;
    let y = project(g, x, p.w, p.b)?;
    match activation {
        Activation::Relu => g.relu(y),
        Activation::None => Ok(y),
    }
}

/// Inverted dropout. Eval mode and `rate == 0` return `x` itself.
pub fn dropout_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var, TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Contract {
            op: "dropout_forward",
            reason: format!("rate {rate} outside [0, 1)"),
        });
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let s = g.shape(x);
    let scale = T::of(1.0 / (1.0 - rate));
    let factor = (0..s.numel())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale })
        .collect();
    let factor = Tensor::from_vec(s.rows, s.cols, factor)?;
    g.mul_const(x, factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    /// Plain-loop GRU step used as an independent reference.
    fn reference_step(store: &ParamStore<f64>, c: &GruCellParams, x: &[f64], h: &[f64]) -> Vec<f64> {
        let mv = |w: ParamId, v: &[f64]| -> Vec<f64> {
            let m = store.get(w);
            (0..m.rows())
                .map(|i| (0..m.cols()).map(|j| m.get(i, j) * v[j]).sum())
                .collect()
        };
        let b = |id: ParamId| store.get(id).data().to_vec();
        let (wz, uz, bz) = (mv(c.w_z, x), mv(c.u_z, h), b(c.b_z));
        let (wr, ur, br) = (mv(c.w_r, x), mv(c.u_r, h), b(c.b_r));
        let z: Vec<f64> = (0..c.hidden).map(|i| sigmoid(wz[i] + uz[i] + bz[i])).collect();
        let r: Vec<f64> = (0..c.hidden).map(|i| sigmoid(wr[i] + ur[i] + br[i])).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let (wh, uh, bh) = (mv(c.w_h, x), mv(c.u_h, &rh), b(c.b_h));
        (0..c.hidden)
            .map(|i| {
                let cand = (wh[i] + uh[i] + bh[i]).tanh();
                (1.0 - z[i]) * h[i] + z[i] * cand
            })
            .collect()
    }

    fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
    }

    #[test]
    fn zero_cell_halves_previous_state() {
        let mut store = ParamStore::<f64>::new();
        let cell = GruCellParams::new(&mut store, "c", 3, 2, &mut rng());
        store.zero_all();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::vector(&[0.3, -1.0, 2.0]));
        let h = g.constant(Tensor::vector(&[1.5, -4.0]));
        let out = gru_cell_step(&mut g, &cell, x, h).unwrap();
        assert_eq!(g.value(out).data(), &[0.75, -2.0]);
        let h0 = g.constant(Tensor::zeros(1, 2));
        let out = gru_cell_step(&mut g, &cell, x, h0).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0]);
    }

    #[test]
    fn cell_step_matches_reference() {
        let mut r = rng();
        let mut store = ParamStore::<f64>::new();
        let cell = GruCellParams::new(&mut store, "c", 4, 3, &mut r);
        randomize(&mut store, &mut r);
        let x = [0.4, -0.2, 1.1, 0.05];
        let h = [0.3, -0.6, 0.9];
        let expect = reference_step(&store, &cell, &x, &h);
        let mut g = Graph::new(&store);
        let xv = g.constant(Tensor::vector(&x));
        let hv = g.constant(Tensor::vector(&h));
        let out = gru_cell_step(&mut g, &cell, xv, hv).unwrap();
        for (a, b) in g.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_step_shape_errors() {
        let mut store = ParamStore::<f64>::new();
        let cell = GruCellParams::new(&mut store, "c", 3, 2, &mut rng());
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(1, 4));
        let h = g.constant(Tensor::zeros(1, 2));
        assert!(matches!(
            gru_cell_step(&mut g, &cell, x, h),
            Err(TensorError::Shape { .. })
        ));
    }

    fn bigru_setup(input: usize, hidden: usize) -> (ParamStore<f64>, BiGruParams) {
        let mut r = rng();
        let mut store = ParamStore::new();
        let p = BiGruParams::new(&mut store, "enc", input, hidden, &mut r);
        randomize(&mut store, &mut r);
        (store, p)
    }

    #[test]
    fn bigru_single_step_is_two_cell_steps() {
        let (store, p) = bigru_setup(3, 2);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::vector(&[0.5, -0.1, 0.3]));
        let out = bigru_forward(&mut g, &p, x, &[true]).unwrap();
        let h0 = g.constant(Tensor::zeros(1, 2));
        let f = gru_cell_step(&mut g, &p.forward, x, h0).unwrap();
        let b = gru_cell_step(&mut g, &p.backward, x, h0).unwrap();
        let both = g.concat_cols(&[f, b]).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(both)) < 1e-15);
        assert_eq!(g.shape(out).cols, p.output_width());
    }

    #[test]
    fn bigru_reversal_swaps_halves() {
        let (store, p) = bigru_setup(2, 3);
        let swapped = BiGruParams {
            forward: p.backward,
            backward: p.forward,
        };
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![0.3 * i as f64 - 0.5, (i as f64).sin()]).collect();
        let fwd_seq = Tensor::from_rows(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>());
        let rev_rows: Vec<&[f64]> = rows.iter().rev().map(Vec::as_slice).collect();
        let rev_seq = Tensor::from_rows(&rev_rows);
        let mask = [true; 5];

        let mut g = Graph::new(&store);
        let a = g.constant(fwd_seq);
        let out = bigru_forward(&mut g, &p, a, &mask).unwrap();
        let b = g.constant(rev_seq);
        let out_rev = bigru_forward(&mut g, &swapped, b, &mask).unwrap();
        let (o, orv) = (g.value(out), g.value(out_rev));
        for t in 0..5 {
            let r = o.row(t);
            let rr = orv.row(4 - t);
            assert!((0..3).all(|c| (r[c] - rr[3 + c]).abs() < 1e-14));
            assert!((0..3).all(|c| (r[3 + c] - rr[c]).abs() < 1e-14));
        }
    }

    #[test]
    fn bigru_padding_does_not_leak() {
        let (store, p) = bigru_setup(2, 2);
        let real = Tensor::from_rows(&[&[0.1, 0.2], &[-0.4, 0.9], &[1.0, -1.0]]);
        let padded = Tensor::from_rows(&[&[0.1, 0.2], &[-0.4, 0.9], &[1.0, -1.0], &[0.0, 0.0], &[0.0, 0.0]]);
        let mut g = Graph::new(&store);
        let a = g.constant(real);
        let short = bigru_forward(&mut g, &p, a, &[true; 3]).unwrap();
        let b = g.constant(padded);
        let long = bigru_forward(&mut g, &p, b, &[true, true, true, false, false]).unwrap();
        let (s, l) = (g.value(short), g.value(long));
        for t in 0..3 {
            assert_eq!(s.row(t), l.row(t));
        }
        assert!(l.row(3).iter().chain(l.row(4)).all(|&v| v == 0.0));
    }

    #[test]
    fn bigru_rejects_empty_sequence() {
        let (store, p) = bigru_setup(2, 2);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(0, 2));
        assert!(matches!(
            bigru_forward(&mut g, &p, x, &[]),
            Err(TensorError::Contract { .. })
        ));
    }

    #[test]
    fn dense_identity_and_bias_only() {
        let mut store = ParamStore::<f64>::new();
        let p = DenseParams::new(&mut store, "d", 3, 3, &mut rng());
        store.set(p.w, Tensor::identity(3)).unwrap();
        let x_val = Tensor::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, -0.5]]);
        {
            let mut g = Graph::new(&store);
            let x = g.constant(x_val.clone());
            let y = dense_forward(&mut g, &p, x, Activation::None).unwrap();
            assert_eq!(g.value(y), &x_val);
        }
        store.get_mut(p.w).data_mut().fill(0.0);
        store.set(p.b, Tensor::vector(&[1.0, -1.0, 2.0])).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(x_val);
        let y = dense_forward(&mut g, &p, x, Activation::None).unwrap();
        assert_eq!(g.value(y).row(1), &[1.0, -1.0, 2.0]);
        let y = dense_forward(&mut g, &p, x, Activation::Relu).unwrap();
        assert_eq!(g.value(y).row(0), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let mut r = rng();
        assert_eq!(dropout_forward(&mut g, x, 0.0, Mode::Train, &mut r).unwrap(), x);
        assert_eq!(dropout_forward(&mut g, x, 0.0, Mode::Eval, &mut r).unwrap(), x);
        assert_eq!(dropout_forward(&mut g, x, 0.7, Mode::Eval, &mut r).unwrap(), x);
        assert!(dropout_forward(&mut g, x, 1.0, Mode::Train, &mut r).is_err());
        assert!(dropout_forward(&mut g, x, -0.1, Mode::Eval, &mut r).is_err());
    }

    #[test]
    fn dropout_monte_carlo_statistics() {
        let n = 100_000;
        let rate = 0.4;
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::full(1, n, 1.0));
        let y = dropout_forward(&mut g, x, rate, Mode::Train, &mut rng()).unwrap();
        let d = g.value(y).data();
        let zeros = d.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((zeros - rate).abs() < 0.01, "zero fraction {zeros}");
        let survivors: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
        let mean = survivors.iter().sum::<f64>() / survivors.len() as f64;
        assert!((mean * (1.0 - rate) - 1.0).abs() < 0.02);
        // Expected value preserved overall.
        let total = d.iter().sum::<f64>() / n as f64;
        assert!((total - 1.0).abs() < 0.02);
    }

    #[test]
    fn dropout_is_seeded() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::full(4, 4, 1.0));
        let a = dropout_forward(&mut g, x, 0.5, Mode::Train, &mut rng()).unwrap();
        let b = dropout_forward(&mut g, x, 0.5, Mode::Train, &mut rng()).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }
}
