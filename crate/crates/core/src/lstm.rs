//! Single LSTM layer: a real-valued reference and the bit-accurate
//! fixed-point datapath.
//!
//! ```text
//! f = sig(Wfx x + Wfh h + bf)     c' = f * c + i * g
//! i = sig(Wix x + Wih h + bi)     h' = o * tanh(c')
//! g = tanh(Wgx x + Wgh h + bg)
//! o = sig(Wox x + Woh h + bo)
//! ```
//!
//! No peephole connections. The fixed-point path reduces every gate row's
//! products (input part then recurrent part, column order) with
//! [`adder_tree_sum`] and adds the bias afterwards; the accelerator model
//! uses the same order, which is what makes the two bitwise comparable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{adder_tree_sum, ActivationTables, FixedSpec};
use crate::tensor::Matrix;

/// Gate order used everywhere: matrices, biases, memory interleave.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gate {
    Forget,
    Input,
    Cell,
    Output,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Forget, Gate::Input, Gate::Cell, Gate::Output];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        match self {
            Gate::Forget => 'f',
            Gate::Input => 'i',
            Gate::Cell => 'g',
            Gate::Output => 'o',
        }
    }

    pub fn from_letter(c: char) -> Option<Gate> {
        Gate::ALL.into_iter().find(|g| g.letter() == c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LstmDims {
    #[serde(rename = "X")]
    pub input: usize,
    #[serde(rename = "H")]
    pub hidden: usize,
}

impl LstmDims {
    pub fn new(input: usize, hidden: usize) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "LSTM dimensions must be positive (X={input}, H={hidden})"
            )));
        }
        Ok(Self { input, hidden })
    }

    /// Weights in all eight matrices.
    pub fn weight_count(&self) -> usize {
        4 * self.hidden * (self.input + self.hidden)
    }
}

/// The eight weight matrices and four biases, indexed by [`Gate`].
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    pub wx: [Matrix<T>; 4],
    pub wh: [Matrix<T>; 4],
    pub bias: [Vec<T>; 4],
}

impl<T: Copy + Default> LstmParams<T> {
    pub fn zeros(dims: LstmDims) -> Self {
        let (x, h) = (dims.input, dims.hidden);
        Self {
            wx: std::array::from_fn(|_| Matrix::zeros(h, x)),
            wh: std::array::from_fn(|_| Matrix::zeros(h, h)),
            bias: std::array::from_fn(|_| vec![T::default(); h]),
        }
    }
}

impl<T: Copy> LstmParams<T> {
    pub fn dims(&self) -> LstmDims {
        LstmDims {
            input: self.wx[0].cols(),
            hidden: self.wx[0].rows(),
        }
    }

    pub fn validate(&self) -> Result<LstmDims> {
        let d = self.dims();
        LstmDims::new(d.input, d.hidden)?;
        for g in 0..4 {
            check_shape("W_x", &self.wx[g], d.hidden, d.input)?;
            check_shape("W_h", &self.wh[g], d.hidden, d.hidden)?;
            check_len("bias", self.bias[g].len(), d.hidden)?;
        }
        Ok(d)
    }

    pub fn map<U: Copy>(&self, mut f: impl FnMut(T) -> U) -> LstmParams<U> {
        LstmParams {
            wx: std::array::from_fn(|g| self.wx[g].map(&mut f)),
            wh: std::array::from_fn(|g| self.wh[g].map(&mut f)),
            bias: std::array::from_fn(|g| self.bias[g].iter().copied().map(&mut f).collect()),
        }
    }
}

/// Fixed-point parameters: raw words plus their shared format.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedParams {
    pub spec: FixedSpec,
    pub params: LstmParams<i32>,
}

pub fn quantize_params(params: &LstmParams<f64>, spec: FixedSpec) -> FixedParams {
    FixedParams {
        spec,
        params: params.map(|w| spec.quantize(w)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Copy + Default> LstmState<T> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![T::default(); hidden],
            c: vec![T::default(); hidden],
        }
    }
}

pub(crate) fn check_len(context: &'static str, found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}

fn check_shape<T: Copy>(
    context: &'static str,
    m: &Matrix<T>,
    rows: usize,
    cols: usize,
) -> Result<()> {
    check_len(context, m.rows(), rows)?;
    check_len(context, m.cols(), cols)
}

fn check_state<T>(state: &LstmState<T>, hidden: usize) -> Result<()> {
    check_len("state h", state.h.len(), hidden)?;
    check_len("state c", state.c.len(), hidden)
}

pub fn mxv(w: &Matrix<f64>, v: &[f64]) -> Result<Vec<f64>> {
    check_len("mxv operand", v.len(), w.cols())?;
    Ok((0..w.rows())
        .map(|r| w.row(r).iter().zip(v).fold(0.0, |acc, (a, b)| acc + a * b))
        .collect())
}

/// Fixed-point product with the canonical adder-tree reduction per row.
pub fn mxv_fixed(spec: FixedSpec, w: &Matrix<i32>, v: &[i32]) -> Result<Vec<i32>> {
    check_len("mxv operand", v.len(), w.cols())?;
    let mut terms = Vec::with_capacity(w.cols());
    Ok((0..w.rows())
        .map(|r| {
            terms.clear();
            terms.extend(w.row(r).iter().zip(v).map(|(&a, &b)| spec.mul(a, b)));
            adder_tree_sum(spec, &terms)
        })
        .collect())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gate_preactivations_float(
    params: &LstmParams<f64>,
    x: &[f64],
    h: &[f64],
) -> Result<[Vec<f64>; 4]> {
    let d = params.dims();
    check_len("input x", x.len(), d.input)?;
    check_len("state h", h.len(), d.hidden)?;
    let mut out: [Vec<f64>; 4] = Default::default();
    for g in 0..4 {
        let wx = mxv(&params.wx[g], x)?;
        let wh = mxv(&params.wh[g], h)?;
        out[g] = (0..d.hidden)
            .map(|r| wx[r] + wh[r] + params.bias[g][r])
            .collect();
    }
    Ok(out)
}

pub fn lstm_step_float(
    params: &LstmParams<f64>,
    x: &[f64],
    state: &LstmState<f64>,
) -> Result<LstmState<f64>> {
    let d = params.dims();
    check_state(state, d.hidden)?;
    let [pf, pi, pg, po] = gate_preactivations_float(params, x, &state.h)?;
    let mut next = LstmState::zeros(d.hidden);
    for r in 0..d.hidden {
        let f = sigmoid(pf[r]);
        let i = sigmoid(pi[r]);
        let g = pg[r].tanh();
        let o = sigmoid(po[r]);
        next.c[r] = f * state.c[r] + i * g;
        next.h[r] = o * next.c[r].tanh();
    }
    Ok(next)
}

/// Gate pre-activations on the fixed-point path, in [`Gate`] order.
pub fn gate_preactivations_fixed(
    q: &FixedParams,
    x: &[i32],
    h: &[i32],
) -> Result<[Vec<i32>; 4]> {
    let spec = q.spec;
    let d = q.params.dims();
    check_len("input x", x.len(), d.input)?;
    check_len("state h", h.len(), d.hidden)?;
    let mut terms = Vec::with_capacity(d.input + d.hidden);
    let mut out: [Vec<i32>; 4] = Default::default();
    for g in 0..4 {
        let (wx, wh) = (&q.params.wx[g], &q.params.wh[g]);
        out[g] = (0..d.hidden)
            .map(|r| {
                terms.clear();
                terms.extend(wx.row(r).iter().zip(x).map(|(&w, &v)| spec.mul(w, v)));
                terms.extend(wh.row(r).iter().zip(h).map(|(&w, &v)| spec.mul(w, v)));
                spec.add(adder_tree_sum(spec, &terms), q.params.bias[g][r])
            })
            .collect();
    }
    Ok(out)
}

pub fn lstm_step_fixed(
    q: &FixedParams,
    x: &[i32],
    state: &LstmState<i32>,
    tables: &ActivationTables,
) -> Result<LstmState<i32>> {
    let spec = q.spec;
    if tables.spec() != spec {
        return Err(Error::SpecMismatch {
            left: spec,
            right: tables.spec(),
        });
    }
    let d = q.params.dims();
    check_state(state, d.hidden)?;
    let [pf, pi, pg, po] = gate_preactivations_fixed(q, x, &state.h)?;
    let mut next = LstmState::zeros(d.hidden);
    for r in 0..d.hidden {
        let f = tables.sigmoid.eval_raw(pf[r]);
        let i = tables.sigmoid.eval_raw(pi[r]);
        let g = tables.tanh.eval_raw(pg[r]);
        let o = tables.sigmoid.eval_raw(po[r]);
        let c = spec.add(spec.mul(f, state.c[r]), spec.mul(i, g));
        next.c[r] = c;
        next.h[r] = spec.mul(o, tables.tanh.eval_raw(c));
    }
    Ok(next)
}

/// States after each of the `inputs.len()` steps.
pub fn lstm_run_float(
    params: &LstmParams<f64>,
    inputs: &[Vec<f64>],
    init: Option<LstmState<f64>>,
) -> Result<Vec<LstmState<f64>>> {
    let mut state = init.unwrap_or_else(|| LstmState::zeros(params.dims().hidden));
    let mut out = Vec::with_capacity(inputs.len());
    for x in inputs {
        state = lstm_step_float(params, x, &state)?;
        out.push(state.clone());
    }
    Ok(out)
}

pub fn lstm_run_fixed(
    q: &FixedParams,
    inputs: &[Vec<i32>],
    init: Option<LstmState<i32>>,
    tables: &ActivationTables,
) -> Result<Vec<LstmState<i32>>> {
    let mut state = init.unwrap_or_else(|| LstmState::zeros(q.params.dims().hidden));
    let mut out = Vec::with_capacity(inputs.len());
    for x in inputs {
        state = lstm_step_fixed(q, x, &state, tables)?;
        out.push(state.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::PwlSettings;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(dims: LstmDims, scale: f64, rng: &mut ChaCha8Rng) -> LstmParams<f64> {
        LstmParams::<f64>::zeros(dims).map(|_| rng.gen_range(-scale..scale))
    }

    fn tables(spec: FixedSpec) -> ActivationTables {
        ActivationTables::new(spec, PwlSettings::default()).unwrap()
    }

    #[test]
    fn mxv_examples() {
        let id = Matrix::from_fn(3, 3, |r, c| if r == c { 1.0 } else { 0.0 });
        assert_eq!(mxv(&id, &[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let z = Matrix::<f64>::zeros(2, 3);
        assert_eq!(mxv(&z, &[4.0, 5.0, 6.0]).unwrap(), vec![0.0, 0.0]);
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(mxv(&m, &[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
        assert!(mxv(&m, &[1.0]).is_err());
    }

    #[test]
    fn mxv_fixed_matches_hand_sum() {
        let s = FixedSpec::Q4_12;
        let m = Matrix::from_rows(&[vec![4096, 8192], vec![-4096, 2048]]).unwrap();
        assert_eq!(mxv_fixed(s, &m, &[4096, 4096]).unwrap(), vec![12288, -2048]);
    }

    #[test]
    fn zero_params_float_step() {
        let dims = LstmDims::new(3, 4).unwrap();
        let p = LstmParams::<f64>::zeros(dims);
        let s = lstm_step_float(&p, &[0.3, -0.2, 0.9], &LstmState::zeros(4)).unwrap();
        assert!(s.c.iter().all(|&c| c == 0.0));
        assert!(s.h.iter().all(|&h| h == 0.0));
        let pre = gate_preactivations_float(&p, &[1.0; 3], &[0.0; 4]).unwrap();
        assert!(pre.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn forget_gate_saturation_keeps_cell() {
        let dims = LstmDims::new(1, 2).unwrap();
        let mut p = LstmParams::<f64>::zeros(dims);
        p.bias[Gate::Forget.index()] = vec![60.0; 2];
        let state = LstmState {
            h: vec![0.0; 2],
            c: vec![0.7, -0.4],
        };
        let s = lstm_step_float(&p, &[0.0], &state).unwrap();
        // i = 0.5, g = 0 so c' = f * c with f -> 1
        assert!((s.c[0] - 0.7).abs() < 1e-12);
        assert!((s.c[1] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn zero_params_fixed_step() {
        let spec = FixedSpec::Q4_12;
        let dims = LstmDims::new(2, 3).unwrap();
        let q = quantize_params(&LstmParams::zeros(dims), spec);
        let s = lstm_step_fixed(&q, &[0, 0], &LstmState::zeros(3), &tables(spec)).unwrap();
        assert_eq!(s.h, vec![0; 3]);
        assert_eq!(s.c, vec![0; 3]);
    }

    // Frozen from an independent integer trace of the datapath rules
    // (chord coefficients, arithmetic-shift products, saturating adds) for
    // X = H = 1, all weights 1.0, zero biases, x = 0.25, h = c = 0.
    #[test]
    fn single_neuron_hand_trace() {
        let spec = FixedSpec::Q4_12;
        let dims = LstmDims::new(1, 1).unwrap();
        let mut p = LstmParams::<f64>::zeros(dims);
        for g in 0..4 {
            p.wx[g].set(0, 0, 1.0);
            p.wh[g].set(0, 0, 1.0);
        }
        let q = quantize_params(&p, spec);
        let x = [spec.quantize(0.25)];
        let s = lstm_step_fixed(&q, &x, &LstmState::zeros(1), &tables(spec)).unwrap();
        assert_eq!(s.c, vec![HAND_C]);
        assert_eq!(s.h, vec![HAND_H]);
    }
    const HAND_C: i32 = 563;
    const HAND_H: i32 = 309;

    #[test]
    fn float_gates_and_output_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let dims = LstmDims::new(rng.gen_range(1..6), rng.gen_range(1..6)).unwrap();
            let p = random_params(dims, 2.0, &mut rng);
            let x: Vec<f64> = (0..dims.input).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut st = LstmState::zeros(dims.hidden);
            for _ in 0..5 {
                st = lstm_step_float(&p, &x, &st).unwrap();
                assert!(st.h.iter().all(|h| h.abs() < 1.0));
            }
        }
    }

    #[test]
    fn fixed_tracks_float_on_unit_norm_rows() {
        let spec = FixedSpec::Q4_12;
        let t = tables(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let dims = LstmDims::new(8, 8).unwrap();
            let mut p = random_params(dims, 1.0, &mut rng);
            for g in 0..4 {
                for m in [&mut p.wx[g], &mut p.wh[g]] {
                    for r in 0..m.rows() {
                        let norm = m.row(r).iter().map(|w| w * w).sum::<f64>().sqrt();
                        m.row_mut(r).iter_mut().for_each(|w| *w /= norm);
                    }
                }
            }
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h0: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.9..0.9)).collect();
            let c0: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fs = lstm_step_float(&p, &x, &LstmState { h: h0.clone(), c: c0.clone() }).unwrap();
            let q = quantize_params(&p, spec);
            let qs = lstm_step_fixed(
                &q,
                &spec.quantize_slice(&x),
                &LstmState {
                    h: spec.quantize_slice(&h0),
                    c: spec.quantize_slice(&c0),
                },
                &t,
            )
            .unwrap();
            for r in 0..8 {
                worst = worst.max((spec.to_real(qs.h[r]) - fs.h[r]).abs());
                worst = worst.max((spec.to_real(qs.c[r]) - fs.c[r]).abs());
            }
        }
        assert!(worst <= 0.05, "max |fixed - float| = {worst}");
    }

    #[test]
    fn wide_format_converges_to_float() {
        let spec = FixedSpec::new(32, 28).unwrap();
        let t = ActivationTables::new(
            spec,
            PwlSettings {
                segments: 4096,
                domain_lo: -7.5,
                domain_hi: 7.5,
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let dims = LstmDims::new(3, 3).unwrap();
            let p = random_params(dims, 0.5, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fs = lstm_step_float(&p, &x, &LstmState::zeros(3)).unwrap();
            let q = quantize_params(&p, spec);
            let qs = lstm_step_fixed(&q, &spec.quantize_slice(&x), &LstmState::zeros(3), &t).unwrap();
            for r in 0..3 {
                assert!((spec.to_real(qs.h[r]) - fs.h[r]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fixed_path_is_deterministic() {
        let spec = FixedSpec::Q4_12;
        let t = tables(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = LstmDims::new(5, 7).unwrap();
        let q = quantize_params(&random_params(dims, 1.0, &mut rng), spec);
        let xs: Vec<Vec<i32>> = (0..4)
            .map(|_| (0..5).map(|_| rng.gen_range(-4096..4096)).collect())
            .collect();
        let a = lstm_run_fixed(&q, &xs, None, &t).unwrap();
        let b = lstm_run_fixed(&q, &xs, None, &t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn run_composes_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = LstmDims::new(2, 3).unwrap();
        let p = random_params(dims, 1.0, &mut rng);
        let xs: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.gen(), rng.gen()]).collect();
        let run = lstm_run_float(&p, &xs, None).unwrap();
        let mut st = LstmState::zeros(3);
        for (t, x) in xs.iter().enumerate() {
            st = lstm_step_float(&p, x, &st).unwrap();
            assert_eq!(run[t], st);
        }
        let one = lstm_run_float(&p, &xs[..1], None).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0], lstm_step_float(&p, &xs[0], &LstmState::zeros(3)).unwrap());

        let zero = LstmParams::<f64>::zeros(dims);
        let traj = lstm_run_float(&zero, &vec![vec![0.0; 2]; 6], None).unwrap();
        assert!(traj.iter().all(|s| s.h.iter().all(|&h| h == 0.0)));
    }

    #[test]
    fn dimension_errors() {
        let dims = LstmDims::new(2, 3).unwrap();
        let p = LstmParams::<f64>::zeros(dims);
        assert!(lstm_step_float(&p, &[0.0], &LstmState::zeros(3)).is_err());
        assert!(lstm_step_float(&p, &[0.0; 2], &LstmState::zeros(2)).is_err());
        assert!(LstmDims::new(0, 3).is_err());
        let spec = FixedSpec::Q4_12;
        let q = quantize_params(&p, spec);
        let other = tables(FixedSpec::new(16, 8).unwrap());
        assert!(matches!(
            lstm_step_fixed(&q, &[0; 2], &LstmState::zeros(3), &other),
            Err(Error::SpecMismatch { .. })
        ));
    }
}
