//! Single-step LSTM and LSTM-I cells with hand-written reverse mode.
//!
//! Activations are batch-leading (`batch × features`), so a gate
//! pre-activation is `x·W + h·U (+ m·V) + b` with `W: in × hidden`.
//! Gate arrays are always ordered forget, input, output, candidate.

use crate::error::{Error, Result};
use crate::numerics::{
    fan_in_scale, init_uniform, sigmoid_grad_from_output, sigmoid_scalar, tanh_grad_from_output,
    Matrix, Rng,
};

pub const GATES: [&str; 4] = ["f", "i", "o", "c"];
const FORGET: usize = 0;
const INPUT: usize = 1;
const OUTPUT: usize = 2;
const CANDIDATE: usize = 3;

/// Weights of a standard LSTM cell. `w[g]: input_dim × hidden`,
/// `u[g]: hidden × hidden`, `b[g]: 1 × hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w: [Matrix; 4],
    pub u: [Matrix; 4],
    pub b: [Matrix; 4],
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w: std::array::from_fn(|_| Matrix::zeros(input_dim, hidden)),
            u: std::array::from_fn(|_| Matrix::zeros(hidden, hidden)),
            b: std::array::from_fn(|_| Matrix::zeros(1, hidden)),
        }
    }

    /// Uniform ±1/√fan_in for every tensor; biases use the hidden width.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(input_dim, hidden);
        for g in 0..4 {
            p.w[g] = init_uniform(input_dim, hidden, rng, fan_in_scale(input_dim))?;
        }
        for g in 0..4 {
            p.u[g] = init_uniform(hidden, hidden, rng, fan_in_scale(hidden))?;
        }
        for g in 0..4 {
            p.b[g] = init_uniform(1, hidden, rng, fan_in_scale(hidden))?;
        }
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.w[0].rows()
    }

    pub fn hidden(&self) -> usize {
        self.u[0].rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.input_dim(), self.hidden());
        for g in 0..4 {
            expect_shape(&self.w[g], (d, h), "w")?;
            expect_shape(&self.u[g], (h, h), "u")?;
            expect_shape(&self.b[g], (1, h), "b")?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(12);
        for (prefix, group) in [("w", &self.w), ("u", &self.u), ("b", &self.b)] {
            for (g, m) in GATES.iter().zip(group.iter()) {
                out.push((format!("{prefix}_{g}"), m));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::with_capacity(12);
        for (prefix, group) in [("w", &mut self.w), ("u", &mut self.u), ("b", &mut self.b)] {
            for (g, m) in GATES.iter().zip(group.iter_mut()) {
                out.push((format!("{prefix}_{g}"), m));
            }
        }
        out
    }
}

/// Extra weights of LSTM-I: mask-to-gate `v[g]: input_dim × hidden` and the
/// imputation unit `x̃ = σ(C·w_imp + h·u_imp + b_imp)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationParams {
    pub v: [Matrix; 4],
    pub w_imp: Matrix,
    pub u_imp: Matrix,
    pub b_imp: Matrix,
}

impl ImputationParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            v: std::array::from_fn(|_| Matrix::zeros(input_dim, hidden)),
            w_imp: Matrix::zeros(hidden, input_dim),
            u_imp: Matrix::zeros(hidden, input_dim),
            b_imp: Matrix::zeros(1, input_dim),
        }
    }

    pub fn init(input_dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            v: [
                init_uniform(input_dim, hidden, rng, fan_in_scale(input_dim))?,
                init_uniform(input_dim, hidden, rng, fan_in_scale(input_dim))?,
                init_uniform(input_dim, hidden, rng, fan_in_scale(input_dim))?,
                init_uniform(input_dim, hidden, rng, fan_in_scale(input_dim))?,
            ],
            w_imp: init_uniform(hidden, input_dim, rng, fan_in_scale(hidden))?,
            u_imp: init_uniform(hidden, input_dim, rng, fan_in_scale(hidden))?,
            b_imp: init_uniform(1, input_dim, rng, fan_in_scale(hidden))?,
        })
    }

    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = GATES
            .iter()
            .zip(self.v.iter())
            .map(|(g, m)| (format!("v_{g}"), m))
            .collect();
        out.push(("w_imp".into(), &self.w_imp));
        out.push(("u_imp".into(), &self.u_imp));
        out.push(("b_imp".into(), &self.b_imp));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = GATES
            .iter()
            .zip(self.v.iter_mut())
            .map(|(g, m)| (format!("v_{g}"), m))
            .collect();
        out.push(("w_imp".into(), &mut self.w_imp));
        out.push(("u_imp".into(), &mut self.u_imp));
        out.push(("b_imp".into(), &mut self.b_imp));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmIParams {
    pub lstm: LstmParams,
    pub imputation: ImputationParams,
}

impl LstmIParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            lstm: LstmParams::zeros(input_dim, hidden),
            imputation: ImputationParams::zeros(input_dim, hidden),
        }
    }

    pub fn init(input_dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            lstm: LstmParams::init(input_dim, hidden, rng)?,
            imputation: ImputationParams::init(input_dim, hidden, rng)?,
        })
    }

    /// LSTM-I that behaves as `lstm` on fully observed input: V and the
    /// imputation unit are zero.
    pub fn from_lstm(lstm: LstmParams) -> Self {
        let imputation = ImputationParams::zeros(lstm.input_dim(), lstm.hidden());
        Self { lstm, imputation }
    }

    pub fn validate(&self) -> Result<()> {
        self.lstm.validate()?;
        let (d, h) = (self.lstm.input_dim(), self.lstm.hidden());
        for v in &self.imputation.v {
            expect_shape(v, (d, h), "v")?;
        }
        expect_shape(&self.imputation.w_imp, (h, d), "w_imp")?;
        expect_shape(&self.imputation.u_imp, (h, d), "u_imp")?;
        expect_shape(&self.imputation.b_imp, (1, d), "b_imp")
    }
}

/// Parameters of either cell kind.
#[derive(Debug, Clone, PartialEq)]
pub enum CellParams {
    Lstm(LstmParams),
    LstmI(LstmIParams),
}

impl CellParams {
    pub fn lstm(&self) -> &LstmParams {
        match self {
            CellParams::Lstm(p) => p,
            CellParams::LstmI(p) => &p.lstm,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.lstm().input_dim()
    }

    pub fn hidden(&self) -> usize {
        self.lstm().hidden()
    }

    pub fn is_imputing(&self) -> bool {
        matches!(self, CellParams::LstmI(_))
    }

    /// Same structure, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let (d, h) = (self.input_dim(), self.hidden());
        match self {
            CellParams::Lstm(_) => CellParams::Lstm(LstmParams::zeros(d, h)),
            CellParams::LstmI(_) => CellParams::LstmI(LstmIParams::zeros(d, h)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CellParams::Lstm(p) => p.validate(),
            CellParams::LstmI(p) => p.validate(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        match self {
            CellParams::Lstm(p) => p.tensors(),
            CellParams::LstmI(p) => {
                let mut out = p.lstm.tensors();
                out.extend(p.imputation.tensors());
                out
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        match self {
            CellParams::Lstm(p) => p.tensors_mut(),
            CellParams::LstmI(p) => {
                let mut out = p.lstm.tensors_mut();
                out.extend(p.imputation.tensors_mut());
                out
            }
        }
    }
}

fn expect_shape(m: &Matrix, want: (usize, usize), name: &'static str) -> Result<()> {
    if m.shape() != want {
        return Err(Error::Shape {
            op: name,
            left: m.shape(),
            right: want,
        });
    }
    Ok(())
}

/// Recurrent state `(h, C)`, each `batch × hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Matrix,
    pub c: Matrix,
}

impl CellState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: Matrix::zeros(batch, hidden),
            c: Matrix::zeros(batch, hidden),
        }
    }
}

/// Forward intermediates of one step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct CellTape {
    /// Input actually fed to the gates (after substitution for LSTM-I).
    pub x: Matrix,
    pub h_prev: Matrix,
    pub c_prev: Matrix,
    /// Activated gates: forget, input, output, candidate.
    pub gates: [Matrix; 4],
    pub tanh_c: Matrix,
    pub imputation: Option<ImputationTape>,
}

#[derive(Debug, Clone)]
pub struct ImputationTape {
    pub mask: Matrix,
    pub inferred: Matrix,
}

/// Output of one LSTM-I step.
#[derive(Debug, Clone)]
pub struct LstmIStep {
    pub state: CellState,
    /// `m⊙x + (1−m)⊙x̃`
    pub substituted: Matrix,
    /// Raw `x̃` at every position, observed or not.
    pub inferred: Matrix,
    pub tape: Option<CellTape>,
}

/// Gradients w.r.t. a step's inputs.
#[derive(Debug, Clone)]
pub struct StepGrads {
    pub x: Matrix,
    pub h_prev: Matrix,
    pub c_prev: Matrix,
}

fn check_step_inputs(params: &LstmParams, x: &Matrix, prev: &CellState) -> Result<()> {
    if x.cols() != params.input_dim() {
        return Err(Error::Shape {
            op: "cell input",
            left: x.shape(),
            right: params.w[0].shape(),
        });
    }
    let want = (x.rows(), params.hidden());
    expect_shape(&prev.h, want, "previous h")?;
    expect_shape(&prev.c, want, "previous C")?;
    if !x.is_finite() {
        return Err(Error::Numeric("non-finite cell input".into()));
    }
    Ok(())
}

fn core_step(
    params: &LstmParams,
    x: Matrix,
    mask_term: Option<(&Matrix, &[Matrix; 4])>,
    prev: &CellState,
    training: bool,
) -> Result<(CellState, Option<CellTape>)> {
    let mut gates: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(0, 0));
    for (g, gate) in gates.iter_mut().enumerate() {
        let mut a = x.matmul(&params.w[g])?;
        a.add_matmul(&prev.h, &params.u[g])?;
        if let Some((m, v)) = mask_term {
            a.add_matmul(m, &v[g])?;
        }
        a.add_row_broadcast(&params.b[g])?;
        *gate = if g == CANDIDATE {
            a.map(f64::tanh)
        } else {
            a.map(sigmoid_scalar)
        };
    }
    let f = gates[FORGET].data();
    let i = gates[INPUT].data();
    let cand = gates[CANDIDATE].data();
    let o = gates[OUTPUT].data();
    let mut c = Matrix::zeros_like(&prev.c);
    for (k, out) in c.data_mut().iter_mut().enumerate() {
        *out = f[k] * prev.c.data()[k] + i[k] * cand[k];
    }
    let tanh_c = c.map(f64::tanh);
    let mut h = Matrix::zeros_like(&c);
    for (k, out) in h.data_mut().iter_mut().enumerate() {
        *out = o[k] * tanh_c.data()[k];
    }
    if !c.is_finite() {
        return Err(Error::Numeric("cell state became non-finite".into()));
    }
    let tape = training.then(|| CellTape {
        x,
        h_prev: prev.h.clone(),
        c_prev: prev.c.clone(),
        gates,
        tanh_c,
        imputation: None,
    });
    Ok((CellState { h, c }, tape))
}

/// One LSTM step: gates, cell update `C = f⊙C₋ + i⊙C̃`, output `h = o⊙tanh(C)`.
pub fn lstm_step(
    params: &LstmParams,
    x: &Matrix,
    prev: &CellState,
    training: bool,
) -> Result<(CellState, Option<CellTape>)> {
    check_step_inputs(params, x, prev)?;
    core_step(params, x.clone(), None, prev, training)
}

/// One LSTM-I step. The imputation unit infers `x̃` from the previous state,
/// missing entries (mask 0) are replaced by `x̃`, and the mask feeds every
/// gate through `V`.
pub fn lstmi_step(
    params: &LstmIParams,
    x: &Matrix,
    mask: &Matrix,
    prev: &CellState,
    training: bool,
) -> Result<LstmIStep> {
    check_step_inputs(&params.lstm, x, prev)?;
    if mask.shape() != x.shape() {
        return Err(Error::Shape {
            op: "mask",
            left: mask.shape(),
            right: x.shape(),
        });
    }
    for (k, (&m, &v)) in mask.data().iter().zip(x.data()).enumerate() {
        if m != 0.0 && m != 1.0 {
            return Err(Error::Validation(format!(
                "mask entry {m} at flat index {k} is not 0 or 1"
            )));
        }
        if m == 0.0 && v != 0.0 {
            return Err(Error::Validation(format!(
                "missing input at flat index {k} holds {v}, expected the 0 sentinel"
            )));
        }
    }
    let imp = &params.imputation;
    let mut pre = prev.c.matmul(&imp.w_imp)?;
    pre.add_matmul(&prev.h, &imp.u_imp)?;
    pre.add_row_broadcast(&imp.b_imp)?;
    let inferred = pre.map(sigmoid_scalar);

    let mut substituted = Matrix::zeros_like(x);
    for (k, out) in substituted.data_mut().iter_mut().enumerate() {
        let m = mask.data()[k];
        *out = m * x.data()[k] + (1.0 - m) * inferred.data()[k];
    }
    let (state, tape) = core_step(
        &params.lstm,
        substituted.clone(),
        Some((mask, &imp.v)),
        prev,
        training,
    )?;
    let tape = tape.map(|mut t| {
        t.imputation = Some(ImputationTape {
            mask: mask.clone(),
            inferred: inferred.clone(),
        });
        t
    });
    Ok(LstmIStep {
        state,
        substituted,
        inferred,
        tape,
    })
}

/// Reverse of `core_step`. Accumulates into `grads` and returns the
/// gradients w.r.t. the gate input, previous h and previous C.
fn core_backward(
    tape: &CellTape,
    grad_h: &Matrix,
    grad_c: &Matrix,
    params: &LstmParams,
    grads: &mut LstmParams,
    mut grad_v: Option<&mut [Matrix; 4]>,
) -> Result<StepGrads> {
    let shape = tape.tanh_c.shape();
    expect_shape(grad_h, shape, "grad h")?;
    expect_shape(grad_c, shape, "grad C")?;

    let [f, i, o, cand] = &tape.gates;
    let n = shape.0 * shape.1;
    let mut pre: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(shape.0, shape.1));
    let mut c_prev_grad = Matrix::zeros(shape.0, shape.1);
    for k in 0..n {
        let dh = grad_h.data()[k];
        let tc = tape.tanh_c.data()[k];
        let (fk, ik, ok, ck) = (f.data()[k], i.data()[k], o.data()[k], cand.data()[k]);
        let dc = grad_c.data()[k] + dh * ok * tanh_grad_from_output(tc);
        pre[FORGET].data_mut()[k] = dc * tape.c_prev.data()[k] * sigmoid_grad_from_output(fk);
        pre[INPUT].data_mut()[k] = dc * ck * sigmoid_grad_from_output(ik);
        pre[OUTPUT].data_mut()[k] = dh * tc * sigmoid_grad_from_output(ok);
        pre[CANDIDATE].data_mut()[k] = dc * ik * tanh_grad_from_output(ck);
        c_prev_grad.data_mut()[k] = dc * fk;
    }

    let mut x_grad = Matrix::zeros_like(&tape.x);
    let mut h_prev_grad = Matrix::zeros_like(&tape.h_prev);
    for g in 0..4 {
        grads.w[g].add_matmul_tn(&tape.x, &pre[g])?;
        grads.u[g].add_matmul_tn(&tape.h_prev, &pre[g])?;
        grads.b[g].add_col_sums(&pre[g])?;
        if let (Some(v), Some(imp)) = (grad_v.as_deref_mut(), tape.imputation.as_ref()) {
            v[g].add_matmul_tn(&imp.mask, &pre[g])?;
        }
        x_grad.add_matmul_nt(&pre[g], &params.w[g])?;
        h_prev_grad.add_matmul_nt(&pre[g], &params.u[g])?;
    }
    Ok(StepGrads {
        x: x_grad,
        h_prev: h_prev_grad,
        c_prev: c_prev_grad,
    })
}

/// Reverse-mode step of [`lstm_step`].
pub fn lstm_step_backward(
    tape: &CellTape,
    grad_h: &Matrix,
    grad_c: &Matrix,
    params: &LstmParams,
    grads: &mut LstmParams,
) -> Result<StepGrads> {
    if tape.imputation.is_some() {
        return Err(Error::State("LSTM-I tape passed to LSTM backward".into()));
    }
    core_backward(tape, grad_h, grad_c, params, grads, None)
}

/// Reverse-mode step of [`lstmi_step`]. `grad_inferred` is any gradient
/// arriving directly at `x̃` (the imputation regularizer). The returned
/// `x` gradient is w.r.t. the raw input; the mask is never differentiated.
pub fn lstmi_step_backward(
    tape: &CellTape,
    grad_h: &Matrix,
    grad_c: &Matrix,
    grad_inferred: Option<&Matrix>,
    params: &LstmIParams,
    grads: &mut LstmIParams,
) -> Result<StepGrads> {
    let imp_tape = tape
        .imputation
        .as_ref()
        .ok_or_else(|| Error::State("plain LSTM tape passed to LSTM-I backward".into()))?;
    let mut out = core_backward(
        tape,
        grad_h,
        grad_c,
        &params.lstm,
        &mut grads.lstm,
        Some(&mut grads.imputation.v),
    )?;

    let mask = &imp_tape.mask;
    let inferred = &imp_tape.inferred;
    if let Some(g) = grad_inferred {
        expect_shape(g, inferred.shape(), "grad inferred")?;
    }
    let mut pre_imp = Matrix::zeros_like(inferred);
    let mut raw_x_grad = Matrix::zeros_like(&out.x);
    for k in 0..inferred.data().len() {
        let m = mask.data()[k];
        let dxs = out.x.data()[k];
        let ext = grad_inferred.map_or(0.0, |g| g.data()[k]);
        let d_inferred = dxs * (1.0 - m) + ext;
        pre_imp.data_mut()[k] = d_inferred * sigmoid_grad_from_output(inferred.data()[k]);
        raw_x_grad.data_mut()[k] = dxs * m;
    }
    let imp = &params.imputation;
    let g_imp = &mut grads.imputation;
    g_imp.w_imp.add_matmul_tn(&tape.c_prev, &pre_imp)?;
    g_imp.u_imp.add_matmul_tn(&tape.h_prev, &pre_imp)?;
    g_imp.b_imp.add_col_sums(&pre_imp)?;
    out.c_prev.add_matmul_nt(&pre_imp, &imp.w_imp)?;
    out.h_prev.add_matmul_nt(&pre_imp, &imp.u_imp)?;
    out.x = raw_x_grad;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut Rng, s: f64) -> Matrix {
        init_uniform(r, c, rng, s).unwrap()
    }

    fn random_state(b: usize, h: usize, rng: &mut Rng) -> CellState {
        CellState {
            h: rand_mat(b, h, rng, 0.9),
            c: rand_mat(b, h, rng, 1.5),
        }
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Per-element loops, written independently of the matrix helpers.
    fn naive_lstm(p: &LstmParams, x: &Matrix, prev: &CellState) -> (Vec<f64>, Vec<f64>) {
        let (b, d, h) = (x.rows(), p.input_dim(), p.hidden());
        let mut hs = vec![0.0; b * h];
        let mut cs = vec![0.0; b * h];
        for r in 0..b {
            for j in 0..h {
                let mut act = [0.0; 4];
                for g in 0..4 {
                    let mut s = p.b[g].get(0, j);
                    for k in 0..d {
                        s += x.get(r, k) * p.w[g].get(k, j);
                    }
                    for k in 0..h {
                        s += prev.h.get(r, k) * p.u[g].get(k, j);
                    }
                    act[g] = if g == 3 { s.tanh() } else { sig(s) };
                }
                let c = act[0] * prev.c.get(r, j) + act[1] * act[3];
                cs[r * h + j] = c;
                hs[r * h + j] = act[2] * c.tanh();
            }
        }
        (hs, cs)
    }

    #[test]
    fn zero_params_zero_state_gives_zero() {
        let p = LstmParams::zeros(3, 2);
        let x = Matrix::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let (s, tape) = lstm_step(&p, &x, &CellState::zeros(1, 2), false).unwrap();
        assert!(tape.is_none());
        assert_eq!(s.h, Matrix::zeros(1, 2));
        assert_eq!(s.c, Matrix::zeros(1, 2));
    }

    #[test]
    fn zero_params_halve_previous_cell() {
        let p = LstmParams::zeros(1, 1);
        let c = 0.8;
        let prev = CellState {
            h: Matrix::zeros(1, 1),
            c: Matrix::filled(1, 1, c),
        };
        let (s, _) = lstm_step(&p, &Matrix::filled(1, 1, 5.0), &prev, true).unwrap();
        assert_eq!(s.c.get(0, 0), 0.5 * c);
        assert!((s.h.get(0, 0) - 0.5 * (0.5 * c).tanh()).abs() < 1e-15);
    }

    #[test]
    fn matches_naive_loop_oracle() {
        let mut rng = Rng::new(21);
        let p = LstmParams::init(4, 3, &mut rng).unwrap();
        let x = rand_mat(5, 4, &mut rng, 2.0);
        let prev = random_state(5, 3, &mut rng);
        let (s, _) = lstm_step(&p, &x, &prev, false).unwrap();
        let (hs, cs) = naive_lstm(&p, &x, &prev);
        for (a, b) in s.h.data().iter().zip(&hs) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in s.c.data().iter().zip(&cs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        let p = LstmParams::zeros(2, 2);
        let prev = CellState::zeros(1, 2);
        assert!(matches!(
            lstm_step(&p, &Matrix::zeros(1, 3), &prev, false),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            lstm_step(&p, &Matrix::filled(1, 2, f64::NAN), &prev, false),
            Err(Error::Numeric(_))
        ));
        let pi = LstmIParams::zeros(2, 2);
        let bad_mask = Matrix::filled(1, 2, 0.5);
        assert!(matches!(
            lstmi_step(&pi, &Matrix::zeros(1, 2), &bad_mask, &prev, false),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn lstmi_full_mask_zero_v_equals_lstm_bitwise() {
        let mut rng = Rng::new(8);
        let lstm = LstmParams::init(3, 4, &mut rng).unwrap();
        let mut pi = LstmIParams::init(3, 4, &mut rng).unwrap();
        pi.lstm = lstm.clone();
        for v in &mut pi.imputation.v {
            *v = Matrix::zeros(3, 4);
        }
        let x = rand_mat(2, 3, &mut rng, 1.0);
        let prev = random_state(2, 4, &mut rng);
        let mask = Matrix::ones(2, 3);
        let a = lstmi_step(&pi, &x, &mask, &prev, false).unwrap();
        let (b, _) = lstm_step(&lstm, &x, &prev, false).unwrap();
        assert_eq!(a.state, b);
        assert_eq!(a.substituted, x);
    }

    #[test]
    fn missing_slot_takes_inferred_value() {
        let mut p = LstmIParams::zeros(3, 2);
        let logit = (0.7f64 / 0.3).ln();
        p.imputation.b_imp = Matrix::filled(1, 3, logit);
        let x = Matrix::from_rows(&[vec![0.2, 0.0, 0.9]]).unwrap();
        let mask = Matrix::from_rows(&[vec![1.0, 0.0, 1.0]]).unwrap();
        let out = lstmi_step(&p, &x, &mask, &CellState::zeros(1, 2), false).unwrap();
        assert!((out.inferred.get(0, 1) - 0.7).abs() < 1e-15);
        assert_eq!(out.substituted.get(0, 1), out.inferred.get(0, 1));
        assert_eq!(out.substituted.get(0, 0), 0.2);
        assert_eq!(out.substituted.get(0, 2), 0.9);
    }

    #[test]
    fn zero_params_infer_one_half() {
        let p = LstmIParams::zeros(2, 2);
        let x = Matrix::from_rows(&[vec![0.0, 0.4]]).unwrap();
        let mask = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let out = lstmi_step(&p, &x, &mask, &CellState::zeros(1, 2), false).unwrap();
        assert_eq!(out.inferred, Matrix::filled(1, 2, 0.5));
        assert_eq!(out.substituted.get(0, 0), 0.5);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(2);
        let p = LstmIParams::init(2, 3, &mut rng).unwrap();
        let x = Matrix::from_rows(&[vec![0.0, 0.4], vec![0.1, 0.2]]).unwrap();
        let mask = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let out = lstmi_step(&p, &x, &mask, &random_state(2, 3, &mut rng), true).unwrap();
        let mut grads = LstmIParams::zeros(2, 3);
        let z = Matrix::zeros(2, 3);
        lstmi_step_backward(out.tape.as_ref().unwrap(), &z, &z, None, &p, &mut grads).unwrap();
        assert_eq!(grads, LstmIParams::zeros(2, 3));
    }

    #[test]
    fn backward_rejects_wrong_tape_kind() {
        let p = LstmParams::zeros(1, 1);
        let (_, tape) = lstm_step(&p, &Matrix::zeros(1, 1), &CellState::zeros(1, 1), true).unwrap();
        let pi = LstmIParams::zeros(1, 1);
        let mut gi = LstmIParams::zeros(1, 1);
        let z = Matrix::zeros(1, 1);
        assert!(matches!(
            lstmi_step_backward(tape.as_ref().unwrap(), &z, &z, None, &pi, &mut gi),
            Err(Error::State(_))
        ));
    }

    /// Scalar objective of a single LSTM step: `Σ a⊙h + Σ c⊙C`.
    fn scalar_objective(p: &LstmParams, x: &Matrix, prev: &CellState, a: &Matrix, c: &Matrix) -> f64 {
        let (s, _) = lstm_step(p, x, prev, false).unwrap();
        s.h.hadamard(a).unwrap().sum() + s.c.hadamard(c).unwrap().sum()
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
    }

    #[test]
    fn scalar_cell_gradients_match_finite_differences() {
        let eps = 1e-5;
        for seed in 0..5 {
            let mut rng = Rng::new(100 + seed);
            let p = LstmParams::init(1, 1, &mut rng).unwrap();
            let x = rand_mat(1, 1, &mut rng, 1.0);
            let prev = random_state(1, 1, &mut rng);
            let a = rand_mat(1, 1, &mut rng, 1.0);
            let c = rand_mat(1, 1, &mut rng, 1.0);

            let (_, tape) = lstm_step(&p, &x, &prev, true).unwrap();
            let mut grads = LstmParams::zeros(1, 1);
            let sg = lstm_step_backward(tape.as_ref().unwrap(), &a, &c, &p, &mut grads).unwrap();

            let analytic: Vec<f64> = grads.tensors().iter().map(|(_, m)| m.get(0, 0)).collect();
            for (idx, an) in analytic.iter().enumerate() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.tensors_mut()[idx].1.data_mut()[0] += eps;
                minus.tensors_mut()[idx].1.data_mut()[0] -= eps;
                let num = (scalar_objective(&plus, &x, &prev, &a, &c)
                    - scalar_objective(&minus, &x, &prev, &a, &c))
                    / (2.0 * eps);
                assert!(rel_err(*an, num) < 1e-6, "param {idx}: {an} vs {num}");
            }
            let bump = |dx: f64, dh: f64, dc: f64| {
                let xx = x.map(|v| v + dx);
                let pp = CellState {
                    h: prev.h.map(|v| v + dh),
                    c: prev.c.map(|v| v + dc),
                };
                scalar_objective(&p, &xx, &pp, &a, &c)
            };
            let num_x = (bump(eps, 0.0, 0.0) - bump(-eps, 0.0, 0.0)) / (2.0 * eps);
            let num_h = (bump(0.0, eps, 0.0) - bump(0.0, -eps, 0.0)) / (2.0 * eps);
            let num_c = (bump(0.0, 0.0, eps) - bump(0.0, 0.0, -eps)) / (2.0 * eps);
            assert!(rel_err(sg.x.get(0, 0), num_x) < 1e-6);
            assert!(rel_err(sg.h_prev.get(0, 0), num_h) < 1e-6);
            assert!(rel_err(sg.c_prev.get(0, 0), num_c) < 1e-6);
        }
    }

    /// Three-step scalar LSTM-I unroll with an objective touching h, C and
    /// every inferred value.
    struct Unroll {
        xs: Vec<Matrix>,
        ms: Vec<Matrix>,
        wh: Matrix,
        wc: Matrix,
        wx: Vec<Matrix>,
    }

    impl Unroll {
        fn objective(&self, p: &LstmIParams) -> f64 {
            let mut state = CellState::zeros(1, 1);
            let mut total = 0.0;
            for t in 0..self.xs.len() {
                let out = lstmi_step(p, &self.xs[t], &self.ms[t], &state, false).unwrap();
                total += out.inferred.hadamard(&self.wx[t]).unwrap().sum();
                state = out.state;
            }
            total + state.h.hadamard(&self.wh).unwrap().sum() + state.c.hadamard(&self.wc).unwrap().sum()
        }

        fn gradient(&self, p: &LstmIParams) -> LstmIParams {
            let mut state = CellState::zeros(1, 1);
            let mut tapes = Vec::new();
            for t in 0..self.xs.len() {
                let out = lstmi_step(p, &self.xs[t], &self.ms[t], &state, true).unwrap();
                tapes.push(out.tape.unwrap());
                state = out.state;
            }
            let mut grads = LstmIParams::zeros(1, 1);
            let mut gh = self.wh.clone();
            let mut gc = self.wc.clone();
            for t in (0..self.xs.len()).rev() {
                let sg = lstmi_step_backward(&tapes[t], &gh, &gc, Some(&self.wx[t]), p, &mut grads)
                    .unwrap();
                gh = sg.h_prev;
                gc = sg.c_prev;
            }
            grads
        }
    }

    #[test]
    fn three_step_lstmi_unroll_matches_finite_differences() {
        let eps = 1e-5;
        for seed in 0..4 {
            let mut rng = Rng::new(300 + seed);
            let p = LstmIParams::init(1, 1, &mut rng).unwrap();
            let pattern = [1.0, 0.0, 1.0];
            let u = Unroll {
                xs: pattern
                    .iter()
                    .map(|&m| Matrix::filled(1, 1, if m == 1.0 { rng.uniform(0.1, 0.9) } else { 0.0 }))
                    .collect(),
                ms: pattern.iter().map(|&m| Matrix::filled(1, 1, m)).collect(),
                wh: rand_mat(1, 1, &mut rng, 1.0),
                wc: rand_mat(1, 1, &mut rng, 1.0),
                wx: (0..3).map(|_| rand_mat(1, 1, &mut rng, 1.0)).collect(),
            };
            let grads = u.gradient(&p);
            let analytic: Vec<f64> = CellParams::LstmI(grads)
                .tensors()
                .iter()
                .map(|(_, m)| m.get(0, 0))
                .collect();
            let mut worst: f64 = 0.0;
            for (idx, an) in analytic.iter().enumerate() {
                let mut plus = CellParams::LstmI(p.clone());
                let mut minus = CellParams::LstmI(p.clone());
                plus.tensors_mut()[idx].1.data_mut()[0] += eps;
                minus.tensors_mut()[idx].1.data_mut()[0] -= eps;
                let (CellParams::LstmI(plus), CellParams::LstmI(minus)) = (plus, minus) else {
                    unreachable!()
                };
                let num = (u.objective(&plus) - u.objective(&minus)) / (2.0 * eps);
                worst = worst.max(rel_err(*an, num));
            }
            assert!(worst < 1e-5, "seed {seed}: worst relative error {worst}");
        }
    }

    #[test]
    fn lstmi_reduction_gradients_equal_lstm() {
        let mut rng = Rng::new(77);
        let lstm = LstmParams::init(2, 3, &mut rng).unwrap();
        let pi = LstmIParams::from_lstm(lstm.clone());
        let x = rand_mat(2, 2, &mut rng, 1.0);
        let prev = random_state(2, 3, &mut rng);
        let gh = rand_mat(2, 3, &mut rng, 1.0);
        let gc = rand_mat(2, 3, &mut rng, 1.0);

        let (_, tape) = lstm_step(&lstm, &x, &prev, true).unwrap();
        let mut g_plain = LstmParams::zeros(2, 3);
        let sp = lstm_step_backward(tape.as_ref().unwrap(), &gh, &gc, &lstm, &mut g_plain).unwrap();

        let out = lstmi_step(&pi, &x, &Matrix::ones(2, 2), &prev, true).unwrap();
        let mut g_imp = LstmIParams::zeros(2, 3);
        let si = lstmi_step_backward(out.tape.as_ref().unwrap(), &gh, &gc, None, &pi, &mut g_imp)
            .unwrap();
        for ((_, a), (_, b)) in g_plain.tensors().iter().zip(g_imp.lstm.tensors().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        assert_eq!(sp.h_prev, si.h_prev);
        assert_eq!(sp.c_prev, si.c_prev);
    }

    proptest! {
        #[test]
        fn outputs_are_bounded(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let p = LstmIParams::init(3, 2, &mut rng).unwrap();
            let mut x = rand_mat(2, 3, &mut rng, 3.0);
            let mask = Matrix::new(2, 3, (0..6).map(|_| if rng.next_f64() < 0.3 { 0.0 } else { 1.0 }).collect()).unwrap();
            for k in 0..6 {
                if mask.data()[k] == 0.0 {
                    x.data_mut()[k] = 0.0;
                }
            }
            let out = lstmi_step(&p, &x, &mask, &random_state(2, 2, &mut rng), true).unwrap();
            prop_assert!(out.state.h.data().iter().all(|v| v.abs() < 1.0));
            let tape = out.tape.unwrap();
            for g in &tape.gates[..3] {
                prop_assert!(g.data().iter().all(|v| *v > 0.0 && *v < 1.0));
            }
            for k in 0..6 {
                if mask.data()[k] == 1.0 {
                    prop_assert_eq!(out.substituted.data()[k], x.data()[k]);
                }
            }
        }
    }
}
