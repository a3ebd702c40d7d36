//! Unrolling cells over a window: unidirectional layers and bidirectional
//! layers whose two directions are merged step by step.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::cells::{
    lstm_step, lstm_step_backward, lstmi_step, lstmi_step_backward, CellParams, CellState,
    CellTape, LstmIParams, LstmParams,
};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Lstm,
    LstmI,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Uni,
    Bi,
}

/// How a bidirectional layer merges its two per-step outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Average,
    Sum,
    Concat,
}

impl FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" | "avg" => Ok(Combine::Average),
            "sum" => Ok(Combine::Sum),
            "concat" => Ok(Combine::Concat),
            other => Err(Error::Config(format!(
                "unknown combine mode '{other}' (expected average, sum or concat)"
            ))),
        }
    }
}

impl fmt::Display for Combine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combine::Average => "average",
            Combine::Sum => "sum",
            Combine::Concat => "concat",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub kind: CellKind,
    pub direction: Direction,
    pub input_dim: usize,
    pub hidden: usize,
    pub combine: Combine,
}

impl LayerDescriptor {
    pub fn out_width(&self) -> usize {
        match (self.direction, self.combine) {
            (Direction::Bi, Combine::Concat) => 2 * self.hidden,
            _ => self.hidden,
        }
    }

    pub fn is_imputing(&self) -> bool {
        self.kind == CellKind::LstmI
    }

    /// Short label used by the model-spec grammar.
    pub fn label(&self) -> &'static str {
        match (self.kind, self.direction) {
            (CellKind::Lstm, Direction::Uni) => "lstm",
            (CellKind::Lstm, Direction::Bi) => "bdlstm",
            (CellKind::LstmI, Direction::Uni) => "lstmi",
            (CellKind::LstmI, Direction::Bi) => "bdlstmi",
        }
    }

    fn cell_zeros(&self) -> CellParams {
        match self.kind {
            CellKind::Lstm => CellParams::Lstm(LstmParams::zeros(self.input_dim, self.hidden)),
            CellKind::LstmI => CellParams::LstmI(LstmIParams::zeros(self.input_dim, self.hidden)),
        }
    }

    fn cell_init(&self, rng: &mut Rng) -> Result<CellParams> {
        Ok(match self.kind {
            CellKind::Lstm => CellParams::Lstm(LstmParams::init(self.input_dim, self.hidden, rng)?),
            CellKind::LstmI => {
                CellParams::LstmI(LstmIParams::init(self.input_dim, self.hidden, rng)?)
            }
        })
    }

    pub fn zero_params(&self) -> LayerParams {
        LayerParams {
            forward: self.cell_zeros(),
            backward: (self.direction == Direction::Bi).then(|| self.cell_zeros()),
        }
    }

    /// Random parameters; the backward direction draws after the forward one.
    pub fn init_params(&self, rng: &mut Rng) -> Result<LayerParams> {
        let forward = self.cell_init(rng)?;
        let backward = match self.direction {
            Direction::Bi => Some(self.cell_init(rng)?),
            Direction::Uni => None,
        };
        Ok(LayerParams { forward, backward })
    }
}

/// Parameters of one layer. `backward` is present iff the layer is bidirectional.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub forward: CellParams,
    pub backward: Option<CellParams>,
}

impl LayerParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            forward: self.forward.zeros_like(),
            backward: self.backward.as_ref().map(CellParams::zeros_like),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = self
            .forward
            .tensors()
            .into_iter()
            .map(|(n, m)| (format!("fwd.{n}"), m))
            .collect();
        if let Some(b) = &self.backward {
            out.extend(b.tensors().into_iter().map(|(n, m)| (format!("bwd.{n}"), m)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = self
            .forward
            .tensors_mut()
            .into_iter()
            .map(|(n, m)| (format!("fwd.{n}"), m))
            .collect();
        if let Some(b) = &mut self.backward {
            out.extend(b.tensors_mut().into_iter().map(|(n, m)| (format!("bwd.{n}"), m)));
        }
        out
    }

    /// Checks that kinds, directions and shapes agree with `desc`.
    pub fn validate(&self, desc: &LayerDescriptor) -> Result<()> {
        let expected = desc.zero_params();
        let (a, b) = (expected.tensors(), self.tensors());
        let mismatch = a.len() != b.len()
            || a.iter()
                .zip(&b)
                .any(|((na, ma), (nb, mb))| na != nb || ma.shape() != mb.shape());
        if mismatch {
            let want: Vec<String> = a.iter().map(|(n, m)| format!("{n}{:?}", m.shape())).collect();
            let got: Vec<String> = b.iter().map(|(n, m)| format!("{n}{:?}", m.shape())).collect();
            return Err(Error::Config(format!(
                "{} layer parameters do not match descriptor: expected [{}], got [{}]",
                desc.label(),
                want.join(", "),
                got.join(", ")
            )));
        }
        self.forward.validate()?;
        if let Some(b) = &self.backward {
            b.validate()?;
        }
        Ok(())
    }
}

/// Outputs of one directional pass, indexed by time (not processing order).
#[derive(Debug, Clone)]
struct DirectionPass {
    h: Vec<Matrix>,
    inferred: Option<Vec<Matrix>>,
    tapes: Option<Vec<CellTape>>,
}

#[derive(Debug, Clone)]
struct LayerTapes {
    forward: Vec<CellTape>,
    backward: Option<Vec<CellTape>>,
}

/// Per-step outputs of a layer plus what its backward pass needs.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub sequence: Vec<Matrix>,
    pub forward_inferred: Option<Vec<Matrix>>,
    pub backward_inferred: Option<Vec<Matrix>>,
    tapes: Option<LayerTapes>,
}

impl LayerOutput {
    pub fn has_tapes(&self) -> bool {
        self.tapes.is_some()
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }
}

fn thread_budget() -> usize {
    static BUDGET: OnceLock<usize> = OnceLock::new();
    *BUDGET.get_or_init(|| {
        std::env::var("RNNIF_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(1)
    })
}

fn check_inputs(
    desc: &LayerDescriptor,
    inputs: &[Matrix],
    masks: Option<&[Matrix]>,
) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Config("layer input window is empty".into()));
    }
    let batch = inputs[0].rows();
    for x in inputs {
        if x.shape() != (batch, desc.input_dim) {
            return Err(Error::Shape {
                op: "layer input",
                left: x.shape(),
                right: (batch, desc.input_dim),
            });
        }
    }
    match (desc.kind, masks) {
        (CellKind::Lstm, Some(_)) => Err(Error::Config(
            "masks were supplied to a plain LSTM layer".into(),
        )),
        (CellKind::LstmI, None) => Err(Error::Config(
            "an imputation layer needs a mask for every step".into(),
        )),
        (CellKind::LstmI, Some(m)) if m.len() != inputs.len() => Err(Error::Config(format!(
            "{} masks for {} input steps",
            m.len(),
            inputs.len()
        ))),
        _ => Ok(()),
    }
}

fn run_direction(
    params: &CellParams,
    inputs: &[Matrix],
    masks: Option<&[Matrix]>,
    reverse: bool,
    training: bool,
) -> Result<DirectionPass> {
    let steps = inputs.len();
    let mut state = CellState::zeros(inputs[0].rows(), params.hidden());
    let mut h: Vec<Option<Matrix>> = vec![None; steps];
    let mut tapes: Vec<Option<CellTape>> = vec![None; steps];
    let mut inferred: Vec<Option<Matrix>> = vec![None; steps];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        match params {
            CellParams::Lstm(p) => {
                let (next, tape) = lstm_step(p, &inputs[t], &state, training)?;
                tapes[t] = tape;
                state = next;
            }
            CellParams::LstmI(p) => {
                let masks = masks.expect("masks checked by caller");
                let step = lstmi_step(p, &inputs[t], &masks[t], &state, training)?;
                tapes[t] = step.tape;
                inferred[t] = Some(step.inferred);
                state = step.state;
            }
        }
        h[t] = Some(state.h.clone());
    }
    Ok(DirectionPass {
        h: h.into_iter().map(|m| m.expect("every step visited")).collect(),
        inferred: params
            .is_imputing()
            .then(|| inferred.into_iter().map(|m| m.expect("every step visited")).collect()),
        tapes: training.then(|| tapes.into_iter().map(|m| m.expect("training tape")).collect()),
    })
}

fn check_kind(desc: &LayerDescriptor, params: &CellParams) -> Result<()> {
    if params.is_imputing() != desc.is_imputing()
        || params.input_dim() != desc.input_dim
        || params.hidden() != desc.hidden
    {
        return Err(Error::Config(format!(
            "{} descriptor ({}→{}) does not match its parameters ({}→{}, imputing={})",
            desc.label(),
            desc.input_dim,
            desc.hidden,
            params.input_dim(),
            params.hidden(),
            params.is_imputing()
        )));
    }
    Ok(())
}

/// Runs a unidirectional layer over the window, chronologically, from zero state.
pub fn run_uni(
    desc: &LayerDescriptor,
    params: &CellParams,
    inputs: &[Matrix],
    masks: Option<&[Matrix]>,
    training: bool,
) -> Result<LayerOutput> {
    check_inputs(desc, inputs, masks)?;
    check_kind(desc, params)?;
    let pass = run_direction(params, inputs, masks, false, training)?;
    Ok(LayerOutput {
        sequence: pass.h,
        forward_inferred: pass.inferred,
        backward_inferred: None,
        tapes: pass.tapes.map(|forward| LayerTapes {
            forward,
            backward: None,
        }),
    })
}

fn combine(mode: Combine, fwd: &Matrix, bwd: &Matrix) -> Result<Matrix> {
    match mode {
        Combine::Average => fwd.zip_map(bwd, "combine", |a, b| (a + b) / 2.0),
        Combine::Sum => fwd.add(bwd),
        Combine::Concat => Matrix::hconcat(fwd, bwd),
    }
}

/// Runs a bidirectional layer: one pass over t = 1..T, an independent pass
/// over t = T..1, and output `y_t = ⊕(→h_t, ←h_t)` aligned by time index.
/// Each direction substitutes missing inputs with its own inferred values.
pub fn run_bi(
    desc: &LayerDescriptor,
    fwd_params: &CellParams,
    bwd_params: &CellParams,
    inputs: &[Matrix],
    masks: Option<&[Matrix]>,
    training: bool,
) -> Result<LayerOutput> {
    check_inputs(desc, inputs, masks)?;
    check_kind(desc, fwd_params)?;
    check_kind(desc, bwd_params)?;
    let (fwd, bwd) = if thread_budget() > 1 {
        std::thread::scope(|s| {
            let handle = s.spawn(|| run_direction(bwd_params, inputs, masks, true, training));
            let fwd = run_direction(fwd_params, inputs, masks, false, training);
            (fwd, handle.join().expect("backward direction panicked"))
        })
    } else {
        (
            run_direction(fwd_params, inputs, masks, false, training),
            run_direction(bwd_params, inputs, masks, true, training),
        )
    };
    let (fwd, bwd) = (fwd?, bwd?);
    let sequence = fwd
        .h
        .iter()
        .zip(&bwd.h)
        .map(|(f, b)| combine(desc.combine, f, b))
        .collect::<Result<Vec<_>>>()?;
    let tapes = match (fwd.tapes, bwd.tapes) {
        (Some(forward), Some(backward)) => Some(LayerTapes {
            forward,
            backward: Some(backward),
        }),
        _ => None,
    };
    Ok(LayerOutput {
        sequence,
        forward_inferred: fwd.inferred,
        backward_inferred: bwd.inferred,
        tapes,
    })
}

/// Dispatches to [`run_uni`] or [`run_bi`] according to `desc`.
pub fn run_layer(
    desc: &LayerDescriptor,
    params: &LayerParams,
    inputs: &[Matrix],
    masks: Option<&[Matrix]>,
    training: bool,
) -> Result<LayerOutput> {
    match (desc.direction, &params.backward) {
        (Direction::Uni, None) => run_uni(desc, &params.forward, inputs, masks, training),
        (Direction::Bi, Some(bwd)) => run_bi(desc, &params.forward, bwd, inputs, masks, training),
        _ => Err(Error::Config(format!(
            "{} layer has the wrong number of directional parameter sets",
            desc.label()
        ))),
    }
}

/// BPTT through one direction. `grad_h` and `grad_inferred` are indexed by
/// time; the returned input gradients are too.
fn direction_backward(
    params: &CellParams,
    tapes: &[CellTape],
    grad_h: &[Matrix],
    grad_inferred: Option<&[Matrix]>,
    reverse: bool,
    grads: &mut CellParams,
) -> Result<Vec<Matrix>> {
    let steps = tapes.len();
    let shape = tapes[0].tanh_c.shape();
    let mut carry_h = Matrix::zeros(shape.0, shape.1);
    let mut carry_c = Matrix::zeros(shape.0, shape.1);
    let mut grad_x: Vec<Option<Matrix>> = vec![None; steps];
    // reverse of the processing order
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new(0..steps)
    } else {
        Box::new((0..steps).rev())
    };
    for t in order {
        let mut gh = grad_h[t].clone();
        gh.add_assign(&carry_h)?;
        let sg = match (params, grads as &mut CellParams) {
            (CellParams::Lstm(p), CellParams::Lstm(g)) => {
                lstm_step_backward(&tapes[t], &gh, &carry_c, p, g)?
            }
            (CellParams::LstmI(p), CellParams::LstmI(g)) => lstmi_step_backward(
                &tapes[t],
                &gh,
                &carry_c,
                grad_inferred.map(|gi| &gi[t]),
                p,
                g,
            )?,
            _ => return Err(Error::State("gradient accumulator kind mismatch".into())),
        };
        carry_h = sg.h_prev;
        carry_c = sg.c_prev;
        grad_x[t] = Some(sg.x);
    }
    Ok(grad_x.into_iter().map(|m| m.expect("every step visited")).collect())
}

fn check_grad_sequence(output: &LayerOutput, grad_sequence: &[Matrix]) -> Result<()> {
    if grad_sequence.len() != output.sequence.len() {
        return Err(Error::Config(format!(
            "gradient sequence has {} steps, layer output has {}",
            grad_sequence.len(),
            output.sequence.len()
        )));
    }
    for (g, y) in grad_sequence.iter().zip(&output.sequence) {
        if g.shape() != y.shape() {
            return Err(Error::Shape {
                op: "layer output gradient",
                left: g.shape(),
                right: y.shape(),
            });
        }
    }
    Ok(())
}

/// Gradients of a unidirectional layer: `(parameter grads, input grads)`.
/// `grad_inferred` carries gradients arriving directly at the inferred slab.
pub fn run_uni_backward(
    desc: &LayerDescriptor,
    params: &CellParams,
    output: &LayerOutput,
    grad_sequence: &[Matrix],
    grad_inferred: Option<&[Matrix]>,
) -> Result<(CellParams, Vec<Matrix>)> {
    check_kind(desc, params)?;
    let tapes = output
        .tapes
        .as_ref()
        .ok_or_else(|| Error::State("layer was not run in training mode".into()))?;
    check_grad_sequence(output, grad_sequence)?;
    let mut grads = params.zeros_like();
    let gx = direction_backward(params, &tapes.forward, grad_sequence, grad_inferred, false, &mut grads)?;
    Ok((grads, gx))
}

/// Gradients of a bidirectional layer: `(forward grads, backward grads, input grads)`.
pub fn run_bi_backward(
    desc: &LayerDescriptor,
    fwd_params: &CellParams,
    bwd_params: &CellParams,
    output: &LayerOutput,
    grad_sequence: &[Matrix],
    grad_fwd_inferred: Option<&[Matrix]>,
    grad_bwd_inferred: Option<&[Matrix]>,
) -> Result<(CellParams, CellParams, Vec<Matrix>)> {
    check_kind(desc, fwd_params)?;
    check_kind(desc, bwd_params)?;
    let tapes = output
        .tapes
        .as_ref()
        .ok_or_else(|| Error::State("layer was not run in training mode".into()))?;
    let bwd_tapes = tapes
        .backward
        .as_ref()
        .ok_or_else(|| Error::State("unidirectional tapes given to a bidirectional layer".into()))?;
    check_grad_sequence(output, grad_sequence)?;

    let mut gf = Vec::with_capacity(grad_sequence.len());
    let mut gb = Vec::with_capacity(grad_sequence.len());
    for g in grad_sequence {
        match desc.combine {
            Combine::Average => {
                let half = g.scale(0.5);
                gf.push(half.clone());
                gb.push(half);
            }
            Combine::Sum => {
                gf.push(g.clone());
                gb.push(g.clone());
            }
            Combine::Concat => {
                let (a, b) = g.hsplit(desc.hidden)?;
                gf.push(a);
                gb.push(b);
            }
        }
    }
    let mut fwd_grads = fwd_params.zeros_like();
    let mut bwd_grads = bwd_params.zeros_like();
    let gx_f = direction_backward(fwd_params, &tapes.forward, &gf, grad_fwd_inferred, false, &mut fwd_grads)?;
    let gx_b = direction_backward(bwd_params, bwd_tapes, &gb, grad_bwd_inferred, true, &mut bwd_grads)?;
    let gx = gx_f
        .into_iter()
        .zip(gx_b)
        .map(|(a, b)| a.add(&b))
        .collect::<Result<Vec<_>>>()?;
    Ok((fwd_grads, bwd_grads, gx))
}

/// Dispatching counterpart of [`run_layer`] for the backward pass.
pub fn run_layer_backward(
    desc: &LayerDescriptor,
    params: &LayerParams,
    output: &LayerOutput,
    grad_sequence: &[Matrix],
    grad_fwd_inferred: Option<&[Matrix]>,
    grad_bwd_inferred: Option<&[Matrix]>,
) -> Result<(LayerParams, Vec<Matrix>)> {
    match (desc.direction, &params.backward) {
        (Direction::Uni, None) => {
            let (forward, gx) =
                run_uni_backward(desc, &params.forward, output, grad_sequence, grad_fwd_inferred)?;
            Ok((
                LayerParams {
                    forward,
                    backward: None,
                },
                gx,
            ))
        }
        (Direction::Bi, Some(bwd)) => {
            let (forward, backward, gx) = run_bi_backward(
                desc,
                &params.forward,
                bwd,
                output,
                grad_sequence,
                grad_fwd_inferred,
                grad_bwd_inferred,
            )?;
            Ok((
                LayerParams {
                    forward,
                    backward: Some(backward),
                },
                gx,
            ))
        }
        _ => Err(Error::Config(format!(
            "{} layer has the wrong number of directional parameter sets",
            desc.label()
        ))),
    }
}
