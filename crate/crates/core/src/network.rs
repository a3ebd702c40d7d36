//! Layer stacks, the one-step-ahead prediction, the regularized loss and its
//! gradient.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::layers::{
    run_layer, run_layer_backward, CellKind, Combine, Direction, LayerDescriptor, LayerOutput,
    LayerParams,
};
use crate::numerics::{Matrix, Rng};

pub const DEFAULT_LAMBDA: f64 = 0.01;

/// Hidden width of the non-final layers, absolute or relative to `D`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HiddenWidth {
    Absolute(usize),
    OfInput(f64),
}

impl Default for HiddenWidth {
    fn default() -> Self {
        HiddenWidth::OfInput(1.0)
    }
}

impl HiddenWidth {
    pub fn resolve(&self, input_dim: usize) -> Result<usize> {
        let n = match *self {
            HiddenWidth::Absolute(n) => n,
            HiddenWidth::OfInput(f) => (f * input_dim as f64).ceil() as usize,
        };
        if n == 0 {
            return Err(Error::Config(format!("hidden width {self} resolves to zero")));
        }
        Ok(n)
    }
}

impl FromStr for HiddenWidth {
    type Err = Error;

    /// Accepts `D`, `0.5D`, `2D`, `1/4D` or a plain count.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("cannot parse hidden width '{s}' (e.g. 16, D, 0.5D, 1/4D)"));
        if let Some(factor) = s.strip_suffix('D') {
            let f = match factor.trim() {
                "" => 1.0,
                f => match f.split_once('/') {
                    Some((a, b)) => {
                        let (a, b): (f64, f64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                        a / b
                    }
                    None => f.parse().map_err(|_| bad())?,
                },
            };
            if !(f > 0.0) || !f.is_finite() {
                return Err(bad());
            }
            Ok(HiddenWidth::OfInput(f))
        } else {
            s.parse().map(HiddenWidth::Absolute).map_err(|_| bad())
        }
    }
}

impl fmt::Display for HiddenWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HiddenWidth::Absolute(n) => write!(f, "{n}"),
            HiddenWidth::OfInput(x) if *x == 1.0 => write!(f, "D"),
            HiddenWidth::OfInput(x) => write!(f, "{x}D"),
        }
    }
}

/// Architecture of a stacked model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerDescriptor>,
    pub lambda: f64,
    pub combine: Combine,
}

impl ModelSpec {
    /// Parses a stack such as `bdlstmi+bdlstm` or `lstm*2`. Every layer but
    /// the last uses `hidden`; the last one is sized to emit a `D`-vector.
    pub fn parse(
        grammar: &str,
        input_dim: usize,
        hidden: HiddenWidth,
        combine: Combine,
        lambda: f64,
    ) -> Result<Self> {
        let mut kinds = Vec::new();
        for token in grammar.split('+') {
            let token = token.trim();
            let (name, count) = match token.split_once('*') {
                Some((n, c)) => {
                    let c: usize = c.trim().parse().map_err(|_| {
                        Error::Config(format!("bad repetition count in '{token}'"))
                    })?;
                    if c == 0 {
                        return Err(Error::Config(format!("zero repetition in '{token}'")));
                    }
                    (n.trim(), c)
                }
                None => (token, 1),
            };
            let kd = match name {
                "lstm" => (CellKind::Lstm, Direction::Uni),
                "bdlstm" => (CellKind::Lstm, Direction::Bi),
                "lstmi" => (CellKind::LstmI, Direction::Uni),
                "bdlstmi" => (CellKind::LstmI, Direction::Bi),
                other => {
                    return Err(Error::Config(format!(
                        "unknown layer '{other}' in '{grammar}' (valid: lstm, bdlstm, lstmi, bdlstmi)"
                    )))
                }
            };
            kinds.extend(std::iter::repeat_n(kd, count));
        }
        let inner = hidden.resolve(input_dim)?;
        let n = kinds.len();
        let mut layers = Vec::with_capacity(n);
        let mut width = input_dim;
        for (k, (kind, direction)) in kinds.into_iter().enumerate() {
            let concat = direction == Direction::Bi && combine == Combine::Concat;
            let h = if k + 1 < n {
                inner
            } else if concat {
                if input_dim % 2 != 0 {
                    return Err(Error::Config(format!(
                        "a concatenating final layer needs an even input width, got {input_dim}"
                    )));
                }
                input_dim / 2
            } else {
                input_dim
            };
            let desc = LayerDescriptor {
                kind,
                direction,
                input_dim: width,
                hidden: h,
                combine,
            };
            width = desc.out_width();
            layers.push(desc);
        }
        let spec = Self {
            input_dim,
            layers,
            lambda,
            combine,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        let mut width = self.input_dim;
        for (k, l) in self.layers.iter().enumerate() {
            if l.is_imputing() && k != 0 {
                return Err(Error::Config(format!(
                    "layer {k} ({}) is imputation-capable; only the first layer may handle missing values",
                    l.label()
                )));
            }
            if l.input_dim != width {
                return Err(Error::Config(format!(
                    "layer {k} expects input width {}, previous width is {width}",
                    l.input_dim
                )));
            }
            if l.hidden == 0 {
                return Err(Error::Config(format!("layer {k} has zero hidden width")));
            }
            width = l.out_width();
        }
        if width != self.input_dim {
            return Err(Error::Config(format!(
                "final layer emits width {width}, prediction must have width {}",
                self.input_dim
            )));
        }
        Ok(())
    }

    pub fn is_imputing(&self) -> bool {
        self.layers.first().is_some_and(LayerDescriptor::is_imputing)
    }

    /// The stack in grammar form, e.g. `bdlstmi+bdlstm`.
    pub fn grammar(&self) -> String {
        self.layers.iter().map(LayerDescriptor::label).collect::<Vec<_>>().join("+")
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Named gradient tensors with the same layout as the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        named(&self.layers)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        named_mut(&mut self.layers)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().fold(0.0, |a, (_, m)| a.max(m.max_abs()))
    }
}

fn named(layers: &[LayerParams]) -> Vec<(String, &Matrix)> {
    layers
        .iter()
        .enumerate()
        .flat_map(|(k, l)| l.tensors().into_iter().map(move |(n, m)| (format!("layer{k}.{n}"), m)))
        .collect()
}

fn named_mut(layers: &mut [LayerParams]) -> Vec<(String, &mut Matrix)> {
    layers
        .iter_mut()
        .enumerate()
        .flat_map(|(k, l)| {
            l.tensors_mut()
                .into_iter()
                .map(move |(n, m)| (format!("layer{k}.{n}"), m))
        })
        .collect()
}

/// Everything a forward pass produced.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `batch × D`: the last layer's output at the final step.
    pub prediction: Matrix,
    pub layers: Vec<LayerOutput>,
    model_id: u64,
}

/// Loss terms of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub prediction_mse: f64,
    pub imputation_l1: f64,
    pub total: f64,
    pub predictions: Matrix,
}

/// A stacked model. Every mutable access to the parameters gives the model
/// a new identity so stale forward passes are rejected by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<LayerParams>,
    id: u64,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers
    }
}

impl Model {
    /// Random initialization; layers draw from `rng` in stack order.
    pub fn new(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .map(|d| d.init_params(rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            layers,
            id: fresh_id(),
        })
    }

    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers.iter().map(LayerDescriptor::zero_params).collect();
        Ok(Self {
            spec,
            layers,
            id: fresh_id(),
        })
    }

    pub fn from_layers(spec: ModelSpec, layers: Vec<LayerParams>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers.len() {
            return Err(Error::Config(format!(
                "{} parameter sets for {} layers",
                layers.len(),
                spec.layers.len()
            )));
        }
        for (desc, p) in spec.layers.iter().zip(&layers) {
            p.validate(desc)?;
        }
        Ok(Self {
            spec,
            layers,
            id: fresh_id(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {lambda}")));
        }
        self.spec.lambda = lambda;
        self.id = fresh_id();
        Ok(())
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        self.id = fresh_id();
        &mut self.layers
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        named(&self.layers)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.id = fresh_id();
        named_mut(&mut self.layers)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn needs_masks(&self) -> bool {
        self.spec.is_imputing()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    /// Runs the stack. Masks are consumed by an imputing first layer and
    /// ignored otherwise, so a plain stack sees zero-filled gaps.
    pub fn forward(&self, inputs: &[Matrix], masks: Option<&[Matrix]>, training: bool) -> Result<ForwardPass> {
        if self.needs_masks() && masks.is_none() {
            return Err(Error::Config("the imputation layer needs masks".into()));
        }
        if inputs.is_empty() {
            return Err(Error::Config("empty input window".into()));
        }
        let mut outputs: Vec<LayerOutput> = Vec::with_capacity(self.layers.len());
        for (k, (desc, params)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            let out = if k == 0 {
                let m = if desc.is_imputing() { masks } else { None };
                run_layer(desc, params, inputs, m, training)?
            } else {
                let prev = &outputs[k - 1].sequence;
                run_layer(desc, params, prev, None, training)?
            };
            outputs.push(out);
        }
        let prediction = outputs
            .last()
            .and_then(|o| o.sequence.last())
            .cloned()
            .expect("non-empty stack and window");
        Ok(ForwardPass {
            prediction,
            layers: outputs,
            model_id: self.id,
        })
    }

    pub fn forward_batch(&self, batch: &Batch, training: bool) -> Result<ForwardPass> {
        self.forward(&batch.inputs, Some(&batch.masks), training)
    }

    /// Direction weights and inferred slabs of an imputing first layer.
    fn inferred_slabs<'a>(&self, pass: &'a ForwardPass) -> Vec<(f64, &'a [Matrix])> {
        let Some(first) = pass.layers.first() else {
            return Vec::new();
        };
        match (&first.forward_inferred, &first.backward_inferred) {
            (Some(f), Some(b)) => vec![(0.5, f.as_slice()), (0.5, b.as_slice())],
            (Some(f), None) => vec![(1.0, f.as_slice())],
            _ => Vec::new(),
        }
    }

    /// `total = mse + λ·l1`. The MSE averages over observed target entries;
    /// the L1 term sums `|x − x̃|` over steps and observed inputs and divides
    /// by the batch size. Bidirectional first layers average both directions.
    pub fn loss(&self, pass: &ForwardPass, batch: &Batch) -> Result<LossReport> {
        let p = &pass.prediction;
        if p.shape() != batch.target.shape() || p.shape() != batch.target_mask.shape() {
            return Err(Error::Shape {
                op: "loss target",
                left: batch.target.shape(),
                right: p.shape(),
            });
        }
        let mut sq = 0.0;
        let mut n_obs = 0usize;
        for ((&pv, &y), &m) in p.data().iter().zip(batch.target.data()).zip(batch.target_mask.data()) {
            if m != 0.0 {
                sq += (pv - y) * (pv - y);
                n_obs += 1;
            }
        }
        let prediction_mse = if n_obs > 0 { sq / n_obs as f64 } else { 0.0 };

        let mut imputation_l1 = 0.0;
        let b = p.rows() as f64;
        for (coef, slab) in self.inferred_slabs(pass) {
            let mut s = 0.0;
            for t in 0..slab.len() {
                for ((&xi, &x), &m) in slab[t].data().iter().zip(batch.inputs[t].data()).zip(batch.masks[t].data()) {
                    if m != 0.0 {
                        s += (x - xi).abs();
                    }
                }
            }
            imputation_l1 += coef * s;
        }
        imputation_l1 /= b;
        Ok(LossReport {
            prediction_mse,
            imputation_l1,
            total: prediction_mse + self.spec.lambda * imputation_l1,
            predictions: p.clone(),
        })
    }

    /// Exact gradient of [`Model::loss`] with respect to every parameter.
    pub fn backward(&self, pass: &ForwardPass, batch: &Batch) -> Result<Gradients> {
        if pass.model_id != self.id {
            return Err(Error::State(
                "forward pass belongs to a different or since-modified model".into(),
            ));
        }
        if pass.layers.iter().any(|l| !l.has_tapes()) {
            return Err(Error::State("forward pass was not run in training mode".into()));
        }
        let p = &pass.prediction;
        if p.shape() != batch.target.shape() {
            return Err(Error::Shape {
                op: "loss target",
                left: batch.target.shape(),
                right: p.shape(),
            });
        }
        let n_obs = batch.target_mask.data().iter().filter(|&&m| m != 0.0).count();
        let scale = if n_obs > 0 { 2.0 / n_obs as f64 } else { 0.0 };
        let dp = Matrix::new(
            p.rows(),
            p.cols(),
            p.data()
                .iter()
                .zip(batch.target.data())
                .zip(batch.target_mask.data())
                .map(|((&pv, &y), &m)| if m != 0.0 { scale * (pv - y) } else { 0.0 })
                .collect(),
        )?;

        let steps = pass.layers[0].len();
        let last = pass.layers.len() - 1;
        let mut grad_seq: Vec<Matrix> = pass.layers[last]
            .sequence
            .iter()
            .map(Matrix::zeros_like)
            .collect();
        grad_seq[steps - 1] = dp;

        let mut grads: Vec<Option<LayerParams>> = vec![None; self.layers.len()];
        for k in (0..=last).rev() {
            let desc = &self.spec.layers[k];
            let (gfi, gbi) = if k == 0 && desc.is_imputing() {
                let slabs = self.inferred_slabs(pass);
                let reg = |coef: f64, slab: &[Matrix]| -> Vec<Matrix> {
                    let w = self.spec.lambda * coef / p.rows() as f64;
                    (0..slab.len())
                        .map(|t| {
                            let data = slab[t]
                                .data()
                                .iter()
                                .zip(batch.inputs[t].data())
                                .zip(batch.masks[t].data())
                                .map(|((&xi, &x), &m)| {
                                    if m == 0.0 || xi == x {
                                        0.0
                                    } else {
                                        w * (xi - x).signum()
                                    }
                                })
                                .collect();
                            Matrix::new(slab[t].rows(), slab[t].cols(), data).expect("slab shape")
                        })
                        .collect()
                };
                let mut it = slabs.into_iter().map(|(c, s)| reg(c, s));
                (it.next(), it.next())
            } else {
                (None, None)
            };
            let (g, gx) = run_layer_backward(
                desc,
                &self.layers[k],
                &pass.layers[k],
                &grad_seq,
                gfi.as_deref(),
                gbi.as_deref(),
            )?;
            grads[k] = Some(g);
            grad_seq = gx;
        }
        Ok(Gradients {
            layers: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
        })
    }

    pub fn loss_and_gradients(&self, batch: &Batch) -> Result<(LossReport, Gradients)> {
        let pass = self.forward_batch(batch, true)?;
        let report = self.loss(&pass, batch)?;
        let grads = self.backward(&pass, batch)?;
        Ok((report, grads))
    }

    /// Inference on one `T × D` window. Returns the normalized `D`-vector.
    pub fn predict(&self, window: &Matrix, mask: &Matrix) -> Result<Vec<f64>> {
        if window.shape() != mask.shape() {
            return Err(Error::Shape {
                op: "predict mask",
                left: mask.shape(),
                right: window.shape(),
            });
        }
        let d = self.spec.input_dim;
        if window.cols() != d {
            return Err(Error::Shape {
                op: "predict window",
                left: window.shape(),
                right: (window.rows(), d),
            });
        }
        let row = |m: &Matrix, t: usize| Matrix::new(1, d, m.row(t).to_vec());
        let inputs = (0..window.rows()).map(|t| row(window, t)).collect::<Result<Vec<_>>>()?;
        let masks = (0..window.rows()).map(|t| row(mask, t)).collect::<Result<Vec<_>>>()?;
        Ok(self.forward(&inputs, Some(&masks), false)?.prediction.into_data())
    }

    /// Predictions for a whole batch in inference mode.
    pub fn predict_batch(&self, batch: &Batch) -> Result<Matrix> {
        Ok(self.forward_batch(batch, false)?.prediction)
    }
}
