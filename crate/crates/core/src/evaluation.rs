//! Forecast and imputation scoring in original speed units.

use std::fmt;

use crate::data::{Batch, Normalizer, WindowedDataset};
use crate::error::{Error, Result};
use crate::network::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    /// Percent. `None` when a scored truth value is zero.
    pub mape: Option<f64>,
    pub rmse: f64,
    pub n: usize,
    /// Scored pairs whose truth is zero, which make MAPE undefined.
    pub zero_truth: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "n,mae,mape,rmse,zero_truth";

    pub fn csv_line(&self) -> String {
        let mape = self.mape.map_or_else(|| "NA".to_string(), |m| format!("{m:.6}"));
        format!("{},{:.6},{},{:.6},{}", self.n, self.mae, mape, self.rmse, self.zero_truth)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:>12}", "metric", "value")?;
        writeln!(f, "{:<6} {:>12.4}", "MAE", self.mae)?;
        match self.mape {
            Some(m) => writeln!(f, "{:<6} {:>11.4}%", "MAPE", m)?,
            None => writeln!(f, "{:<6} {:>12}", "MAPE", "undefined")?,
        }
        writeln!(f, "{:<6} {:>12.4}", "RMSE", self.rmse)?;
        write!(f, "{:<6} {:>12}", "n", self.n)?;
        if self.zero_truth > 0 {
            write!(f, "\n({} zero-valued truths; MAPE not reported)", self.zero_truth)?;
        }
        Ok(())
    }
}

/// MAE, MAPE and RMSE over the pairs where `scope` is non-zero (all pairs
/// when `scope` is `None`).
pub fn metrics(truth: &[f64], predicted: &[f64], scope: Option<&[f64]>) -> Result<MetricReport> {
    if truth.len() != predicted.len() || scope.is_some_and(|s| s.len() != truth.len()) {
        return Err(Error::Argument(format!(
            "metric inputs differ in length: truth {}, predicted {}, scope {:?}",
            truth.len(),
            predicted.len(),
            scope.map(<[f64]>::len)
        )));
    }
    let (mut abs, mut sq, mut pct) = (0.0, 0.0, 0.0);
    let (mut n, mut zero_truth) = (0usize, 0usize);
    for k in 0..truth.len() {
        if scope.is_some_and(|s| s[k] == 0.0) {
            continue;
        }
        let (x, p) = (truth[k], predicted[k]);
        let e = (x - p).abs();
        abs += e;
        sq += e * e;
        if x == 0.0 {
            zero_truth += 1;
        } else {
            pct += e / x.abs();
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Argument("metric scope is empty".into()));
    }
    let nf = n as f64;
    Ok(MetricReport {
        mae: abs / nf,
        mape: (zero_truth == 0).then(|| 100.0 * pct / nf),
        rmse: (sq / nf).sqrt(),
        n,
        zero_truth,
    })
}

fn batches(ds: &WindowedDataset, batch_size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
    ds.batches(batch_size.max(1))
}

/// Scores one-step-ahead predictions against observed targets.
pub fn evaluate_forecast(
    model: &Model,
    ds: &WindowedDataset,
    norm: &Normalizer,
    batch_size: usize,
) -> Result<MetricReport> {
    let (mut truth, mut pred, mut scope) = (Vec::new(), Vec::new(), Vec::new());
    for batch in batches(ds, batch_size) {
        let batch = batch?;
        let p = model.predict_batch(&batch)?;
        pred.extend(p.data().iter().map(|&v| norm.denormalize_value(v)));
        truth.extend(batch.target.data().iter().map(|&v| norm.denormalize_value(v)));
        scope.extend_from_slice(batch.target_mask.data());
    }
    metrics(&truth, &pred, Some(&scope))
}

/// Persistence baseline: each sensor repeats its most recent observed value
/// in the window, or 0 if the window never observed it.
pub fn persistence(ds: &WindowedDataset, norm: &Normalizer) -> Result<MetricReport> {
    let (mut truth, mut pred, mut scope) = (Vec::new(), Vec::new(), Vec::new());
    for s in &ds.samples {
        for c in 0..ds.dim {
            let last = (0..ds.window)
                .rev()
                .find(|&t| s.mask.get(t, c) != 0.0)
                .map_or(0.0, |t| s.input.get(t, c));
            pred.push(norm.denormalize_value(last));
            truth.push(norm.denormalize_value(s.target.get(0, c)));
            scope.push(s.target_mask.get(0, c));
        }
    }
    metrics(&truth, &pred, Some(&scope))
}

/// Scores the first layer's inferred values at the positions that were
/// corrupted (mask 0 in `corrupted`, observed in `pristine`). Bidirectional
/// layers contribute the mean of both directions.
pub fn imputation_metrics(
    model: &Model,
    corrupted: &WindowedDataset,
    pristine: &WindowedDataset,
    norm: &Normalizer,
    batch_size: usize,
) -> Result<MetricReport> {
    if !model.needs_masks() {
        return Err(Error::Config(
            "imputation scoring needs a model whose first layer is lstmi or bdlstmi".into(),
        ));
    }
    if corrupted.len() != pristine.len()
        || corrupted.window != pristine.window
        || corrupted.dim != pristine.dim
        || corrupted.samples.iter().zip(&pristine.samples).any(|(a, b)| a.start != b.start)
    {
        return Err(Error::Validation(
            "corrupted and pristine datasets are not aligned sample for sample".into(),
        ));
    }
    let (mut truth, mut pred, mut scope) = (Vec::new(), Vec::new(), Vec::new());
    let n = corrupted.len();
    let step = batch_size.max(1);
    for from in (0..n).step_by(step) {
        let idx: Vec<usize> = (from..(from + step).min(n)).collect();
        let batch = corrupted.batch(&idx)?;
        let truth_batch = pristine.batch(&idx)?;
        let pass = model.forward_batch(&batch, false)?;
        let first = &pass.layers[0];
        let fwd = first
            .forward_inferred
            .as_ref()
            .ok_or_else(|| Error::State("imputation layer produced no inferred values".into()))?;
        for t in 0..batch.window() {
            let inferred: Vec<f64> = match &first.backward_inferred {
                Some(bwd) => fwd[t]
                    .data()
                    .iter()
                    .zip(bwd[t].data())
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect(),
                None => fwd[t].data().to_vec(),
            };
            for k in 0..inferred.len() {
                pred.push(norm.denormalize_value(inferred[k]));
                truth.push(norm.denormalize_value(truth_batch.inputs[t].data()[k]));
                let hit = batch.masks[t].data()[k] == 0.0 && truth_batch.masks[t].data()[k] != 0.0;
                scope.push(if hit { 1.0 } else { 0.0 });
            }
        }
    }
    metrics(&truth, &pred, Some(&scope))
}
