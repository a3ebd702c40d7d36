//! Adam, the plateau schedule, the epoch loop and the finite-difference
//! gradient checker.

use std::io::Write;
use std::time::Instant;

use crate::data::{Batch, WindowedDataset};
use crate::error::{Error, Result};
use crate::network::{Gradients, Model, ModelSpec};
use crate::numerics::{init_uniform, Matrix, Rng};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    names: Vec<String>,
    frozen: Vec<bool>,
}

impl Adam {
    pub fn new(model: &Model, lr: f64) -> Self {
        let tensors = model.tensors();
        Self {
            lr,
            t: 0,
            m: tensors.iter().map(|(_, m)| Matrix::zeros_like(m)).collect(),
            v: tensors.iter().map(|(_, m)| Matrix::zeros_like(m)).collect(),
            frozen: vec![false; tensors.len()],
            names: tensors.into_iter().map(|(n, _)| n).collect(),
        }
    }

    /// Excludes tensors from updates. A pattern matches a tensor whose name
    /// equals it or ends with `.pattern`.
    pub fn freeze(&mut self, patterns: &[String]) -> Result<()> {
        for p in patterns {
            let suffix = format!(".{p}");
            let mut hit = false;
            for (name, f) in self.names.iter().zip(self.frozen.iter_mut()) {
                if name == p || name.ends_with(&suffix) {
                    *f = true;
                    hit = true;
                }
            }
            if !hit {
                return Err(Error::Config(format!("no parameter tensor matches '{p}'")));
            }
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update over parallel lists of parameters and gradients.
    pub fn step_tensors(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Argument(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam step",
                    left: g.shape(),
                    right: m.shape(),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for k in 0..params.len() {
            if self.frozen[k] {
                continue;
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = params[k].data_mut();
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(grads[k].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        let g: Vec<&Matrix> = grads.tensors().into_iter().map(|(_, m)| m).collect();
        let mut p: Vec<&mut Matrix> = model.tensors_mut().into_iter().map(|(_, m)| m).collect();
        self.step_tensors(&mut p, &g)
    }
}

/// Plateau schedule: a stagnant epoch is one whose validation loss does not
/// beat the best so far by more than `threshold`. After `patience` stagnant
/// epochs in a row the rate drops tenfold; at the floor training stops.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    pub current_lr: f64,
    pub patience_counter: usize,
    pub best_val_loss: f64,
    pub improvement_threshold: f64,
    pub patience: usize,
    pub lr_floor: f64,
    pub stopped: bool,
}

impl ScheduleState {
    pub fn new(initial_lr: f64) -> Self {
        Self {
            current_lr: initial_lr,
            patience_counter: 0,
            best_val_loss: f64::INFINITY,
            improvement_threshold: 1e-5,
            patience: 5,
            lr_floor: 1e-5,
            stopped: false,
        }
    }

    /// Pure transition on one validation loss.
    pub fn updated(&self, val_loss: f64) -> Self {
        let mut next = self.clone();
        if self.stopped {
            return next;
        }
        let improvement = self.best_val_loss - val_loss;
        if improvement > self.improvement_threshold {
            next.patience_counter = 0;
        } else {
            next.patience_counter += 1;
        }
        next.best_val_loss = self.best_val_loss.min(val_loss);
        if next.patience_counter >= self.patience {
            next.patience_counter = 0;
            if self.current_lr <= self.lr_floor {
                next.stopped = true;
            } else {
                let lowered = self.current_lr / 10.0;
                next.current_lr = if lowered <= self.lr_floor { self.lr_floor } else { lowered };
            }
        }
        next
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Tensor names (or name suffixes) held fixed.
    pub frozen: Vec<String>,
    /// Factor converting the normalized validation MSE into the units the
    /// schedule and log use (`max_speed²` gives squared original units).
    pub val_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 200,
            seed: 0,
            frozen: Vec::new(),
            val_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_loss,lr,seconds";

pub fn write_epoch_log<W: Write>(logs: &[EpochLog], mut w: W) -> Result<()> {
    writeln!(w, "{EPOCH_LOG_HEADER}")?;
    for l in logs {
        writeln!(w, "{},{},{},{},{:.3}", l.epoch, l.train_loss, l.val_loss, l.lr, l.seconds)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Prediction MSE over every observed target of `ds`, in normalized units.
pub fn dataset_mse(model: &Model, ds: &WindowedDataset, batch_size: usize) -> Result<f64> {
    let (mut sq, mut n) = (0.0, 0usize);
    for batch in ds.batches(batch_size.max(1)) {
        let batch = batch?;
        let p = model.predict_batch(&batch)?;
        for ((&pv, &y), &m) in p.data().iter().zip(batch.target.data()).zip(batch.target_mask.data()) {
            if m != 0.0 {
                sq += (pv - y) * (pv - y);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Config("dataset has no observed targets".into()));
    }
    Ok(sq / n as f64)
}

/// Trains until the schedule stops or `max_epochs` is reached and returns
/// the best-validation snapshot.
pub fn train(
    mut model: Model,
    train_set: &WindowedDataset,
    val_set: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("batch size and epoch cap must be positive".into()));
    }
    if !(cfg.val_scale > 0.0) || !cfg.val_scale.is_finite() {
        return Err(Error::Config(format!("validation scale must be positive, got {}", cfg.val_scale)));
    }
    let mut opt = Adam::new(&model, cfg.learning_rate);
    opt.freeze(&cfg.frozen)?;
    let mut sched = ScheduleState::new(cfg.learning_rate);
    let mut log = Vec::new();
    let mut best = (model.clone(), 0usize, f64::INFINITY);

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let lr = sched.current_lr;
        opt.set_lr(lr);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::new(cfg.seed.wrapping_add(epoch as u64)).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_set.batch(chunk)?;
            let (report, grads) = model.loss_and_gradients(&batch)?;
            if !report.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {bi} (mse {}, l1 {})",
                    report.prediction_mse, report.imputation_l1
                )));
            }
            loss_sum += report.total * chunk.len() as f64;
            opt.step(&mut model, &grads)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = cfg.val_scale * dataset_mse(&model, val_set, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        if val_loss < best.2 {
            best = (model.clone(), epoch, val_loss);
        }
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e} lr {lr:e} ({:.2}s)",
            entry.seconds
        );
        log.push(entry);
        sched = sched.updated(val_loss);
        if sched.stopped {
            log::info!("learning rate at floor and no further improvement; stopping");
            break;
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        log,
        best_epoch: best.1,
        best_val_loss: best.2,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.tensors.iter().fold(0.0, |a, t| a.max(t.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.tolerance
    }

    pub fn failing(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| !(t.max_rel_error < self.tolerance))
            .map(|t| t.name.as_str())
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::from("tensor,max_rel_error,worst_index,status\n");
        for t in &self.tensors {
            let status = if t.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            s.push_str(&format!("{},{:.3e},{},{status}\n", t.name, t.max_rel_error, t.worst_index));
        }
        s.push_str(&format!(
            "overall,{:.3e},,{}\n",
            self.max_error(),
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub batch: usize,
    pub window: usize,
    pub missing_rate: f64,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            batch: 2,
            window: 3,
            missing_rate: 0.3,
            epsilon: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// Relative-error denominator floor; keeps entries whose true gradient is
/// near zero from amplifying finite-difference roundoff.
const REL_FLOOR: f64 = 1e-5;

/// Random inputs in (0, 1) with `missing_rate` of the cells masked out.
pub fn random_batch(d: usize, cfg: &GradcheckConfig, rng: &mut Rng) -> Result<Batch> {
    let b = cfg.batch;
    let mut inputs = Vec::with_capacity(cfg.window);
    let mut masks = Vec::with_capacity(cfg.window);
    for _ in 0..cfg.window {
        let mut x = init_uniform(b, d, rng, 0.45)?.map(|v| v + 0.5);
        let mut m = Matrix::ones(b, d);
        for k in 0..b * d {
            if rng.next_f64() < cfg.missing_rate {
                x.data_mut()[k] = 0.0;
                m.data_mut()[k] = 0.0;
            }
        }
        inputs.push(x);
        masks.push(m);
    }
    Ok(Batch {
        inputs,
        masks,
        target: init_uniform(b, d, rng, 0.45)?.map(|v| v + 0.5),
        target_mask: Matrix::ones(b, d),
    })
}

/// Compares `analytic` against central differences of the total loss.
pub fn gradcheck_with(
    model: &Model,
    batch: &Batch,
    epsilon: f64,
    tolerance: f64,
    analytic: impl Fn(&Model, &Batch) -> Result<Gradients>,
) -> Result<GradcheckReport> {
    let grads = analytic(model, batch)?;
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let mut probe = model.clone();
    let loss_of = |m: &Model| -> Result<f64> { Ok(m.loss(&m.forward_batch(batch, false)?, batch)?.total) };
    let mut out = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let g = grads.tensors()[ti].1.clone();
        let mut worst = (0.0f64, 0usize);
        for k in 0..g.data().len() {
            let orig = probe.tensors()[ti].1.data()[k];
            probe.tensors_mut()[ti].1.data_mut()[k] = orig + epsilon;
            let lp = loss_of(&probe)?;
            probe.tensors_mut()[ti].1.data_mut()[k] = orig - epsilon;
            let lm = loss_of(&probe)?;
            probe.tensors_mut()[ti].1.data_mut()[k] = orig;
            let numeric = (lp - lm) / (2.0 * epsilon);
            let a = g.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > worst.0 || rel.is_nan() {
                worst = (if rel.is_nan() { f64::INFINITY } else { rel }, k);
            }
        }
        out.push(TensorCheck {
            name,
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradcheckReport {
        tensors: out,
        tolerance,
    })
}

/// Builds a random model and batch from `seed` and checks every tensor.
pub fn gradcheck(spec: &ModelSpec, seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed);
    let model = Model::new(spec.clone(), &mut rng)?;
    let batch = random_batch(spec.input_dim, cfg, &mut rng)?;
    gradcheck_with(&model, &batch, cfg.epsilon, cfg.tolerance, |m, b| {
        Ok(m.loss_and_gradients(b)?.1)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, split, SpeedMatrix, SplitRatios};
    use crate::layers::Combine;
    use crate::network::HiddenWidth;
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn spec(grammar: &str, d: usize, lambda: f64) -> ModelSpec {
        ModelSpec::parse(grammar, d, HiddenWidth::default(), Combine::Average, lambda).unwrap()
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Matrix::filled(2, 2, 0.3);
        let g = Matrix::zeros(2, 2);
        let mut opt = Adam {
            lr: 1e-3,
            t: 0,
            m: vec![Matrix::zeros(2, 2)],
            v: vec![Matrix::zeros(2, 2)],
            names: vec!["p".into()],
            frozen: vec![false],
        };
        opt.step_tensors(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, Matrix::filled(2, 2, 0.3));
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        for g in [0.37, -2.5, 1e-3] {
            let mut p = Matrix::zeros(1, 1);
            let mut opt = Adam {
                lr: 1e-3,
                t: 0,
                m: vec![Matrix::zeros(1, 1)],
                v: vec![Matrix::zeros(1, 1)],
                names: vec!["p".into()],
                frozen: vec![false],
            };
            opt.step_tensors(&mut [&mut p], &[&Matrix::filled(1, 1, g)]).unwrap();
            let want = -1e-3 * g / (g.abs() + ADAM_EPS);
            assert!((p.get(0, 0) - want).abs() < 1e-15, "{g}");
        }
    }

    #[test]
    fn adam_rejects_misaligned_shapes() {
        let model = Model::zeros(spec("lstm", 2, 0.0)).unwrap();
        let mut opt = Adam::new(&model, 1e-3);
        let mut p = Matrix::zeros(1, 1);
        assert!(opt.step_tensors(&mut [&mut p], &[&Matrix::zeros(1, 1)]).is_err());
        assert!(opt.freeze(&["nonexistent".into()]).is_err());
        opt.freeze(&["w_f".into()]).unwrap();
        assert_eq!(opt.frozen.iter().filter(|&&f| f).count(), 1);
    }

    fn run_schedule(losses: &[f64], start: ScheduleState) -> Vec<ScheduleState> {
        let mut s = start;
        losses
            .iter()
            .map(|&l| {
                s = s.updated(l);
                s.clone()
            })
            .collect()
    }

    #[test]
    fn schedule_keeps_rate_on_improvement() {
        let mut s = ScheduleState::new(1e-3);
        s = s.updated(1.0);
        let states = run_schedule(&[1.0 - 1e-3, 1.0 - 2e-3, 1.0 - 3e-3], s);
        let last = states.last().unwrap();
        assert_eq!((last.current_lr, last.patience_counter), (1e-3, 0));
    }

    #[test]
    fn schedule_decays_after_five_stagnant_epochs() {
        let s = ScheduleState::new(1e-3).updated(1.0);
        let losses: Vec<f64> = (1..=5).map(|k| 1.0 - 5e-6 * k as f64).collect();
        let states = run_schedule(&losses, s);
        assert!(states[..4].iter().all(|s| s.current_lr == 1e-3));
        assert_eq!(states[4].current_lr, 1e-4);
        assert_eq!(states[4].patience_counter, 0);
    }

    #[test]
    fn schedule_stops_at_floor() {
        let mut s = ScheduleState::new(1e-3).updated(1.0);
        let mut seen = vec![s.current_lr];
        for _ in 0..10 {
            s = s.updated(1.0);
            seen.push(s.current_lr);
        }
        assert_eq!(s.current_lr, 1e-5);
        assert!(!s.stopped);
        for k in 0..5 {
            s = s.updated(1.0);
            seen.push(s.current_lr);
            assert_eq!(s.stopped, k == 4);
        }
        assert!(seen.iter().all(|lr| [1e-3, 1e-4, 1e-5].contains(lr)));
    }

    proptest! {
        #[test]
        fn schedule_is_monotone_and_absorbing(losses in prop::collection::vec(0.0f64..2.0, 1..80)) {
            let mut s = ScheduleState::new(1e-3);
            let mut was_stopped = false;
            for l in losses {
                let next = s.updated(l);
                prop_assert!(next.current_lr <= s.current_lr);
                prop_assert!(next.current_lr >= next.lr_floor);
                prop_assert!(next.best_val_loss <= s.best_val_loss);
                if was_stopped {
                    prop_assert_eq!(&next, &s);
                }
                was_stopped = next.stopped;
                s = next;
            }
        }
    }

    fn sinusoid(steps: usize, d: usize) -> SpeedMatrix {
        let values = Matrix::new(
            steps,
            d,
            (0..steps * d)
                .map(|k| {
                    let (t, c) = ((k / d) as f64, (k % d) as f64);
                    0.5 + 0.3 * (t * 0.3 + c).sin()
                })
                .collect(),
        )
        .unwrap();
        let start = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        SpeedMatrix::from_values(start, 5, (0..d).map(|c| format!("S{c}")).collect(), values).unwrap()
    }

    #[test]
    fn training_descends_and_is_deterministic() {
        let ds = make_windows(&sinusoid(200, 2), 6).unwrap();
        let (tr, va, _) = split(&ds, SplitRatios::default(), 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            learning_rate: 1e-2,
            max_epochs: 20,
            seed: 4,
            ..TrainConfig::default()
        };
        let model = Model::new(spec("lstm", 2, 0.0), &mut Rng::new(1)).unwrap();
        let before = dataset_mse(&model, &tr, 64).unwrap();
        let out = train(model.clone(), &tr, &va, &cfg).unwrap();
        let after = dataset_mse(&out.model, &tr, 64).unwrap();
        assert!(after < before, "{after} !< {before}");
        assert!(out.log.iter().all(|l| out.best_val_loss <= l.val_loss));
        let again = train(model, &tr, &va, &cfg).unwrap();
        let strip = |l: &[EpochLog]| l.iter().map(|e| (e.epoch, e.train_loss, e.val_loss, e.lr)).collect::<Vec<_>>();
        assert_eq!(strip(&out.log), strip(&again.log));
        assert_eq!(out.model, again.model);
    }

    #[test]
    fn training_rejects_empty_split() {
        let ds = make_windows(&sinusoid(40, 2), 6).unwrap();
        let empty = WindowedDataset {
            samples: vec![],
            window: 6,
            dim: 2,
        };
        let model = Model::new(spec("lstm", 2, 0.0), &mut Rng::new(1)).unwrap();
        assert!(matches!(train(model, &ds, &empty, &TrainConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_imputation_stack_tracks_plain_stack() {
        let ds = make_windows(&sinusoid(120, 2), 5).unwrap();
        let (tr, va, _) = split(&ds, SplitRatios::default(), 2).unwrap();
        let plain = Model::new(spec("lstm+lstm", 2, 0.0), &mut Rng::new(3)).unwrap();
        let mut twin = Model::zeros(spec("lstmi+lstm", 2, 0.0)).unwrap();
        let copied = plain.layers().to_vec();
        for (dst, src) in twin.layers_mut().iter_mut().zip(&copied) {
            match &mut dst.forward {
                crate::cells::CellParams::LstmI(p) => p.lstm = src.forward.lstm().clone(),
                other => *other = src.forward.clone(),
            }
        }
        let mut cfg = TrainConfig {
            batch_size: 8,
            learning_rate: 1e-2,
            max_epochs: 5,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(plain, &tr, &va, &cfg).unwrap();
        cfg.frozen = ["v_f", "v_i", "v_o", "v_c", "w_imp", "u_imp", "b_imp"].map(String::from).to_vec();
        let b = train(twin, &tr, &va, &cfg).unwrap();
        for (x, y) in a.log.iter().zip(&b.log) {
            assert!((x.train_loss - y.train_loss).abs() <= 1e-12 * x.train_loss.abs());
            assert!((x.val_loss - y.val_loss).abs() <= 1e-12 * x.val_loss.abs());
        }
    }

    #[test]
    fn gradcheck_passes_on_tiny_specs() {
        for (g, lambda) in [("lstm", 0.0), ("lstm*2", 0.0), ("bdlstm", 0.0), ("bdlstmi+bdlstm", 0.5)] {
            let r = gradcheck(&spec(g, 2, lambda), 7, &GradcheckConfig::default()).unwrap();
            assert!(r.passed(), "{g}: {}", r.render());
        }
    }

    #[test]
    fn gradcheck_flags_a_corrupted_tensor() {
        let s = spec("bdlstmi+bdlstm", 2, 0.5);
        let mut rng = Rng::new(8);
        let model = Model::new(s.clone(), &mut rng).unwrap();
        let batch = random_batch(2, &GradcheckConfig::default(), &mut rng).unwrap();
        let target = "layer0.bwd.u_imp";
        let r = gradcheck_with(&model, &batch, 1e-5, 1e-4, |m, b| {
            let mut g = m.loss_and_gradients(b)?.1;
            for (n, t) in g.tensors_mut() {
                if n == target {
                    *t = t.scale(2.0);
                }
            }
            Ok(g)
        })
        .unwrap();
        assert_eq!(r.failing(), vec![target]);
    }
}
