//! Command-line front end.
//!
//! Every subcommand accepts `--config FILE`, a flat `key=value` file whose
//! keys are long flag names. Flags given on the command line win over the
//! file, which wins over built-in defaults. The effective values are echoed
//! to `run.config` next to the command's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::Duration;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::{
    self, corrupt, load_csv, load_mask_csv, make_windows, read_windowed_csv, save_csv, split,
    Normalizer, Scenario, SpeedMatrix, SplitRatios, SynthProfile, WindowedDataset,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_forecast, imputation_metrics, persistence, MetricReport};
use crate::layers::Combine;
use crate::network::{HiddenWidth, Model, ModelSpec};
use crate::numerics::{Matrix, Rng};
use crate::training::{gradcheck, train, write_epoch_log, GradcheckConfig, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "rnnif", version, about = "Stacked (bi)directional LSTM forecasting with imputation")]
pub struct Cli {
    /// Flat key=value file supplying defaults for long flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic speed CSV.
    Synth(SynthArgs),
    /// Apply a missing-data scenario to the windowed view of a speed CSV.
    Corrupt(CorruptArgs),
    /// Train a model and write a checkpoint and epoch log.
    Train(TrainArgs),
    /// Score a checkpoint's forecasts on a speed CSV.
    Eval(EvalArgs),
    /// Forecast the step after a single window.
    Predict(PredictArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Score imputed values at corrupted positions.
    ImputeEval(ImputeEvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioArg {
    Random,
    Nonrandom,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Random => Scenario::Random,
            ScenarioArg::Nonrandom => Scenario::NonRandom,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineArg {
    Average,
    Sum,
    Concat,
}

impl From<CombineArg> for Combine {
    fn from(c: CombineArg) -> Self {
        match c {
            CombineArg::Average => Combine::Average,
            CombineArg::Sum => Combine::Sum,
            CombineArg::Concat => Combine::Concat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Table,
}

fn rate_in_unit(s: &str) -> std::result::Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if r > 0.0 && r < 1.0 {
        Ok(r)
    } else {
        Err(format!("rate must lie strictly between 0 and 1, got {r}"))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub stations: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// key=value profile (free_flow_mph, peak_dip_mph, noise_sigma, …).
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CorruptArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Native-gap mask sidecar for the input.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scenario: ScenarioArg,
    #[arg(long, value_parser = rate_in_unit)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Window length T.
    #[arg(long, default_value_t = 10)]
    pub lags: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mask_out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Layer stack, e.g. `bdlstm*2`, `bdlstmi+bdlstm`, `lstm+bdlstm`.
    #[arg(long, default_value = "bdlstm*2")]
    pub model_spec: String,
    #[arg(long, default_value_t = crate::network::DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Hidden width of non-final layers: a count or a multiple of D (`0.5D`).
    #[arg(long, default_value = "D")]
    pub hidden: String,
    #[arg(long, value_enum, default_value_t = CombineArg::Average)]
    pub combine: CombineArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the train/val/test shuffle; defaults to --seed.
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long, default_value_t = 10)]
    pub lags: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub max_epochs: usize,
    /// Normalization ceiling in mph; defaults to the data maximum rounded up to 5.
    #[arg(long)]
    pub max_speed: Option<f64>,
    #[arg(long, value_enum, requires = "rate")]
    pub scenario: Option<ScenarioArg>,
    #[arg(long, value_parser = rate_in_unit, requires = "scenario")]
    pub rate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub corrupt_seed: u64,
    #[arg(long)]
    pub out_ckpt: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Subset::All)]
    pub subset: Subset,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long, value_enum, requires = "rate")]
    pub scenario: Option<ScenarioArg>,
    #[arg(long, value_parser = rate_in_unit, requires = "scenario")]
    pub rate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub corrupt_seed: u64,
    /// Also score the last-observed-value baseline.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Speed CSV holding exactly T rows; empty cells are missing.
    #[arg(long)]
    pub window: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "bdlstmi+bdlstm")]
    pub spec: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value = "2")]
    pub hidden: String,
    #[arg(long, value_enum, default_value_t = CombineArg::Average)]
    pub combine: CombineArg,
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.3)]
    pub missing: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ImputeEvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Windowed values written by `corrupt --out`.
    #[arg(long)]
    pub corrupted: PathBuf,
    /// Windowed mask written by `corrupt --mask-out`.
    #[arg(long)]
    pub corrupted_mask: PathBuf,
    /// The uncorrupted speed CSV the windows were cut from.
    #[arg(long)]
    pub pristine: PathBuf,
    #[arg(long)]
    pub pristine_mask: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Failure(Error),
    Check,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Failure(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(r: Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Usage(e.to_string()))
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(Error::Parse {
            line: i + 1,
            msg: format!("expected key=value, got '{line}'"),
        })?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

/// Appends `--key value` for config-file keys not already given as flags.
pub fn merge_config_args(args: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let entries = parse_config_text(&fs::read_to_string(&path)?)?;
    let given = |key: &str| {
        let flag = format!("--{key}");
        let eq = format!("--{key}=");
        args.iter().any(|a| *a == flag || a.starts_with(&eq))
    };
    let mut extra = Vec::new();
    for (k, v) in entries {
        if k == "config" || k == "command" || given(&k) {
            continue;
        }
        match v.as_str() {
            "true" => extra.push(format!("--{k}")),
            "false" => {}
            _ => {
                extra.push(format!("--{k}"));
                extra.push(v);
            }
        }
    }
    let mut merged = args;
    merged.extend(extra);
    Ok(merged)
}

/// Effective settings of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn from_args<T: Serialize>(command: &str, args: &T) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let serde_json::Value::Object(map) = serde_json::to_value(args)? {
            for (k, v) in map {
                let v = match v {
                    serde_json::Value::Null => continue,
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                values.insert(k.replace('_', "-"), v);
            }
        }
        Ok(Self {
            command: command.to_string(),
            values,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("command={}\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    /// Writes `run.config` into the directory containing `output`.
    pub fn write_beside(&self, output: &Path) -> Result<()> {
        let dir = output.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::write(dir.join("run.config"), self.to_text())?;
        Ok(())
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run(args: Vec<String>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let args = match merge_config_args(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if cli.verbose {
        let _ = env_logger::Builder::new()
            .filter_level(log::LevelFilter::Info)
            .target(env_logger::Target::Stderr)
            .try_init();
    }
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Corrupt(a) => cmd_corrupt(a),
        Command::Train(a) => cmd_train(a, stdout),
        Command::Eval(a) => cmd_eval(a, stdout),
        Command::Predict(a) => cmd_predict(a, stdout),
        Command::Gradcheck(a) => cmd_gradcheck(a, stdout),
        Command::ImputeEval(a) => cmd_impute_eval(a, stdout),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(stderr, "usage error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Failure(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_FAILURE
        }
        Err(CliError::Check) => {
            let _ = writeln!(stderr, "gradient check failed");
            EXIT_FAILURE
        }
    }
}

fn emit(text: &str, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn render_reports(rows: &[(&str, MetricReport)], format: Format) -> String {
    match format {
        Format::Csv => {
            let mut s = format!("label,{}\n", MetricReport::CSV_HEADER);
            for (label, r) in rows {
                s.push_str(&format!("{label},{}\n", r.csv_line()));
            }
            s
        }
        Format::Table => rows
            .iter()
            .map(|(label, r)| format!("[{label}]\n{r}\n"))
            .collect::<Vec<_>>()
            .join("\n"),
    }
}

fn load_series(path: &Path, mask: Option<&Path>) -> Result<SpeedMatrix> {
    let mut sm = load_csv(path)?;
    if let Some(m) = mask {
        let mask = load_mask_csv(m, &sm)?;
        sm.apply_mask(&mask)?;
    }
    Ok(sm)
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let mut profile = match &a.profile {
        Some(p) => usage(SynthProfile::parse(&fs::read_to_string(p).map_err(Error::from)?))?,
        None => SynthProfile::default(),
    };
    if let Some(s) = a.stations {
        profile.stations = s;
    }
    if let Some(d) = a.days {
        profile.days = d;
    }
    if let Some(s) = a.seed {
        profile.seed = s;
    }
    usage(profile.validate())?;
    let sm = data::synth(&profile)?;
    save_csv(&sm, &a.out)?;
    let mut rc = RunConfig::from_args("synth", a)?;
    for line in profile.to_text().lines() {
        if let Some((k, v)) = line.split_once('=') {
            rc.values.insert(format!("profile.{k}"), v.to_string());
        }
    }
    rc.write_beside(&a.out)?;
    Ok(())
}

fn cmd_corrupt(a: &CorruptArgs) -> CliResult<()> {
    let sm = load_series(&a.input, a.mask.as_deref())?;
    let ds = make_windows(&sm, a.lags)?;
    let corrupted = corrupt(&ds, a.scenario.into(), a.rate, a.seed)?;
    data::write_windowed_csv(
        &corrupted,
        &sm,
        None,
        std::io::BufWriter::new(fs::File::create(&a.out).map_err(Error::from)?),
        std::io::BufWriter::new(fs::File::create(&a.mask_out).map_err(Error::from)?),
    )?;
    RunConfig::from_args("corrupt", a)?.write_beside(&a.out)?;
    Ok(())
}

struct Prepared {
    norm: Normalizer,
    windows: WindowedDataset,
}

fn prepare(
    sm: &SpeedMatrix,
    norm: Normalizer,
    lags: usize,
    scenario: Option<ScenarioArg>,
    rate: Option<f64>,
    corrupt_seed: u64,
) -> Result<Prepared> {
    let normalized = norm.normalize(sm)?;
    let mut windows = make_windows(&normalized, lags)?;
    if let (Some(s), Some(r)) = (scenario, rate) {
        windows = corrupt(&windows, s.into(), r, corrupt_seed)?;
    }
    Ok(Prepared { norm, windows })
}

fn cmd_train(a: &TrainArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let sm = load_series(&a.data, a.mask.as_deref())?;
    let hidden: HiddenWidth = usage(a.hidden.parse())?;
    let spec = usage(ModelSpec::parse(&a.model_spec, sm.stations(), hidden, a.combine.into(), a.lambda))?;
    let norm = match a.max_speed {
        Some(m) => usage(Normalizer::new(m))?,
        None => Normalizer::fit(&sm)?,
    };
    let prep = prepare(&sm, norm, a.lags, a.scenario, a.rate, a.corrupt_seed)?;
    let (tr, va, te) = split(&prep.windows, SplitRatios::default(), a.split_seed.unwrap_or(a.seed))?;
    let model = Model::new(spec, &mut Rng::new(a.seed).derive(1))?;
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        learning_rate: a.lr,
        max_epochs: a.max_epochs,
        seed: a.seed,
        frozen: Vec::new(),
        val_scale: prep.norm.max_speed().powi(2),
    };
    let outcome = train(model, &tr, &va, &cfg)?;
    let ck = Checkpoint {
        model: outcome.model,
        window: a.lags,
        max_speed: prep.norm.max_speed(),
    };
    ck.save(&a.out_ckpt)?;
    if let Some(log_path) = &a.log {
        write_epoch_log(&outcome.log, std::io::BufWriter::new(fs::File::create(log_path).map_err(Error::from)?))?;
    }
    RunConfig::from_args("train", a)?.write_beside(&a.out_ckpt)?;
    let test = evaluate_forecast(&ck.model, &te, &prep.norm, a.batch_size)?;
    let base = persistence(&te, &prep.norm)?;
    let text = render_reports(&[("test", test), ("persistence", base)], Format::Csv);
    emit(&text, None, stdout)?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let sm = load_series(&a.data, a.mask.as_deref())?;
    if sm.stations() != ck.model.spec().input_dim {
        return Err(CliError::Failure(Error::Config(format!(
            "checkpoint expects {} stations, data has {}",
            ck.model.spec().input_dim,
            sm.stations()
        ))));
    }
    let prep = prepare(&sm, Normalizer::new(ck.max_speed)?, ck.window, a.scenario, a.rate, a.corrupt_seed)?;
    let ds = match a.subset {
        Subset::All => prep.windows,
        s => {
            let (tr, va, te) = split(&prep.windows, SplitRatios::default(), a.split_seed)?;
            match s {
                Subset::Train => tr,
                Subset::Val => va,
                _ => te,
            }
        }
    };
    let mut rows = vec![("model", evaluate_forecast(&ck.model, &ds, &prep.norm, 256)?)];
    if a.baseline {
        rows.push(("persistence", persistence(&ds, &prep.norm)?));
    }
    let text = render_reports(&rows, a.format);
    emit(&text, a.out.as_deref(), stdout)?;
    if let Some(out) = &a.out {
        RunConfig::from_args("eval", a)?.write_beside(out)?;
    }
    Ok(())
}

fn cmd_predict(a: &PredictArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let sm = load_csv(&a.window)?;
    let d = ck.model.spec().input_dim;
    if sm.steps() != ck.window {
        return Err(CliError::Failure(Error::Validation(format!(
            "window file has {} rows; this checkpoint expects T = {}",
            sm.steps(),
            ck.window
        ))));
    }
    if sm.stations() != d {
        return Err(CliError::Failure(Error::Validation(format!(
            "window file has {} stations; this checkpoint expects {d}",
            sm.stations()
        ))));
    }
    let norm = Normalizer::new(ck.max_speed)?;
    let normalized = norm.normalize(&sm)?;
    let pred = ck.model.predict(&normalized.values, &normalized.native_mask)?;
    let next = *sm.timestamps.last().expect("window is non-empty") + Duration::minutes(5);
    let out = SpeedMatrix {
        timestamps: vec![next],
        station_ids: sm.station_ids.clone(),
        values: Matrix::new(1, d, pred.iter().map(|&v| norm.denormalize_value(v)).collect())?,
        native_mask: Matrix::ones(1, d),
    };
    let mut buf = Vec::new();
    data::write_speed_csv(&out, &mut buf)?;
    emit(&String::from_utf8_lossy(&buf), a.out.as_deref(), stdout)?;
    if let Some(p) = &a.out {
        RunConfig::from_args("predict", a)?.write_beside(p)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let hidden: HiddenWidth = usage(a.hidden.parse())?;
    let spec = usage(ModelSpec::parse(&a.spec, a.dim, hidden, a.combine.into(), a.lambda))?;
    if !(0.0..1.0).contains(&a.missing) {
        return Err(CliError::Usage(format!("--missing must lie in [0, 1), got {}", a.missing)));
    }
    let cfg = GradcheckConfig {
        batch: a.batch,
        window: a.window,
        missing_rate: a.missing,
        epsilon: a.epsilon,
        tolerance: a.tolerance,
    };
    let report = gradcheck(&spec, a.seed, &cfg)?;
    emit(&report.render(), a.out.as_deref(), stdout)?;
    if let Some(p) = &a.out {
        RunConfig::from_args("gradcheck", a)?.write_beside(p)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Check)
    }
}

fn cmd_impute_eval(a: &ImputeEvalArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let norm = Normalizer::new(ck.max_speed)?;
    let pristine = load_series(&a.pristine, a.pristine_mask.as_deref())?;
    let pristine = make_windows(&norm.normalize(&pristine)?, ck.window)?;
    let triples = read_windowed_csv(&a.corrupted, &a.corrupted_mask, ck.window)?;
    let mut corrupted = WindowedDataset {
        samples: Vec::with_capacity(triples.len()),
        window: ck.window,
        dim: pristine.dim,
    };
    let mut aligned = WindowedDataset {
        samples: Vec::with_capacity(triples.len()),
        window: ck.window,
        dim: pristine.dim,
    };
    for (start, values, mask) in triples {
        let truth = pristine.samples.get(start).ok_or_else(|| {
            Error::Validation(format!("window {start} is beyond the pristine series"))
        })?;
        if values.shape() != truth.input.shape() {
            return Err(CliError::Failure(Error::Shape {
                op: "corrupted window",
                left: values.shape(),
                right: truth.input.shape(),
            }));
        }
        for (&v, &m) in values.data().iter().zip(mask.data()) {
            if m != 0.0 && m != 1.0 {
                return Err(CliError::Failure(Error::Validation(format!(
                    "window {start}: mask value {m} is not 0 or 1"
                ))));
            }
            if m == 0.0 && v != 0.0 {
                return Err(CliError::Failure(Error::Validation(format!(
                    "window {start}: missing position holds {v} instead of 0"
                ))));
            }
        }
        let mut s = truth.clone();
        s.input = values.map(|v| norm.normalize_value(v));
        s.mask = mask;
        corrupted.samples.push(s);
        aligned.samples.push(truth.clone());
    }
    let report = imputation_metrics(&ck.model, &corrupted, &aligned, &norm, 256)?;
    let text = render_reports(&[("imputation", report)], a.format);
    emit(&text, a.out.as_deref(), stdout)?;
    if let Some(p) = &a.out {
        RunConfig::from_args("impute-eval", a)?.write_beside(p)?;
    }
    Ok(())
}
