//! Speed series ingestion, normalization, windowing, splitting, missing-value
//! scenarios and a synthetic traffic generator.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike, Weekday};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
pub const STEPS_PER_DAY: usize = 288;

/// A network-wide speed series: one row per timestamp, one column per station.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedMatrix {
    pub timestamps: Vec<NaiveDateTime>,
    pub station_ids: Vec<String>,
    /// `steps × stations`, 0 wherever `native_mask` is 0.
    pub values: Matrix,
    pub native_mask: Matrix,
}

impl SpeedMatrix {
    pub fn steps(&self) -> usize {
        self.values.rows()
    }

    pub fn stations(&self) -> usize {
        self.values.cols()
    }

    /// Builds a fully observed series on a regular grid.
    pub fn from_values(
        start: NaiveDateTime,
        spacing_minutes: i64,
        station_ids: Vec<String>,
        values: Matrix,
    ) -> Result<Self> {
        if station_ids.len() != values.cols() {
            return Err(Error::Argument(format!(
                "{} station ids for {} columns",
                station_ids.len(),
                values.cols()
            )));
        }
        let timestamps = (0..values.rows())
            .map(|i| start + Duration::minutes(spacing_minutes * i as i64))
            .collect();
        let native_mask = Matrix::ones(values.rows(), values.cols());
        Ok(Self {
            timestamps,
            station_ids,
            values,
            native_mask,
        })
    }

    /// Applies a `{0,1}` sidecar mask: entries masked out become native gaps.
    pub fn apply_mask(&mut self, mask: &Matrix) -> Result<()> {
        if mask.shape() != self.values.shape() {
            return Err(Error::Shape {
                op: "mask sidecar",
                left: mask.shape(),
                right: self.values.shape(),
            });
        }
        for k in 0..mask.data().len() {
            let m = mask.data()[k];
            if m != 0.0 && m != 1.0 {
                return Err(Error::Validation(format!("mask value {m} is not 0 or 1")));
            }
            if m == 0.0 {
                self.native_mask.data_mut()[k] = 0.0;
                self.values.data_mut()[k] = 0.0;
            }
        }
        Ok(())
    }

    pub fn observed_max(&self) -> f64 {
        self.values
            .data()
            .iter()
            .zip(self.native_mask.data())
            .filter(|(_, &m)| m == 1.0)
            .fold(0.0, |acc, (&v, _)| acc.max(v))
    }
}

fn parse_timestamp(raw: &str, line: usize) -> Result<NaiveDateTime> {
    let raw = raw.trim();
    NaiveDateTime::parse_from_str(raw, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M"))
        .map_err(|e| Error::Parse {
            line,
            msg: format!("bad timestamp '{raw}': {e}"),
        })
}

/// Options for reading a speed CSV.
#[derive(Debug, Clone, Copy)]
pub struct CsvOptions {
    /// Required spacing between consecutive rows; `None` only checks ordering.
    pub spacing_minutes: Option<i64>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            spacing_minutes: Some(5),
        }
    }
}

/// Reads a speed CSV: header `timestamp,<station ids…>`, then one row per
/// step. Empty or `NaN` cells are native gaps.
pub fn read_speed_csv<R: Read>(reader: R, opts: CsvOptions) -> Result<SpeedMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or(Error::Parse {
            line: 1,
            msg: "empty file".into(),
        })??;
    if header.get(0).map(str::trim) != Some("timestamp") {
        return Err(Error::Parse {
            line: 1,
            msg: "first header cell must be 'timestamp'".into(),
        });
    }
    let station_ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    if station_ids.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no station columns".into(),
        });
    }
    let d = station_ids.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut mask = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != d + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} cells, found {}", d + 1, rec.len()),
            });
        }
        let ts = parse_timestamp(&rec[0], line)?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(Error::Parse {
                    line,
                    msg: format!("timestamp {ts} does not follow {prev}"),
                });
            }
            if let Some(minutes) = opts.spacing_minutes {
                if ts - prev != Duration::minutes(minutes) {
                    return Err(Error::Parse {
                        line,
                        msg: format!("timestamp {ts} is not {minutes} minutes after {prev}"),
                    });
                }
            }
        }
        timestamps.push(ts);
        for cell in rec.iter().skip(1) {
            let cell = cell.trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                values.push(0.0);
                mask.push(0.0);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("cannot parse '{cell}' as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite value '{cell}'"),
                });
            }
            values.push(v);
            mask.push(1.0);
        }
    }
    let steps = timestamps.len();
    Ok(SpeedMatrix {
        timestamps,
        station_ids,
        values: Matrix::new(steps, d, values)?,
        native_mask: Matrix::new(steps, d, mask)?,
    })
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<SpeedMatrix> {
    load_csv_with(path, CsvOptions::default())
}

pub fn load_csv_with(path: impl AsRef<Path>, opts: CsvOptions) -> Result<SpeedMatrix> {
    read_speed_csv(std::fs::File::open(path)?, opts)
}

/// Writes a speed CSV; native gaps become empty cells.
pub fn write_speed_csv<W: Write>(sm: &SpeedMatrix, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["timestamp".to_string()];
    header.extend(sm.station_ids.iter().cloned());
    w.write_record(&header)?;
    for (r, ts) in sm.timestamps.iter().enumerate() {
        let mut row = vec![ts.format(TIMESTAMP_FORMAT).to_string()];
        for c in 0..sm.stations() {
            if sm.native_mask.get(r, c) == 0.0 {
                row.push(String::new());
            } else {
                row.push(format!("{}", sm.values.get(r, c)));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(sm: &SpeedMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_speed_csv(sm, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Reads a `{0,1}` mask CSV with the same layout as a speed CSV.
pub fn load_mask_csv(path: impl AsRef<Path>, like: &SpeedMatrix) -> Result<Matrix> {
    let parsed = read_speed_csv(std::fs::File::open(path)?, CsvOptions {
        spacing_minutes: None,
    })?;
    if parsed.timestamps != like.timestamps || parsed.station_ids != like.station_ids {
        return Err(Error::Validation(
            "mask CSV timestamps or station ids differ from the data file".into(),
        ));
    }
    if parsed.native_mask.data().iter().any(|&m| m == 0.0) {
        return Err(Error::Validation("mask CSV has empty cells".into()));
    }
    Ok(parsed.values)
}

/// Min-max scaling with `min = 0`: `x ↦ x / max_speed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    max_speed: f64,
}

impl Normalizer {
    pub fn new(max_speed: f64) -> Result<Self> {
        if !(max_speed > 0.0) || !max_speed.is_finite() {
            return Err(Error::Argument(format!(
                "max speed must be positive, got {max_speed}"
            )));
        }
        Ok(Self { max_speed })
    }

    /// The smallest multiple of 5 strictly above the observed maximum.
    pub fn fit(sm: &SpeedMatrix) -> Result<Self> {
        Self::new(((sm.observed_max() / 5.0).floor() + 1.0) * 5.0)
    }

    pub fn max_speed(&self) -> f64 {
        self.max_speed
    }

    pub fn normalize_value(&self, x: f64) -> f64 {
        x / self.max_speed
    }

    pub fn denormalize_value(&self, x: f64) -> f64 {
        x * self.max_speed
    }

    pub fn normalize(&self, sm: &SpeedMatrix) -> Result<SpeedMatrix> {
        for r in 0..sm.steps() {
            for c in 0..sm.stations() {
                let v = sm.values.get(r, c);
                if v > self.max_speed || v < 0.0 {
                    return Err(Error::Validation(format!(
                        "value {v} at {} / station {} is outside [0, {}]",
                        sm.timestamps[r].format(TIMESTAMP_FORMAT),
                        sm.station_ids[c],
                        self.max_speed
                    )));
                }
            }
        }
        Ok(SpeedMatrix {
            values: sm.values.map(|v| self.normalize_value(v)),
            ..sm.clone()
        })
    }

    pub fn denormalize(&self, sm: &SpeedMatrix) -> SpeedMatrix {
        SpeedMatrix {
            values: sm.values.map(|v| self.denormalize_value(v)),
            ..sm.clone()
        }
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    /// Index of the first source row covered by the window.
    pub start: usize,
    /// `T × D`
    pub input: Matrix,
    /// `T × D`, 1 where observed.
    pub mask: Matrix,
    /// `1 × D`, the step right after the window.
    pub target: Matrix,
    /// `1 × D`, 0 where the target itself is a native gap.
    pub target_mask: Matrix,
}

/// A mini-batch in model layout: `T` matrices of `batch × D`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Matrix>,
    pub masks: Vec<Matrix>,
    pub target: Matrix,
    pub target_mask: Matrix,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.target.rows()
    }

    pub fn window(&self) -> usize {
        self.inputs.len()
    }

    pub fn from_samples(samples: &[&SequenceSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Argument("empty batch".into()))?;
        let (t, d) = first.input.shape();
        let b = samples.len();
        let mut inputs = vec![Matrix::zeros(b, d); t];
        let mut masks = vec![Matrix::zeros(b, d); t];
        let mut target = Matrix::zeros(b, d);
        let mut target_mask = Matrix::zeros(b, d);
        for (r, s) in samples.iter().enumerate() {
            if s.input.shape() != (t, d) {
                return Err(Error::Shape {
                    op: "batch sample",
                    left: s.input.shape(),
                    right: (t, d),
                });
            }
            for step in 0..t {
                inputs[step].row_mut(r).copy_from_slice(s.input.row(step));
                masks[step].row_mut(r).copy_from_slice(s.mask.row(step));
            }
            target.row_mut(r).copy_from_slice(s.target.row(0));
            target_mask.row_mut(r).copy_from_slice(s.target_mask.row(0));
        }
        Ok(Self {
            inputs,
            masks,
            target,
            target_mask,
        })
    }
}

/// Stride-1 sliding windows with one-step-ahead targets.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub samples: Vec<SequenceSample>,
    pub window: usize,
    pub dim: usize,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let picked: Vec<&SequenceSample> = indices.iter().map(|&i| &self.samples[i]).collect();
        Batch::from_samples(&picked)
    }

    /// Consecutive batches over the whole dataset in storage order.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let n = self.len();
        (0..n).step_by(batch_size.max(1)).map(move |s| {
            let idx: Vec<usize> = (s..(s + batch_size).min(n)).collect();
            self.batch(&idx)
        })
    }

    fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            window: self.window,
            dim: self.dim,
        }
    }

    /// Number of input positions with mask 0, summed over samples.
    pub fn missing_count(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.mask.data().iter().filter(|&&m| m == 0.0).count())
            .sum()
    }
}

pub fn make_windows(sm: &SpeedMatrix, window: usize) -> Result<WindowedDataset> {
    let total = sm.steps();
    if window == 0 || total <= window {
        return Err(Error::Argument(format!(
            "need more than {window} steps to build windows of length {window}, have {total}"
        )));
    }
    let d = sm.stations();
    let samples = (0..total - window)
        .map(|i| {
            let rows = |m: &Matrix, from: usize, n: usize| {
                Matrix::new(n, d, m.data()[from * d..(from + n) * d].to_vec())
                    .expect("slice length matches")
            };
            SequenceSample {
                start: i,
                input: rows(&sm.values, i, window),
                mask: rows(&sm.native_mask, i, window),
                target: rows(&sm.values, i + window, 1),
                target_mask: rows(&sm.native_mask, i + window, 1),
            }
        })
        .collect();
    Ok(WindowedDataset {
        samples,
        window,
        dim: d,
    })
}

/// Integer split ratios, e.g. 6:2:2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatios {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 6,
            val: 2,
            test: 2,
        }
    }
}

/// Shuffles (seeded) and partitions into `⌊train·n⌋ / ⌊val·n⌋ / rest`.
pub fn split(
    ds: &WindowedDataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(WindowedDataset, WindowedDataset, WindowedDataset)> {
    let total = ratios.train + ratios.val + ratios.test;
    if total == 0 {
        return Err(Error::Argument("split ratios sum to zero".into()));
    }
    let n = ds.len();
    let n_train = n * ratios.train / total;
    let n_val = n * ratios.val / total;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Config(format!(
            "{n} samples leave an empty partition under {}:{}:{}",
            ratios.train, ratios.val, ratios.test
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    Ok((
        ds.subset(&order[..n_train]),
        ds.subset(&order[n_train..n_train + n_val]),
        ds.subset(&order[n_train + n_val..]),
    ))
}

/// `round(rate · n)` with halves rounded up, tolerant of representation
/// error in `rate`.
pub fn missing_count(rate: f64, n: usize) -> usize {
    let x = ((rate * n as f64) * 1e9).round() / 1e9;
    (x + 0.5).floor() as usize
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Argument(format!("missing rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Random scenario: in every sample, exactly `round(p·T·D)` observed input
/// cells are zeroed and masked. Targets are never touched.
pub fn corrupt_random(ds: &WindowedDataset, rate: f64, seed: u64) -> Result<WindowedDataset> {
    check_rate(rate)?;
    let want = missing_count(rate, ds.window * ds.dim);
    let mut rng = Rng::new(seed);
    let mut out = ds.clone();
    for s in &mut out.samples {
        let pool: Vec<usize> = (0..s.mask.data().len())
            .filter(|&k| s.mask.data()[k] == 1.0)
            .collect();
        if pool.len() < want {
            return Err(Error::Argument(format!(
                "sample at row {} has {} observed cells, cannot remove {want}",
                s.start,
                pool.len()
            )));
        }
        for k in rng.choose_distinct(&pool, want) {
            s.input.data_mut()[k] = 0.0;
            s.mask.data_mut()[k] = 0.0;
        }
    }
    Ok(out)
}

/// Non-random scenario: in every sample, exactly `round(p·T)` whole time
/// steps are zeroed and masked across all stations.
pub fn corrupt_nonrandom(ds: &WindowedDataset, rate: f64, seed: u64) -> Result<WindowedDataset> {
    check_rate(rate)?;
    let want = missing_count(rate, ds.window);
    let mut rng = Rng::new(seed);
    let mut out = ds.clone();
    for s in &mut out.samples {
        let pool: Vec<usize> = (0..ds.window)
            .filter(|&r| s.mask.row(r).iter().any(|&m| m == 1.0))
            .collect();
        if pool.len() < want {
            return Err(Error::Argument(format!(
                "sample at row {} has {} observed steps, cannot remove {want}",
                s.start,
                pool.len()
            )));
        }
        for r in rng.choose_distinct(&pool, want) {
            s.input.row_mut(r).fill(0.0);
            s.mask.row_mut(r).fill(0.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Random,
    NonRandom,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Scenario::Random),
            "nonrandom" | "non-random" => Ok(Scenario::NonRandom),
            other => Err(Error::Config(format!(
                "unknown scenario '{other}' (valid: random, nonrandom)"
            ))),
        }
    }
}

pub fn corrupt(ds: &WindowedDataset, scenario: Scenario, rate: f64, seed: u64) -> Result<WindowedDataset> {
    match scenario {
        Scenario::Random => corrupt_random(ds, rate, seed),
        Scenario::NonRandom => corrupt_nonrandom(ds, rate, seed),
    }
}

/// Writes windowed inputs as two CSVs (values and mask). Each window
/// contributes `T` rows tagged with its start row: `window,timestamp,<ids>`.
pub fn write_windowed_csv<W: Write>(
    ds: &WindowedDataset,
    source: &SpeedMatrix,
    norm: Option<&Normalizer>,
    values_out: W,
    mask_out: W,
) -> Result<()> {
    let mut vw = csv::Writer::from_writer(values_out);
    let mut mw = csv::Writer::from_writer(mask_out);
    let mut header = vec!["window".to_string(), "timestamp".to_string()];
    header.extend(source.station_ids.iter().cloned());
    vw.write_record(&header)?;
    mw.write_record(&header)?;
    for s in &ds.samples {
        for step in 0..ds.window {
            let ts = source.timestamps[s.start + step].format(TIMESTAMP_FORMAT).to_string();
            let mut vrow = vec![s.start.to_string(), ts.clone()];
            let mut mrow = vec![s.start.to_string(), ts];
            for c in 0..ds.dim {
                let v = s.input.get(step, c);
                let v = norm.map_or(v, |n| n.denormalize_value(v));
                vrow.push(format!("{v}"));
                mrow.push(format!("{}", s.mask.get(step, c) as u8));
            }
            vw.write_record(&vrow)?;
            mw.write_record(&mrow)?;
        }
    }
    vw.flush()?;
    mw.flush()?;
    Ok(())
}

/// Reads a windowed values/mask pair back into `(start, input, mask)` triples.
pub fn read_windowed_csv(
    values_path: impl AsRef<Path>,
    mask_path: impl AsRef<Path>,
    window: usize,
) -> Result<Vec<(usize, Matrix, Matrix)>> {
    fn read(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<f64>)>)> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {} cells, found {}", header.len(), rec.len()),
                });
            }
            let start: usize = rec[0].parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad window index '{}'", &rec[0]),
            })?;
            let vals = rec
                .iter()
                .skip(2)
                .map(|c| {
                    c.trim().parse::<f64>().map_err(|_| Error::Parse {
                        line,
                        msg: format!("cannot parse '{c}'"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push((start, vals));
        }
        Ok((header, rows))
    }
    let (vh, vrows) = read(values_path.as_ref())?;
    let (mh, mrows) = read(mask_path.as_ref())?;
    if vh != mh || vrows.len() != mrows.len() {
        return Err(Error::Validation("windowed values and mask files do not align".into()));
    }
    if window == 0 || vrows.len() % window != 0 {
        return Err(Error::Validation(format!(
            "{} windowed rows is not a multiple of the window length {window}",
            vrows.len()
        )));
    }
    let d = vh.len() - 2;
    let mut out = Vec::with_capacity(vrows.len() / window);
    for (chunk_v, chunk_m) in vrows.chunks(window).zip(mrows.chunks(window)) {
        let start = chunk_v[0].0;
        if chunk_v.iter().chain(chunk_m).any(|(s, _)| *s != start) {
            return Err(Error::Validation(format!("window {start} rows are not contiguous")));
        }
        let flat = |rows: &[(usize, Vec<f64>)]| rows.iter().flat_map(|(_, v)| v.clone()).collect::<Vec<_>>();
        out.push((start, Matrix::new(window, d, flat(chunk_v))?, Matrix::new(window, d, flat(chunk_m))?));
    }
    Ok(out)
}

/// Parameters of the synthetic traffic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthProfile {
    pub free_flow_mph: f64,
    pub peak_dip_mph: f64,
    pub noise_sigma: f64,
    pub stations: usize,
    pub days: usize,
    pub seed: u64,
    /// When false every day follows the weekday pattern.
    pub weekends: bool,
    /// Correlation of noise between adjacent stations.
    pub spatial_corr: f64,
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            free_flow_mph: 65.0,
            peak_dip_mph: 30.0,
            noise_sigma: 1.5,
            stations: 10,
            days: 28,
            seed: 1,
            weekends: true,
            spatial_corr: 0.5,
        }
    }
}

impl SynthProfile {
    /// Parses flat `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |e: String| Error::Parse {
                line: i + 1,
                msg: format!("{k}: {e}"),
            };
            match k {
                "free_flow_mph" => p.free_flow_mph = v.parse().map_err(|e| bad(format!("{e}")))?,
                "peak_dip_mph" => p.peak_dip_mph = v.parse().map_err(|e| bad(format!("{e}")))?,
                "noise_sigma" => p.noise_sigma = v.parse().map_err(|e| bad(format!("{e}")))?,
                "stations" => p.stations = v.parse().map_err(|e| bad(format!("{e}")))?,
                "days" => p.days = v.parse().map_err(|e| bad(format!("{e}")))?,
                "seed" => p.seed = v.parse().map_err(|e| bad(format!("{e}")))?,
                "weekends" => p.weekends = v.parse().map_err(|e| bad(format!("{e}")))?,
                "spatial_corr" => p.spatial_corr = v.parse().map_err(|e| bad(format!("{e}")))?,
                other => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("unknown profile key '{other}'"),
                    })
                }
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn to_text(&self) -> String {
        let mut m = BTreeMap::new();
        m.insert("free_flow_mph", self.free_flow_mph.to_string());
        m.insert("peak_dip_mph", self.peak_dip_mph.to_string());
        m.insert("noise_sigma", self.noise_sigma.to_string());
        m.insert("stations", self.stations.to_string());
        m.insert("days", self.days.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("weekends", self.weekends.to_string());
        m.insert("spatial_corr", self.spatial_corr.to_string());
        m.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.free_flow_mph > 0.0) {
            return Err(Error::Argument("free_flow_mph must be positive".into()));
        }
        if !(0.0..self.free_flow_mph).contains(&self.peak_dip_mph) {
            return Err(Error::Argument("peak_dip_mph must lie in [0, free_flow_mph)".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Argument("noise_sigma must be non-negative".into()));
        }
        if self.stations == 0 || self.days == 0 {
            return Err(Error::Argument("stations and days must be positive".into()));
        }
        if !(-1.0..1.0).contains(&self.spatial_corr) {
            return Err(Error::Argument("spatial_corr must lie in (-1, 1)".into()));
        }
        Ok(())
    }
}

fn bump(hour: f64, center: f64, width: f64) -> f64 {
    let z = (hour - center) / width;
    (-0.5 * z * z).exp()
}

/// Generates a 5-minute speed series starting 2015-01-01 00:00.
///
/// Weekdays carry a morning and an evening congestion dip whose timing
/// shifts slightly from station to station; weekends get a mild midday dip.
/// Noise is independent in time and AR(1)-correlated along the station axis.
pub fn synth(profile: &SynthProfile) -> Result<SpeedMatrix> {
    profile.validate()?;
    let mut rng = Rng::new(profile.seed);
    let d = profile.stations;
    let ff = profile.free_flow_mph;
    struct Station {
        free_flow: f64,
        am_depth: f64,
        pm_depth: f64,
        am_center: f64,
        pm_center: f64,
    }
    let stations: Vec<Station> = (0..d)
        .map(|s| Station {
            free_flow: ff - rng.uniform(0.0, 0.08 * ff),
            am_depth: profile.peak_dip_mph * rng.uniform(0.7, 1.0),
            pm_depth: profile.peak_dip_mph * rng.uniform(0.7, 1.0),
            am_center: 7.75 + 0.08 * s as f64 + rng.uniform(-0.1, 0.1),
            pm_center: 17.5 - 0.08 * s as f64 + rng.uniform(-0.1, 0.1),
        })
        .collect();

    let start = NaiveDate::from_ymd_opt(2015, 1, 1)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time");
    let steps = profile.days * STEPS_PER_DAY;
    let mut values = Matrix::zeros(steps, d);
    let rho = profile.spatial_corr;
    let innovation = (1.0 - rho * rho).sqrt();
    for r in 0..steps {
        let ts = start + Duration::minutes(5 * r as i64);
        let hour = ts.hour() as f64 + ts.minute() as f64 / 60.0;
        let weekend = profile.weekends && matches!(ts.weekday(), Weekday::Sat | Weekday::Sun);
        let mut carry = 0.0;
        for (c, st) in stations.iter().enumerate() {
            let base = if weekend {
                st.free_flow - 0.2 * profile.peak_dip_mph * bump(hour, 14.0, 2.0)
            } else {
                st.free_flow
                    - st.am_depth * bump(hour, st.am_center, 1.2)
                    - st.pm_depth * bump(hour, st.pm_center, 1.5)
            };
            let z = rng.normal(0.0, 1.0);
            carry = if c == 0 { z } else { rho * carry + innovation * z };
            let v = (base + profile.noise_sigma * carry).clamp(1.0, ff);
            values.set(r, c, v);
        }
    }
    let ids = (0..d).map(|s| format!("S{:03}", s + 1)).collect();
    SpeedMatrix::from_values(start, 5, ids, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "timestamp,A,B\n\
        2015-01-01T00:00:00,60.5,61\n\
        2015-01-01T00:05:00,58,\n\
        2015-01-01T00:10:00,57.25,59.5\n";

    fn fixture() -> SpeedMatrix {
        read_speed_csv(FIXTURE.as_bytes(), CsvOptions::default()).unwrap()
    }

    #[test]
    fn loads_handwritten_csv_exactly() {
        let sm = fixture();
        assert_eq!(sm.station_ids, vec!["A", "B"]);
        assert_eq!(sm.values.data(), &[60.5, 61.0, 58.0, 0.0, 57.25, 59.5]);
        assert_eq!(sm.native_mask.data(), &[1.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn csv_round_trips_byte_identically() {
        let sm = fixture();
        let mut buf = Vec::new();
        write_speed_csv(&sm, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), FIXTURE);
        let again = read_speed_csv(buf.as_slice(), CsvOptions::default()).unwrap();
        assert_eq!(again, sm);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let ragged = "timestamp,A,B\n2015-01-01T00:00:00,1,2\n2015-01-01T00:05:00,1\n";
        match read_speed_csv(ragged.as_bytes(), CsvOptions::default()) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let bad_float = "timestamp,A\n2015-01-01T00:00:00,abc\n";
        assert!(matches!(
            read_speed_csv(bad_float.as_bytes(), CsvOptions::default()),
            Err(Error::Parse { line: 2, .. })
        ));
        let backwards = "timestamp,A\n2015-01-01T00:05:00,1\n2015-01-01T00:00:00,1\n";
        assert!(matches!(
            read_speed_csv(backwards.as_bytes(), CsvOptions::default()),
            Err(Error::Parse { line: 3, .. })
        ));
        let gap = "timestamp,A\n2015-01-01T00:00:00,1\n2015-01-01T00:15:00,1\n";
        assert!(read_speed_csv(gap.as_bytes(), CsvOptions::default()).is_err());
        assert!(read_speed_csv(gap.as_bytes(), CsvOptions { spacing_minutes: None }).is_ok());
    }

    #[test]
    fn ten_station_day_fixture_shape() {
        let profile = SynthProfile {
            stations: 10,
            days: 1,
            ..SynthProfile::default()
        };
        let mut buf = Vec::new();
        write_speed_csv(&synth(&profile).unwrap(), &mut buf).unwrap();
        let sm = read_speed_csv(buf.as_slice(), CsvOptions::default()).unwrap();
        assert_eq!(sm.stations(), 10);
        assert_eq!(sm.steps(), 288);
    }

    #[test]
    fn window_counts_and_targets() {
        let values = Matrix::new(12, 1, (0..12).map(f64::from).collect()).unwrap();
        let sm = SpeedMatrix::from_values(
            NaiveDate::from_ymd_opt(2015, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
            5,
            vec!["A".into()],
            values,
        )
        .unwrap();
        let ds = make_windows(&sm, 10).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[0].target.get(0, 0), 10.0);
        assert_eq!(ds.samples[1].input.get(0, 0), 1.0);
        assert!(make_windows(&sm, 12).is_err());
    }

    fn synthetic_windows(d: usize, n_rows: usize, t: usize) -> WindowedDataset {
        let values = Matrix::new(n_rows, d, (0..n_rows * d).map(|k| 0.1 + (k % 7) as f64 * 0.1).collect()).unwrap();
        let sm = SpeedMatrix::from_values(
            NaiveDate::from_ymd_opt(2015, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
            5,
            (0..d).map(|i| format!("S{i}")).collect(),
            values,
        )
        .unwrap();
        make_windows(&sm, t).unwrap()
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = synthetic_windows(1, 110, 10);
        assert_eq!(ds.len(), 100);
        let (a, b, c) = split(&ds, SplitRatios::default(), 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
        let mut starts: Vec<usize> = a.samples.iter().chain(&b.samples).chain(&c.samples).map(|s| s.start).collect();
        starts.sort_unstable();
        assert_eq!(starts, (0..100).collect::<Vec<_>>());
        let (a2, _, _) = split(&ds, SplitRatios::default(), 3).unwrap();
        assert_eq!(a, a2);
        let tiny = synthetic_windows(1, 13, 10);
        assert!(split(&tiny, SplitRatios::default(), 1).is_err());
    }

    #[test]
    fn random_corruption_is_exact_and_seeded() {
        let ds = synthetic_windows(5, 40, 10);
        let c = corrupt_random(&ds, 0.2, 9).unwrap();
        for (orig, s) in ds.samples.iter().zip(&c.samples) {
            assert_eq!(s.mask.data().iter().filter(|&&m| m == 0.0).count(), 10);
            for k in 0..50 {
                if s.mask.data()[k] == 0.0 {
                    assert_eq!(s.input.data()[k], 0.0);
                } else {
                    assert_eq!(s.input.data()[k], orig.input.data()[k]);
                }
            }
            assert_eq!(s.target, orig.target);
        }
        assert_eq!(c, corrupt_random(&ds, 0.2, 9).unwrap());
        assert_ne!(c, corrupt_random(&ds, 0.2, 10).unwrap());
        assert_eq!(corrupt_random(&ds, 0.0, 9).unwrap(), ds);
    }

    #[test]
    fn random_corruption_skips_native_gaps() {
        let mut ds = synthetic_windows(2, 12, 10);
        for k in 0..19 {
            ds.samples[0].mask.data_mut()[k] = 0.0;
            ds.samples[0].input.data_mut()[k] = 0.0;
        }
        // one observed cell left, two requested
        assert!(corrupt_random(&ds, 0.1, 1).is_err());
        let c = corrupt_random(&ds, 0.05, 1).unwrap();
        assert_eq!(c.samples[0].mask.data().iter().filter(|&&m| m == 0.0).count(), 20);
    }

    #[test]
    fn nonrandom_corruption_zeroes_whole_rows() {
        let ds = synthetic_windows(4, 30, 10);
        for (rate, rows) in [(0.2, 2), (0.4, 4), (0.8, 8)] {
            let c = corrupt_nonrandom(&ds, rate, 5).unwrap();
            for s in &c.samples {
                let zero_rows = (0..10).filter(|&r| s.mask.row(r).iter().all(|&m| m == 0.0)).count();
                let partial = (0..10).filter(|&r| {
                    let z = s.mask.row(r).iter().filter(|&&m| m == 0.0).count();
                    z > 0 && z < 4
                }).count();
                assert_eq!(zero_rows, rows);
                assert_eq!(partial, 0);
            }
        }
        let a = corrupt_nonrandom(&ds, 0.2, 1).unwrap();
        let b = corrupt_nonrandom(&ds, 0.2, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(missing_count(0.2, 50), 10);
        assert_eq!(missing_count(0.25, 10), 3);
        assert_eq!(missing_count(0.15, 10), 2);
        assert_eq!(missing_count(0.8, 10), 8);
    }

    #[test]
    fn normalizer_contract() {
        let n = Normalizer::new(80.0).unwrap();
        assert_eq!(n.normalize_value(60.0), 0.75);
        for v in [0.0, 12.3, 59.99, 80.0] {
            assert!((n.denormalize_value(n.normalize_value(v)) - v).abs() < 1e-12);
        }
        assert!(Normalizer::new(0.0).is_err());
        let sm = fixture();
        assert_eq!(Normalizer::fit(&sm).unwrap().max_speed(), 65.0);
        let err = Normalizer::new(60.0).unwrap().normalize(&sm).unwrap_err();
        assert!(err.to_string().contains("station A"), "{err}");
    }

    #[test]
    fn synth_is_periodic_without_noise_and_bounded() {
        let p = SynthProfile {
            noise_sigma: 0.0,
            weekends: false,
            days: 3,
            ..SynthProfile::default()
        };
        let sm = synth(&p).unwrap();
        for r in 0..sm.steps() - STEPS_PER_DAY {
            assert_eq!(sm.values.row(r), sm.values.row(r + STEPS_PER_DAY));
        }
        let noisy = synth(&SynthProfile::default()).unwrap();
        assert!(noisy.values.data().iter().all(|&v| v > 0.0 && v <= 65.0));
        assert_eq!(noisy, synth(&SynthProfile::default()).unwrap());
    }

    #[test]
    fn synth_daily_autocorrelation_is_high() {
        let p = SynthProfile {
            days: 14,
            weekends: false,
            ..SynthProfile::default()
        };
        let sm = synth(&p).unwrap();
        for c in 0..sm.stations() {
            let col: Vec<f64> = (0..sm.steps()).map(|r| sm.values.get(r, c)).collect();
            let n = col.len() - STEPS_PER_DAY;
            let (a, b) = (&col[..n], &col[STEPS_PER_DAY..]);
            let (ma, mb) = (a.iter().sum::<f64>() / n as f64, b.iter().sum::<f64>() / n as f64);
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            let acf = cov / (va * vb).sqrt();
            assert!(acf > 0.9, "station {c}: lag-288 autocorrelation {acf}");
        }
    }

    #[test]
    fn profile_text_round_trip() {
        let p = SynthProfile {
            noise_sigma: 1.25,
            stations: 4,
            ..SynthProfile::default()
        };
        assert_eq!(SynthProfile::parse(&p.to_text()).unwrap(), p);
        assert!(SynthProfile::parse("bogus=1").is_err());
        assert!(SynthProfile::parse("stations").is_err());
    }

    #[test]
    fn windowed_csv_round_trip() {
        let sm = fixture();
        let ds = make_windows(&sm, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (vp, mp) = (dir.path().join("v.csv"), dir.path().join("m.csv"));
        write_windowed_csv(
            &ds,
            &sm,
            None,
            std::fs::File::create(&vp).unwrap(),
            std::fs::File::create(&mp).unwrap(),
        )
        .unwrap();
        let back = read_windowed_csv(&vp, &mp, 2).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].1, ds.samples[0].input);
        assert_eq!(back[0].2, ds.samples[0].mask);
    }
}
