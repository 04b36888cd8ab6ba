//! Irregularly sampled multivariate series: instances, masking, file I/O and
//! the benchmark task protocol.
//!
//! Missing values are coded as `NaN` in memory and as JSON `null` on disk.
//! `NaN` never leaves this module; everything downstream works on
//! [`ChannelView`] or on filled-and-masked copies.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("instance {id}: {message}")]
    Validation { id: String, message: String },
    #[error("no observed target values")]
    EmptyTarget,
    #[error("instance {id} cannot be split: {reason}")]
    Unsplittable { id: String, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One forecasting instance. A raw series has empty `query_times`/`targets`.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub times: Vec<f64>,
    /// `N×C`, `NaN` marks a missing value.
    pub values: Vec<Vec<f64>>,
    pub query_times: Vec<f64>,
    /// `K×C`, `NaN` marks a missing target.
    pub targets: Vec<Vec<f64>>,
}

fn strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

impl Instance {
    pub fn channels(&self) -> usize {
        self.values
            .first()
            .or(self.targets.first())
            .map_or(0, Vec::len)
    }

    pub fn is_raw(&self) -> bool {
        self.query_times.is_empty()
    }

    /// Number of observed target scalars (`Σ N_k`).
    pub fn target_count(&self) -> usize {
        self.targets
            .iter()
            .flatten()
            .filter(|v| !v.is_nan())
            .count()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let fail = |message: String| {
            Err(DataError::Validation {
                id: self.id.clone(),
                message,
            })
        };
        if self.times.len() != self.values.len() {
            return fail(format!(
                "{} times but {} value rows",
                self.times.len(),
                self.values.len()
            ));
        }
        if self.query_times.len() != self.targets.len() {
            return fail(format!(
                "{} query times but {} target rows",
                self.query_times.len(),
                self.targets.len()
            ));
        }
        if self.times.iter().chain(&self.query_times).any(|t| !t.is_finite()) {
            return fail("non-finite time".into());
        }
        if !strictly_increasing(&self.times) {
            return fail("observation times are not strictly increasing".into());
        }
        if !strictly_increasing(&self.query_times) {
            return fail("query times are not strictly increasing".into());
        }
        if let (Some(last), Some(first_q)) = (self.times.last(), self.query_times.first()) {
            if first_q <= last {
                return fail(format!(
                    "query time {first_q} does not follow last observation {last}"
                ));
            }
        }
        for (what, rows) in [("values", &self.values), ("targets", &self.targets)] {
            for (i, row) in rows.iter().enumerate() {
                if row.len() != channels {
                    return fail(format!("{what} row {i} has {} entries, expected {channels}", row.len()));
                }
                if row.iter().all(|v| v.is_nan()) {
                    return fail(format!("{what} row {i} has no observed entry"));
                }
                if row.iter().any(|v| v.is_infinite()) {
                    return fail(format!("{what} row {i} has an infinite entry"));
                }
            }
        }
        Ok(())
    }
}

/// Observed values of one channel with missing entries removed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChannelSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl ChannelSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelView {
    pub channels: Vec<ChannelSeries>,
}

impl ChannelView {
    pub fn observed_count(&self) -> usize {
        self.channels.iter().map(ChannelSeries::len).sum()
    }
}

/// Splits the observation matrix into per-channel `(times, values)` series.
pub fn channelize(instance: &Instance) -> ChannelView {
    let mut channels = vec![ChannelSeries::default(); instance.channels()];
    for (&t, row) in instance.times.iter().zip(&instance.values) {
        for (series, &v) in channels.iter_mut().zip(row) {
            if !v.is_nan() {
                series.times.push(t);
                series.values.push(v);
            }
        }
    }
    ChannelView { channels }
}

/// Targets prepared for the differentiable loss: missing entries filled with
/// zero and a 0/1 mask.
#[derive(Debug, Clone)]
pub struct MaskedTargets {
    filled: Tensor,
    mask: Tensor,
    count: usize,
}

impl MaskedTargets {
    pub fn new(targets: &[Vec<f64>]) -> Result<Self> {
        let filled: Vec<Vec<f64>> = targets
            .iter()
            .map(|r| r.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect())
            .collect();
        let mask: Vec<Vec<f64>> = targets
            .iter()
            .map(|r| r.iter().map(|v| if v.is_nan() { 0.0 } else { 1.0 }).collect())
            .collect();
        let count = targets.iter().flatten().filter(|v| !v.is_nan()).count();
        Ok(MaskedTargets {
            filled: Tensor::from_rows(&filled)?,
            mask: Tensor::from_rows(&mask)?,
            count,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Sum of squared residuals over observed targets.
    pub fn squared_error(&self, tape: &mut Tape, pred: &Tensor) -> Result<Tensor> {
        let diff = tape.sub(pred, &self.filled)?;
        let masked = tape.mul(&diff, &self.mask)?;
        let sq = tape.mul(&masked, &masked)?;
        Ok(tape.sum(&sq))
    }
}

/// Squared error averaged over all observed target scalars, on the tape.
/// Missing positions contribute neither value nor gradient.
pub fn masked_loss(tape: &mut Tape, targets: &[Vec<f64>], pred: &Tensor) -> Result<Tensor> {
    let m = MaskedTargets::new(targets)?;
    if m.count == 0 {
        return Err(DataError::EmptyTarget);
    }
    let sse = m.squared_error(tape, pred)?;
    Ok(tape.scale(&sse, 1.0 / m.count as f64))
}

/// Plain-value form of [`masked_loss`].
pub fn masked_mse(targets: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<f64> {
    let (sse, count) = masked_sse(targets, pred)?;
    if count == 0 {
        return Err(DataError::EmptyTarget);
    }
    Ok(sse / count as f64)
}

/// `(Σ squared residuals, observed count)` over the observed targets.
pub fn masked_sse(targets: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<(f64, usize)> {
    if targets.len() != pred.len() {
        return Err(TensorError::Shape {
            op: "masked_sse",
            lhs: vec![targets.len()],
            rhs: vec![pred.len()],
        }
        .into());
    }
    let mut sse = 0.0;
    let mut count = 0;
    for (y, p) in targets.iter().zip(pred) {
        if y.len() != p.len() {
            return Err(TensorError::Shape {
                op: "masked_sse",
                lhs: vec![y.len()],
                rhs: vec![p.len()],
            }
            .into());
        }
        for (a, b) in y.iter().zip(p) {
            if !a.is_nan() {
                sse += (a - b) * (a - b);
                count += 1;
            }
        }
    }
    Ok((sse, count))
}

/// Benchmark tasks: observe a time fraction, forecast what follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "obs75-next3")]
    Obs75Next3,
    #[serde(rename = "obs75-fc25")]
    Obs75Fc25,
    #[serde(rename = "obs50-fc50")]
    Obs50Fc50,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Obs75Next3, TaskKind::Obs75Fc25, TaskKind::Obs50Fc50];

    pub fn cutoff(self) -> f64 {
        match self {
            TaskKind::Obs75Next3 | TaskKind::Obs75Fc25 => 0.75,
            TaskKind::Obs50Fc50 => 0.5,
        }
    }

    /// Maximum number of forecast time points, `None` for "all remaining".
    pub fn horizon(self) -> Option<usize> {
        match self {
            TaskKind::Obs75Next3 => Some(3),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Obs75Next3 => "obs75-next3",
            TaskKind::Obs75Fc25 => "obs75-fc25",
            TaskKind::Obs50Fc50 => "obs50-fc50",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                format!("unknown task {s:?}; expected one of obs75-next3, obs75-fc25, obs50-fc50")
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub instance: Instance,
    /// Fewer forecast points were available than the task asks for.
    pub short_horizon: bool,
}

/// Turns a raw series into an input/forecast instance. Observations at or
/// before the cutoff time are the input.
pub fn apply_task_split(series: &Instance, task: TaskKind) -> Result<SplitOutcome> {
    let unsplittable = |reason: &str| DataError::Unsplittable {
        id: series.id.clone(),
        reason: reason.into(),
    };
    if series.times.len() < 2 {
        return Err(unsplittable("fewer than two observation time points"));
    }
    let t_min = series.times[0];
    let t_max = *series.times.last().unwrap_or(&t_min);
    let cutoff = t_min + task.cutoff() * (t_max - t_min);
    let n_input = series.times.iter().take_while(|&&t| t <= cutoff).count();
    if n_input == 0 {
        return Err(unsplittable("no observation before the cutoff"));
    }
    let available = series.times.len() - n_input;
    if available == 0 {
        return Err(unsplittable("no time point after the cutoff"));
    }
    let n_query = task.horizon().map_or(available, |h| h.min(available));
    let short_horizon = task.horizon().is_some_and(|h| available < h);
    let instance = Instance {
        id: series.id.clone(),
        times: series.times[..n_input].to_vec(),
        values: series.values[..n_input].to_vec(),
        query_times: series.times[n_input..n_input + n_query].to_vec(),
        targets: series.values[n_input..n_input + n_query].to_vec(),
    };
    Ok(SplitOutcome {
        instance,
        short_horizon,
    })
}

/// Index sets of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub n_folds: usize,
    pub valid_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for FoldSpec {
    fn default() -> Self {
        FoldSpec {
            n_folds: 5,
            valid_frac: 0.2,
            test_frac: 0.1,
            seed: 0,
        }
    }
}

/// Seeded k-fold assignment. Fold `k` tests on the `k`-th block of the
/// shuffled order; `valid_frac` of the remainder is held out for validation.
pub fn make_folds(n_items: usize, spec: &FoldSpec) -> Result<Vec<Fold>> {
    let FoldSpec {
        n_folds,
        valid_frac,
        test_frac,
        seed,
    } = *spec;
    if n_folds == 0 {
        return Err(DataError::Config("n_folds must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&valid_frac) || !(0.0..1.0).contains(&test_frac) {
        return Err(DataError::Config("fractions must lie in [0, 1)".into()));
    }
    if n_folds as f64 * test_frac > 1.0 + 1e-12 {
        return Err(DataError::Config(format!(
            "{n_folds} folds × test fraction {test_frac} exceeds the dataset"
        )));
    }
    let n_test = (n_items as f64 * test_frac).round() as usize;
    let rest = n_items - n_test;
    let n_valid = (rest as f64 * valid_frac).round() as usize;
    if n_test == 0 || n_valid == 0 || rest <= n_valid {
        return Err(DataError::Config(format!(
            "{n_items} instances are too few for test fraction {test_frac} and validation fraction {valid_frac}"
        )));
    }

    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut folds = Vec::with_capacity(n_folds);
    for k in 0..n_folds {
        let lo = k * n_test;
        let mut test = order[lo..lo + n_test].to_vec();
        let mut remainder: Vec<usize> = order[..lo]
            .iter()
            .chain(&order[lo + n_test..])
            .copied()
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        remainder.shuffle(&mut rng);
        let mut valid = remainder[..n_valid].to_vec();
        let mut train = remainder[n_valid..].to_vec();
        test.sort_unstable();
        valid.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, valid, test });
    }
    Ok(folds)
}

fn drop_missing_rows(times: &mut Vec<f64>, rows: &mut Vec<Vec<f64>>) {
    let keep: Vec<bool> = rows.iter().map(|r| r.iter().any(|v| !v.is_nan())).collect();
    let mut k = keep.iter();
    times.retain(|_| *k.next().unwrap_or(&false));
    let mut k = keep.iter();
    rows.retain(|_| *k.next().unwrap_or(&false));
}

/// Keeps each observed scalar independently with probability `keep_frac`.
/// Rows left without observations are dropped, then instances left without
/// observations (or, for split instances, without targets).
pub fn sparsify(instances: &[Instance], keep_frac: f64, seed: u64) -> Result<Vec<Instance>> {
    if !(keep_frac > 0.0 && keep_frac <= 1.0) {
        return Err(DataError::Config(format!(
            "keep fraction {keep_frac} outside (0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(instances.len());
    for inst in instances {
        let mut inst = inst.clone();
        let had_targets = !inst.is_raw();
        for v in inst
            .values
            .iter_mut()
            .chain(inst.targets.iter_mut())
            .flatten()
        {
            if !v.is_nan() && rng.gen::<f64>() >= keep_frac {
                *v = f64::NAN;
            }
        }
        drop_missing_rows(&mut inst.times, &mut inst.values);
        drop_missing_rows(&mut inst.query_times, &mut inst.targets);
        if inst.times.is_empty() || (had_targets && inst.query_times.is_empty()) {
            continue;
        }
        out.push(inst);
    }
    Ok(out)
}

/// Per-channel z-scoring statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Fits mean and population standard deviation over every observed
    /// scalar (inputs and targets) of `instances`.
    pub fn fit(instances: &[Instance], channels: usize) -> Self {
        let mut sum = vec![0.0; channels];
        let mut count = vec![0usize; channels];
        let rows = || {
            instances
                .iter()
                .flat_map(|i| i.values.iter().chain(&i.targets))
        };
        for row in rows() {
            for (c, v) in row.iter().enumerate() {
                if !v.is_nan() {
                    sum[c] += v;
                    count[c] += 1;
                }
            }
        }
        let mean: Vec<f64> = sum
            .iter()
            .zip(&count)
            .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
            .collect();
        let mut sq = vec![0.0; channels];
        for row in rows() {
            for (c, v) in row.iter().enumerate() {
                if !v.is_nan() {
                    sq[c] += (v - mean[c]) * (v - mean[c]);
                }
            }
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(s, &n)| {
                let sd = if n > 0 { (s / n as f64).sqrt() } else { 1.0 };
                if sd < 1e-8 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Normalization { mean, std }
    }

    fn map(&self, inst: &Instance, f: impl Fn(f64, usize) -> f64) -> Instance {
        let tx = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .map(|(c, &v)| if v.is_nan() { v } else { f(v, c) })
                        .collect()
                })
                .collect()
        };
        Instance {
            values: tx(&inst.values),
            targets: tx(&inst.targets),
            ..inst.clone()
        }
    }

    pub fn apply(&self, inst: &Instance) -> Instance {
        self.map(inst, |v, c| (v - self.mean[c]) / self.std[c])
    }

    pub fn invert(&self, inst: &Instance) -> Instance {
        self.map(inst, |v, c| v * self.std[c] + self.mean[c])
    }

    pub fn invert_value(&self, v: f64, channel: usize) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

/// How instance times are mapped before entering the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeRescale {
    /// Affine map of each instance's full (observation and query) range onto `[0, 1]`.
    #[default]
    PerInstanceUnit,
    None,
}

/// Constants of one instance's affine time map `t ↦ (t - origin) / span`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeScaling {
    pub origin: f64,
    pub span: f64,
}

impl TimeRescale {
    pub fn scaling(self, inst: &Instance) -> TimeScaling {
        match self {
            TimeRescale::None => TimeScaling {
                origin: 0.0,
                span: 1.0,
            },
            TimeRescale::PerInstanceUnit => {
                let first = inst
                    .times
                    .first()
                    .or(inst.query_times.first())
                    .copied()
                    .unwrap_or(0.0);
                let last = inst
                    .query_times
                    .last()
                    .or(inst.times.last())
                    .copied()
                    .unwrap_or(first);
                let span = last - first;
                TimeScaling {
                    origin: first,
                    span: if span > 0.0 { span } else { 1.0 },
                }
            }
        }
    }

    pub fn apply(self, inst: &Instance) -> Instance {
        let s = self.scaling(inst);
        let map = |ts: &[f64]| ts.iter().map(|t| (t - s.origin) / s.span).collect();
        Instance {
            times: map(&inst.times),
            query_times: map(&inst.query_times),
            ..inst.clone()
        }
    }
}

/// Sidecar metadata stored next to a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub channels: usize,
    pub channel_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    #[serde(default)]
    pub time_rescale: TimeRescale,
}

impl DatasetMeta {
    pub fn new(channels: usize) -> Self {
        DatasetMeta {
            channels,
            channel_names: (0..channels).map(|c| format!("ch{c}")).collect(),
            normalization: None,
            time_rescale: TimeRescale::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(channels: usize, instances: Vec<Instance>) -> Self {
        Dataset {
            meta: DatasetMeta::new(channels),
            instances,
        }
    }

    pub fn channels(&self) -> usize {
        self.meta.channels
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<Instance> {
        indices.iter().map(|&i| self.instances[i].clone()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Line {
    id: String,
    times: Vec<f64>,
    values: Vec<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query_times: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    targets: Option<Vec<Vec<Option<f64>>>>,
}

fn to_nan(rows: Vec<Vec<Option<f64>>>) -> Vec<Vec<f64>> {
    rows.into_iter()
        .map(|r| r.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
        .collect()
}

fn to_null(rows: &[Vec<f64>]) -> Vec<Vec<Option<f64>>> {
    rows.iter()
        .map(|r| r.iter().map(|&v| if v.is_nan() { None } else { Some(v) }).collect())
        .collect()
}

/// Path of the sidecar metadata for a dataset file: `x.jsonl` → `x.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes one instance as a JSON line.
pub fn instance_to_json(inst: &Instance) -> String {
    let line = Line {
        id: inst.id.clone(),
        times: inst.times.clone(),
        values: to_null(&inst.values),
        query_times: (!inst.is_raw()).then(|| inst.query_times.clone()),
        targets: (!inst.is_raw()).then(|| to_null(&inst.targets)),
    };
    serde_json::to_string(&line).expect("instance lines always serialize")
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for inst in &dataset.instances {
        writeln!(w, "{}", instance_to_json(inst)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    let meta = meta_path(path);
    let text = serde_json::to_string_pretty(&dataset.meta).expect("metadata serializes");
    std::fs::write(&meta, text + "\n").map_err(io_err(&meta))?;
    Ok(())
}

/// Parses JSON-lines text. `channels` is taken from the first line when not given.
pub fn parse_dataset(text: &str, channels: Option<usize>) -> Result<(usize, Vec<Instance>)> {
    let mut channels = channels;
    let mut instances = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(raw).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let c = *channels.get_or_insert_with(|| line.values.first().map_or(0, Vec::len));
        let rows = line.values.iter().chain(line.targets.iter().flatten());
        if let Some(bad) = rows.clone().find(|r| r.len() != c) {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("row has {} entries, expected {c} channels", bad.len()),
            });
        }
        if line.query_times.is_some() != line.targets.is_some() {
            return Err(DataError::Parse {
                line: line_no,
                message: "query_times and targets must appear together".into(),
            });
        }
        let inst = Instance {
            id: line.id,
            times: line.times,
            values: to_nan(line.values),
            query_times: line.query_times.unwrap_or_default(),
            targets: line.targets.map(to_nan).unwrap_or_default(),
        };
        inst.validate(c)?;
        instances.push(inst);
    }
    Ok((channels.unwrap_or(0), instances))
}

/// Loads a JSON-lines dataset and its sidecar metadata, when present.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let meta_file = meta_path(path);
    let meta: Option<DatasetMeta> = if meta_file.exists() {
        let f = File::open(&meta_file).map_err(io_err(&meta_file))?;
        Some(
            serde_json::from_reader(BufReader::new(f)).map_err(|e| DataError::Parse {
                line: e.line(),
                message: format!("{}: {e}", meta_file.display()),
            })?,
        )
    } else {
        None
    };
    let file = File::open(path).map_err(io_err(path))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(io_err(path))?);
        text.push('\n');
    }
    let (channels, instances) = parse_dataset(&text, meta.as_ref().map(|m| m.channels))?;
    Ok(Dataset {
        meta: meta.unwrap_or_else(|| DatasetMeta::new(channels)),
        instances,
    })
}
