//! The FLD model: attention encoder, parametric latent curve, MLP decoder.
//!
//! An attention encoder reads each channel's observed `(time, value)` pairs
//! and produces curve coefficients `θ ∈ R^{R×L}`. The latent state at a
//! query time is the curve evaluated at that time, and a feed-forward decoder
//! maps it to one prediction per channel.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{channelize, ChannelView, DataError, FoldSpec, Instance, Normalization, TimeRescale};
use crate::tensor::{Tape, Tensor, TensorError};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("instance has no observed value in any channel")]
    EmptyInput,
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint field {field}: {message}")]
    Checkpoint { field: String, message: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Parametric family of the latent curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    /// `θ₁·t + θ₂`
    Linear,
    /// `θ₁·t² + θ₂·t + θ₃`
    Quadratic,
    /// `θ₁ ⊙ sin(θ₂ + θ₃·t) + θ₄`
    Sine,
}

impl CurveKind {
    pub const ALL: [CurveKind; 3] = [CurveKind::Linear, CurveKind::Quadratic, CurveKind::Sine];

    /// Number of coefficient rows `R`.
    pub fn coefficients(self) -> usize {
        match self {
            CurveKind::Linear => 2,
            CurveKind::Quadratic => 3,
            CurveKind::Sine => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CurveKind::Linear => "linear",
            CurveKind::Quadratic => "quadratic",
            CurveKind::Sine => "sine",
        }
    }
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CurveKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" | "l" => Ok(CurveKind::Linear),
            "quadratic" | "q" => Ok(CurveKind::Quadratic),
            "sine" | "s" => Ok(CurveKind::Sine),
            _ => Err(format!(
                "unknown curve {s:?}; expected linear, quadratic or sine"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FldConfig {
    pub curve: CurveKind,
    /// Latent width `L`; also the width of every decoder hidden layer.
    pub latent: usize,
    pub heads: usize,
    /// Time-embedding size per head `D`.
    pub embed_dim: usize,
    /// Hidden layers in the decoder.
    pub decoder_depth: usize,
    pub channels: usize,
}

impl FldConfig {
    pub fn coefficients(&self) -> usize {
        self.curve.coefficients()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("latent", self.latent),
            ("heads", self.heads),
            ("embed_dim", self.embed_dim),
            ("decoder_depth", self.decoder_depth),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Names and shapes of every trainable tensor, in canonical order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (h, d, l, c, r) = (
            self.heads,
            self.embed_dim,
            self.latent,
            self.channels,
            self.coefficients(),
        );
        let mut out = vec![
            ("embed_a".to_string(), vec![h, d]),
            ("embed_b".to_string(), vec![h, d]),
        ];
        out.extend((0..h).map(|i| (format!("query.{i}"), vec![r, d])));
        out.push(("ff.weight".into(), vec![h * c, l]));
        out.push(("ff.bias".into(), vec![1, l]));
        for i in 0..self.decoder_depth {
            out.push((format!("decoder.{i}.weight"), vec![l, l]));
            out.push((format!("decoder.{i}.bias"), vec![1, l]));
        }
        out.push(("decoder.out.weight".into(), vec![l, c]));
        out.push(("decoder.out.bias".into(), vec![1, c]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Parameter group of a tensor name (`query.3` → `query`).
pub fn param_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// All trainable tensors of one model, in the order of
/// [`FldConfig::param_layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    heads: usize,
    depth: usize,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn new(config: &FldConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != tensors.len() {
            return Err(ModelError::Contract(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint {
                    field: name.clone(),
                    message: format!("shape {:?}, expected {shape:?}", t.shape()),
                });
            }
            if !t.is_finite() {
                return Err(ModelError::Checkpoint {
                    field: name.clone(),
                    message: "non-finite value".into(),
                });
            }
        }
        Ok(ModelParams {
            heads: config.heads,
            depth: config.decoder_depth,
            tensors,
        })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    /// Copy whose tensors are leaves of `tape`.
    pub fn attach(&self, tape: &mut Tape) -> ModelParams {
        ModelParams {
            heads: self.heads,
            depth: self.depth,
            tensors: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Same structure with replacement tensors (shapes are not rechecked).
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> ModelParams {
        debug_assert_eq!(tensors.len(), self.tensors.len());
        ModelParams {
            heads: self.heads,
            depth: self.depth,
            tensors,
        }
    }

    pub fn embed_a(&self) -> &Tensor {
        &self.tensors[0]
    }

    pub fn embed_b(&self) -> &Tensor {
        &self.tensors[1]
    }

    pub fn query(&self, head: usize) -> &Tensor {
        &self.tensors[2 + head]
    }

    pub fn ff_weight(&self) -> &Tensor {
        &self.tensors[2 + self.heads]
    }

    pub fn ff_bias(&self) -> &Tensor {
        &self.tensors[3 + self.heads]
    }

    /// `(weight, bias)` of hidden layer `i`; `i == depth` is the output layer.
    pub fn decoder_layer(&self, i: usize) -> (&Tensor, &Tensor) {
        let base = 4 + self.heads + 2 * i;
        (&self.tensors[base], &self.tensors[base + 1])
    }

    pub fn decoder_depth(&self) -> usize {
        self.depth
    }
}

/// Deterministic initialization: Glorot-uniform weights, zero biases, and
/// sine-embedding frequencies spread over `[1, 40]`.
pub fn init_params(config: &FldConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, d) = (config.heads, config.embed_dim);
    let sine_slots = h * (d - 1);
    let mut embed_a = vec![0.0; h * d];
    let mut slot = 0;
    for head in 0..h {
        embed_a[head * d] = 1.0;
        for k in 1..d {
            embed_a[head * d + k] = if sine_slots > 1 {
                1.0 + 39.0 * slot as f64 / (sine_slots - 1) as f64
            } else {
                1.0
            };
            slot += 1;
        }
    }
    let mut tensors = Vec::new();
    for (name, shape) in config.param_layout() {
        let n = shape.iter().product();
        let data = if name == "embed_a" {
            embed_a.clone()
        } else if name == "embed_b" || name.ends_with("bias") {
            vec![0.0; n]
        } else {
            let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
        };
        tensors.push(Tensor::new(shape, data)?);
    }
    ModelParams::new(config, tensors)
}

/// Embedding of a single time for head `h`: one linear component followed
/// by `D − 1` sinusoidal ones.
pub fn time_embed(t: f64, head: usize, params: &ModelParams) -> Vec<f64> {
    let a = params.embed_a();
    let b = params.embed_b();
    (0..a.cols())
        .map(|d| {
            let pre = a.get(head, d) * t + b.get(head, d);
            if d == 0 {
                pre
            } else {
                pre.sin()
            }
        })
        .collect()
}

fn selector(len: usize, index: usize) -> Tensor {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    Tensor::row(&v)
}

/// Time embeddings of `times` for one head, stacked to `N×D`.
fn embed_times(tape: &mut Tape, params: &ModelParams, head: usize, times: &[f64]) -> Result<Tensor> {
    let heads = params.embed_a().rows();
    let d = params.embed_a().cols();
    let sel = selector(heads, head);
    let a = tape.matmul(&sel, params.embed_a())?;
    let b = tape.matmul(&sel, params.embed_b())?;
    let n = times.len();
    let slope = tape.matmul(&Tensor::column(times), &a)?;
    let offset = tape.matmul(&Tensor::ones(&[n, 1]), &b)?;
    let pre = tape.add(&slope, &offset)?;
    let mut linear_mask = vec![0.0; n * d];
    for row in linear_mask.chunks_mut(d) {
        row[0] = 1.0;
    }
    let linear_mask = Tensor::new(vec![n, d], linear_mask)?;
    let sine_mask = Tensor::new(
        vec![n, d],
        linear_mask.data().iter().map(|m| 1.0 - m).collect(),
    )?;
    let lin = tape.mul(&pre, &linear_mask)?;
    let s = tape.sin(&pre);
    let sin = tape.mul(&s, &sine_mask)?;
    Ok(tape.add(&lin, &sin)?)
}

/// Curve coefficients `θ` (`R×L`).
#[derive(Debug, Clone, PartialEq)]
pub struct CurveCoefficients(pub Tensor);

impl CurveCoefficients {
    pub fn new(theta: Tensor) -> Self {
        CurveCoefficients(theta)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Encoder output with the attention weights kept for inspection.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub theta: CurveCoefficients,
    /// `A^{h,c}` at index `h·C + c`; `None` for channels without observations.
    pub attention: Vec<Option<Tensor>>,
}

/// Infers curve coefficients from the observed values of every channel.
pub fn encode(
    tape: &mut Tape,
    config: &FldConfig,
    params: &ModelParams,
    view: &ChannelView,
) -> Result<Encoding> {
    if view.channels.len() != config.channels {
        return Err(ModelError::Contract(format!(
            "instance has {} channels, model expects {}",
            view.channels.len(),
            config.channels
        )));
    }
    if view.observed_count() == 0 {
        return Err(ModelError::EmptyInput);
    }
    let r = config.coefficients();
    let inv_sqrt_d = 1.0 / (config.embed_dim as f64).sqrt();
    let mut columns = Vec::with_capacity(config.heads * config.channels);
    let mut attention = Vec::with_capacity(config.heads * config.channels);
    for h in 0..config.heads {
        for series in &view.channels {
            if series.is_empty() {
                columns.push(Tensor::zeros(&[r, 1]));
                attention.push(None);
                continue;
            }
            let keys = embed_times(tape, params, h, &series.times)?;
            let keys_t = tape.transpose(&keys)?;
            let raw = tape.matmul(params.query(h), &keys_t)?;
            let scores = tape.scale(&raw, inv_sqrt_d);
            let weights = tape.softmax_rows(&scores)?;
            columns.push(tape.matmul(&weights, &Tensor::column(&series.values))?);
            attention.push(Some(weights));
        }
    }
    let pooled = tape.concat_columns(&columns)?;
    let mixed = tape.matmul(&pooled, params.ff_weight())?;
    let bias = tape.matmul(&Tensor::ones(&[r, 1]), params.ff_bias())?;
    let theta = tape.add(&mixed, &bias)?;
    Ok(Encoding {
        theta: CurveCoefficients(theta),
        attention,
    })
}

/// Latent states at each of `times`, stacked to `K×L`.
pub fn latent_states(
    tape: &mut Tape,
    kind: CurveKind,
    theta: &CurveCoefficients,
    times: &[f64],
) -> Result<Tensor> {
    let theta = theta.tensor();
    let r = kind.coefficients();
    if theta.shape().len() != 2 || theta.rows() != r {
        return Err(ModelError::Contract(format!(
            "{kind} curve needs {r} coefficient rows, θ has shape {:?}",
            theta.shape()
        )));
    }
    let mut rows = Vec::with_capacity(r);
    for i in 0..r {
        rows.push(tape.matmul(&selector(r, i), theta)?);
    }
    let k = times.len();
    let ones = Tensor::ones(&[k, 1]);
    let t = Tensor::column(times);
    let z = match kind {
        CurveKind::Linear => {
            let slope = tape.matmul(&t, &rows[0])?;
            let icpt = tape.matmul(&ones, &rows[1])?;
            tape.add(&slope, &icpt)?
        }
        CurveKind::Quadratic => {
            let t2: Vec<f64> = times.iter().map(|x| x * x).collect();
            let a = tape.matmul(&Tensor::column(&t2), &rows[0])?;
            let b = tape.matmul(&t, &rows[1])?;
            let c = tape.matmul(&ones, &rows[2])?;
            let ab = tape.add(&a, &b)?;
            tape.add(&ab, &c)?
        }
        CurveKind::Sine => {
            let amp = tape.matmul(&ones, &rows[0])?;
            let phase = tape.matmul(&ones, &rows[1])?;
            let freq = tape.matmul(&t, &rows[2])?;
            let arg = tape.add(&phase, &freq)?;
            let wave = tape.sin(&arg);
            let scaled = tape.mul(&amp, &wave)?;
            let shift = tape.matmul(&ones, &rows[3])?;
            tape.add(&scaled, &shift)?
        }
    };
    Ok(z)
}

/// Latent state at a single time.
pub fn curve_eval(t: f64, theta: &CurveCoefficients, kind: CurveKind) -> Result<Vec<f64>> {
    Ok(latent_states(&mut Tape::new(), kind, &theta.detached(), &[t])?.to_vec())
}

impl CurveCoefficients {
    fn detached(&self) -> CurveCoefficients {
        CurveCoefficients(self.0.detach())
    }
}

/// Decoder: ReLU hidden layers of width `L`, then a linear map to `C`
/// outputs. Works row-wise on an `M×L` matrix of latent states.
pub fn decode(tape: &mut Tape, params: &ModelParams, z: &Tensor) -> Result<Tensor> {
    let m = z.rows();
    let ones = Tensor::ones(&[m, 1]);
    let mut h = z.clone();
    for i in 0..=params.decoder_depth() {
        let (w, b) = params.decoder_layer(i);
        let lin = tape.matmul(&h, w)?;
        let bias = tape.matmul(&ones, b)?;
        let pre = tape.add(&lin, &bias)?;
        h = if i < params.decoder_depth() {
            tape.relu(&pre)
        } else {
            pre
        };
    }
    Ok(h)
}

/// Full forward pass: encode, follow the curve to each query time, decode.
/// Returns `K×C` predictions.
pub fn forward(
    tape: &mut Tape,
    config: &FldConfig,
    params: &ModelParams,
    instance: &Instance,
) -> Result<Tensor> {
    let enc = encode(tape, config, params, &channelize(instance))?;
    if instance.query_times.is_empty() {
        return Ok(Tensor::zeros(&[0, config.channels]));
    }
    let z = latent_states(tape, config.curve, &enc.theta, &instance.query_times)?;
    decode(tape, params, &z)
}

/// Inference over many instances. Within each batch the latent states of all
/// instances are stacked and decoded together; rows are independent, so the
/// result does not depend on `batch_size`.
pub fn predict_batch(
    config: &FldConfig,
    params: &ModelParams,
    instances: &[Instance],
    batch_size: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let batch_size = batch_size.max(1);
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(batch_size) {
        let latents: Vec<Tensor> = chunk
            .par_iter()
            .map(|inst| {
                let mut tape = Tape::new();
                let enc = encode(&mut tape, config, params, &channelize(inst))?;
                latent_states(&mut tape, config.curve, &enc.theta, &inst.query_times)
            })
            .collect::<Result<_>>()?;
        let total: usize = latents.iter().map(Tensor::rows).sum();
        let mut stacked = Vec::with_capacity(total * config.latent);
        for z in &latents {
            stacked.extend_from_slice(z.data());
        }
        let z = Tensor::new(vec![total, config.latent], stacked)?;
        let y = decode(&mut Tape::new(), params, &z)?;
        let rows = y.to_rows();
        let mut offset = 0;
        for z in &latents {
            out.push(rows[offset..offset + z.rows()].to_vec());
            offset += z.rows();
        }
    }
    Ok(out)
}

/// Fold used to train a checkpoint, so evaluation can rebuild the same split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub fold: usize,
    pub folds: FoldSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Self-describing model file: configuration, preprocessing constants and
/// named weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: FldConfig,
    pub normalization: Normalization,
    pub time_rescale: TimeRescale,
    #[serde(default)]
    pub split: Option<SplitInfo>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(
        config: FldConfig,
        params: &ModelParams,
        normalization: Normalization,
        time_rescale: TimeRescale,
        split: Option<SplitInfo>,
    ) -> Self {
        let tensors = config
            .param_layout()
            .into_iter()
            .zip(params.tensors())
            .map(|((name, shape), t)| NamedTensor {
                name,
                shape,
                data: t.to_vec(),
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config,
            normalization,
            time_rescale,
            split,
            tensors,
        }
    }

    /// Rebuilds parameters, checking every tensor against the configuration.
    pub fn params(&self) -> Result<ModelParams> {
        let layout = self.config.param_layout();
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            let stored = self
                .tensors
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| ModelError::Checkpoint {
                    field: name.clone(),
                    message: "missing".into(),
                })?;
            if &stored.shape != shape || stored.data.len() != shape.iter().product::<usize>() {
                return Err(ModelError::Checkpoint {
                    field: name.clone(),
                    message: format!("shape {:?}, expected {shape:?}", stored.shape),
                });
            }
            tensors.push(Tensor::new(shape.clone(), stored.data.clone())?);
        }
        if let Some(extra) = self
            .tensors
            .iter()
            .find(|t| !layout.iter().any(|(n, _)| n == &t.name))
        {
            return Err(ModelError::Checkpoint {
                field: extra.name.clone(),
                message: "unexpected tensor".into(),
            });
        }
        if self.normalization.mean.len() != self.config.channels
            || self.normalization.std.len() != self.config.channels
        {
            return Err(ModelError::Checkpoint {
                field: "normalization".into(),
                message: format!("expected {} channels", self.config.channels),
            });
        }
        ModelParams::new(&self.config, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let text = serde_json::to_string(self).map_err(|e| ModelError::Checkpoint {
            field: "<root>".into(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ModelError::Checkpoint {
                field: "<root>".into(),
                message: e.to_string(),
            })?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            other => {
                return Err(ModelError::Checkpoint {
                    field: "format_version".into(),
                    message: format!("found {other:?}, supported {CHECKPOINT_VERSION}"),
                })
            }
        }
        let ck: Checkpoint = serde_json::from_value(value).map_err(|e| ModelError::Checkpoint {
            field: "<root>".into(),
            message: e.to_string(),
        })?;
        ck.params()?;
        Ok(ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Loads a checkpoint and requires it to match `expected`.
    pub fn load_for(path: &Path, expected: &FldConfig) -> Result<(Self, ModelParams)> {
        let ck = Self::load(path)?;
        if &ck.config != expected {
            let field = if ck.config.curve != expected.curve {
                "config.curve"
            } else if ck.config.latent != expected.latent {
                "config.latent"
            } else if ck.config.heads != expected.heads {
                "config.heads"
            } else if ck.config.embed_dim != expected.embed_dim {
                "config.embed_dim"
            } else if ck.config.decoder_depth != expected.decoder_depth {
                "config.decoder_depth"
            } else {
                "config.channels"
            };
            return Err(ModelError::Checkpoint {
                field: field.into(),
                message: "shape mismatch with the requested configuration".into(),
            });
        }
        let params = ck.params()?;
        Ok((ck, params))
    }
}
