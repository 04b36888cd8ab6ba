//! Adam with coupled L2, early-stopped training, pooled evaluation and
//! random hyperparameter search.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{masked_sse, DataError, Instance, MaskedTargets};
use crate::model::{
    forward, init_params, param_group, predict_batch, CurveKind, FldConfig, ModelError,
    ModelParams,
};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter group {group} ({name})")]
    NonFinite { group: String, name: String },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            l2: 1e-3,
            batch_size: 64,
            max_epochs: 300,
            patience: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.l2 >= 0.0) {
            return Err(TrainError::Config(format!("l2 weight {} must be non-negative", self.l2)));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config(
                "batch size, patience and max epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Adam moments for a list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update with `l2·w` added to each gradient.
    /// `names` label the tensors for diagnostics.
    pub fn step(
        &mut self,
        params: &[Tensor],
        grads: &[Tensor],
        names: &[String],
        lr: f64,
        l2: f64,
    ) -> Result<Vec<Tensor>> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TrainError::Config(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(TrainError::NonFinite {
                    group: param_group(&name).to_string(),
                    name,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut out = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data: Vec<f64> = p
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(j, (&w, &gw))| {
                    let g = gw + l2 * w;
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[j] / c1;
                    let v_hat = v[j] / c2;
                    w - lr * m_hat / (v_hat.sqrt() + self.eps)
                })
                .collect();
            out.push(Tensor::new(p.shape().to_vec(), data)?);
        }
        Ok(out)
    }
}

/// Summed gradients of one batch, with the loss normalized by the batch's
/// total count of observed targets.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub grads: Vec<Tensor>,
    pub sse: f64,
    pub count: usize,
}

pub fn batch_gradients(
    config: &FldConfig,
    params: &ModelParams,
    batch: &[Instance],
) -> Result<BatchGradients> {
    let count: usize = batch.iter().map(Instance::target_count).sum();
    let zeros = || {
        params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect::<Vec<_>>()
    };
    if count == 0 {
        return Ok(BatchGradients {
            grads: zeros(),
            sse: 0.0,
            count: 0,
        });
    }
    let weight = 1.0 / count as f64;
    let per_instance: Vec<(Vec<Tensor>, f64)> = batch
        .par_iter()
        .filter(|inst| inst.target_count() > 0)
        .map(|inst| -> Result<(Vec<Tensor>, f64)> {
            let mut tape = Tape::new();
            let bound = params.attach(&mut tape);
            let pred = forward(&mut tape, config, &bound, inst)?;
            let targets = MaskedTargets::new(&inst.targets)?;
            let sse = targets.squared_error(&mut tape, &pred)?;
            let loss = tape.scale(&sse, weight);
            let g = tape.backward(&loss)?;
            let grads = bound.tensors().iter().map(|p| g.get_or_zeros(p)).collect();
            Ok((grads, sse.item()?))
        })
        .collect::<Result<_>>()?;

    let mut sum: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut sse = 0.0;
    for (grads, s) in &per_instance {
        sse += s;
        for (acc, g) in sum.iter_mut().zip(grads) {
            for (a, v) in acc.iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    let grads = params
        .tensors()
        .iter()
        .zip(sum)
        .map(|(t, d)| Tensor::new(t.shape().to_vec(), d))
        .collect::<std::result::Result<_, _>>()?;
    Ok(BatchGradients { grads, sse, count })
}

/// Owns parameters and optimizer state across epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: FldConfig,
    pub train: TrainConfig,
    params: ModelParams,
    names: Vec<String>,
    adam: Adam,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: FldConfig, params: ModelParams, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let names = config.param_layout().into_iter().map(|(n, _)| n).collect();
        let adam = Adam::new(params.tensors());
        Ok(Trainer {
            config,
            train,
            params,
            names,
            adam,
            rng: ChaCha8Rng::seed_from_u64(train.seed),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Applies one optimizer step for `batch`; returns `(sse, count)` before the step.
    pub fn step(&mut self, batch: &[Instance]) -> Result<(f64, usize)> {
        let bg = batch_gradients(&self.config, &self.params, batch)?;
        if bg.count == 0 {
            return Ok((0.0, 0));
        }
        let updated = self.adam.step(
            self.params.tensors(),
            &bg.grads,
            &self.names,
            self.train.lr,
            self.train.l2,
        )?;
        self.params = self.params.with_tensors(updated);
        Ok((bg.sse, bg.count))
    }

    /// One pass over a reshuffled copy of `data`; returns the pooled training MSE.
    pub fn run_epoch(&mut self, data: &[Instance]) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sse = 0.0;
        let mut count = 0;
        for chunk in order.chunks(self.train.batch_size) {
            let batch: Vec<Instance> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (s, c) = self.step(&batch)?;
            sse += s;
            count += c;
        }
        Ok(if count > 0 { sse / count as f64 } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub valid_mse: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_valid_mse: f64,
    pub history: Vec<EpochRecord>,
}

/// Writes the history as `epoch,train_mse,valid_mse,seconds` CSV.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_mse,valid_mse,seconds\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{:.6}\n",
            r.epoch, r.train_mse, r.valid_mse, r.seconds
        ));
    }
    out
}

pub fn train(
    config: &FldConfig,
    init: ModelParams,
    train_set: &[Instance],
    valid_set: &[Instance],
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(config, init, train_set, valid_set, tc, |_| {})
}

/// Trains until `max_epochs` or until validation MSE has not improved for
/// `patience` epochs, returning the best parameters seen. `on_epoch` is
/// called after every epoch.
pub fn train_with(
    config: &FldConfig,
    init: ModelParams,
    train_set: &[Instance],
    valid_set: &[Instance],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training split".into()));
    }
    if valid_set.is_empty() {
        return Err(TrainError::Config("empty validation split".into()));
    }
    let mut trainer = Trainer::new(*config, init, *tc)?;
    let mut best = trainer.params().clone();
    let mut best_epoch = 0;
    let mut best_valid = f64::INFINITY;
    let mut stale = 0;
    let mut history = Vec::new();
    for epoch in 1..=tc.max_epochs {
        let start = Instant::now();
        let train_mse = trainer.run_epoch(train_set)?;
        let valid_mse = evaluate(config, trainer.params(), valid_set)?.mse;
        let record = EpochRecord {
            epoch,
            train_mse,
            valid_mse,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
        if valid_mse < best_valid {
            best_valid = valid_mse;
            best_epoch = epoch;
            best = trainer.params().clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_valid_mse: best_valid,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceLoss {
    pub id: String,
    pub sse: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    /// Pooled MSE over every observed target scalar.
    pub mse: f64,
    pub per_instance: Vec<InstanceLoss>,
}

pub const EVAL_BATCH: usize = 64;

/// Pooled squared error over all observed targets of `instances`.
pub fn evaluate(config: &FldConfig, params: &ModelParams, instances: &[Instance]) -> Result<Evaluation> {
    if let Some(bad) = instances
        .iter()
        .find(|i| i.channels() != config.channels)
    {
        return Err(ModelError::Contract(format!(
            "instance {} has {} channels, model expects {}",
            bad.id,
            bad.channels(),
            config.channels
        ))
        .into());
    }
    let preds = predict_batch(config, params, instances, EVAL_BATCH)?;
    pooled_loss(instances, &preds)
}

/// Pooled loss of given predictions.
pub fn pooled_loss(instances: &[Instance], preds: &[Vec<Vec<f64>>]) -> Result<Evaluation> {
    let mut per_instance = Vec::with_capacity(instances.len());
    let (mut sse, mut count) = (0.0, 0);
    for (inst, p) in instances.iter().zip(preds) {
        let (s, c) = masked_sse(&inst.targets, p)?;
        sse += s;
        count += c;
        per_instance.push(InstanceLoss {
            id: inst.id.clone(),
            sse: s,
            count: c,
        });
    }
    if count == 0 {
        return Err(DataError::EmptyTarget.into());
    }
    Ok(Evaluation {
        mse: sse / count as f64,
        per_instance,
    })
}

/// Hyperparameter grid searched by [`random_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub hidden: Vec<usize>,
    pub heads: Vec<usize>,
    pub decoder_depth: Vec<usize>,
    pub embed_per_head: Vec<usize>,
    pub budget: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            hidden: vec![32, 128, 256, 512],
            heads: vec![4, 8],
            decoder_depth: vec![2, 4],
            embed_per_head: vec![2, 4, 8],
            budget: 10,
        }
    }
}

impl SearchSpace {
    /// Every combination, in grid order.
    pub fn grid(&self, curve: CurveKind, channels: usize) -> Vec<FldConfig> {
        let mut out = Vec::new();
        for &latent in &self.hidden {
            for &heads in &self.heads {
                for &decoder_depth in &self.decoder_depth {
                    for &embed_dim in &self.embed_per_head {
                        out.push(FldConfig {
                            curve,
                            latent,
                            heads,
                            embed_dim,
                            decoder_depth,
                            channels,
                        });
                    }
                }
            }
        }
        out
    }

    /// `min(budget, grid size)` distinct configurations in seeded random order.
    pub fn sample(&self, curve: CurveKind, channels: usize, seed: u64) -> Vec<FldConfig> {
        let mut grid = self.grid(curve, channels);
        grid.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        grid.truncate(self.budget);
        grid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trial {
    pub config: FldConfig,
    pub valid_mse: f64,
    pub params_count: usize,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub trials: Vec<Trial>,
    pub best: usize,
}

impl SearchOutcome {
    pub fn best_config(&self) -> FldConfig {
        self.trials[self.best].config
    }
}

/// Writes trials as `hidden,heads,decoder_depth,embed_per_head,valid_mse,params_count` CSV.
pub fn search_csv(trials: &[Trial]) -> String {
    let mut out = String::from("hidden,heads,decoder_depth,embed_per_head,valid_mse,params_count\n");
    for t in trials {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t.config.latent,
            t.config.heads,
            t.config.decoder_depth,
            t.config.embed_dim,
            t.valid_mse,
            t.params_count
        ));
    }
    out
}

/// Trains each sampled configuration and keeps the one with the lowest
/// validation MSE; ties go to fewer parameters, then to sampling order.
pub fn random_search(
    space: &SearchSpace,
    curve: CurveKind,
    channels: usize,
    train_set: &[Instance],
    valid_set: &[Instance],
    tc: &TrainConfig,
    seed: u64,
    mut on_trial: impl FnMut(&Trial),
) -> Result<SearchOutcome> {
    if space.budget == 0 {
        return Err(TrainError::Config("search budget must be at least 1".into()));
    }
    let mut trials = Vec::new();
    for config in space.sample(curve, channels, seed) {
        let init = init_params(&config, tc.seed)?;
        let outcome = train(&config, init, train_set, valid_set, tc)?;
        let trial = Trial {
            config,
            valid_mse: outcome.best_valid_mse,
            params_count: config.param_count(),
        };
        on_trial(&trial);
        trials.push(trial);
    }
    let best = (0..trials.len())
        .min_by(|&a, &b| {
            let (x, y) = (&trials[a], &trials[b]);
            x.valid_mse
                .total_cmp(&y.valid_mse)
                .then(x.params_count.cmp(&y.params_count))
                .then(a.cmp(&b))
        })
        .expect("budget ≥ 1");
    Ok(SearchOutcome { trials, best })
}
