//! Wall-clock inference timing over a whole split.

use std::time::Instant;

use serde::Serialize;

use crate::data::Instance;
use crate::model::{predict_batch, FldConfig, ModelError, ModelParams};

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub batch_size: usize,
    pub warmup: usize,
    pub instances: usize,
    pub params: usize,
    /// Seconds of each measured pass, in order.
    pub samples: Vec<f64>,
    pub median_seconds: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub instances_per_second: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs `warmup` untimed passes, then `passes` timed passes of full-split
/// prediction at `batch_size`.
pub fn run_bench(
    config: &FldConfig,
    params: &ModelParams,
    instances: &[Instance],
    batch_size: usize,
    warmup: usize,
    passes: usize,
) -> Result<BenchReport, ModelError> {
    if passes == 0 {
        return Err(ModelError::Config("at least one measured pass is required".into()));
    }
    for _ in 0..warmup {
        predict_batch(config, params, instances, batch_size)?;
    }
    let mut samples = Vec::with_capacity(passes);
    for _ in 0..passes {
        let start = Instant::now();
        let out = predict_batch(config, params, instances, batch_size)?;
        samples.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let med = median(&samples);
    Ok(BenchReport {
        batch_size,
        warmup,
        instances: instances.len(),
        params: config.param_count(),
        median_seconds: med,
        min_seconds: samples.iter().copied().fold(f64::INFINITY, f64::min),
        max_seconds: samples.iter().copied().fold(0.0, f64::max),
        instances_per_second: if med > 0.0 { instances.len() as f64 / med } else { f64::INFINITY },
        samples,
    })
}
