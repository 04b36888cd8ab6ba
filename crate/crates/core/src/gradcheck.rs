//! End-to-end gradient verification of the model against central
//! differences.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{masked_loss, Instance};
use crate::model::{forward, init_params, param_group, FldConfig, ModelError, ModelParams};
use crate::tensor::{finite_diff_check_on, Fault, Tape, Tensor};

/// Random instance on `[0, 1]` with roughly a fifth of the values missing
/// (every row keeps at least one observation).
pub fn random_instance(
    rng: &mut impl Rng,
    channels: usize,
    observations: usize,
    queries: usize,
) -> Instance {
    let total = observations + queries;
    let mut times: Vec<f64> = (0..total)
        .map(|i| (i as f64 + rng.gen_range(0.1..0.9)) / total as f64)
        .collect();
    times.sort_by(f64::total_cmp);
    let row = |rng: &mut dyn rand::RngCore| {
        let mut r: Vec<f64> = (0..channels)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    f64::NAN
                } else {
                    rng.gen_range(-2.0..2.0)
                }
            })
            .collect();
        if r.iter().all(|v| v.is_nan()) {
            let c = rng.gen_range(0..channels);
            r[c] = rng.gen_range(-2.0..2.0);
        }
        r
    };
    let values = (0..observations).map(|_| row(rng)).collect();
    let targets = (0..queries).map(|_| row(rng)).collect();
    Instance {
        id: "gradcheck".into(),
        query_times: times.split_off(observations),
        times,
        values,
        targets,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// Maximum relative error per parameter group.
    pub groups: BTreeMap<String, f64>,
    /// Maximum absolute error per parameter group.
    pub groups_abs: BTreeMap<String, f64>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Checks the gradient of the masked loss of `instance` w.r.t. every
/// parameter tensor.
pub fn check_model(
    config: &FldConfig,
    params: &ModelParams,
    instance: &Instance,
    eps: f64,
    fault: Option<Fault>,
) -> Result<GradCheckReport, ModelError> {
    let loss = |tape: &mut Tape, ts: &[Tensor]| {
        let p = params.with_tensors(ts.to_vec());
        let pred = forward(tape, config, &p, instance).map_err(|e| match e {
            ModelError::Tensor(t) => t,
            other => crate::tensor::TensorError::Contract(other.to_string()),
        })?;
        masked_loss(tape, &instance.targets, &pred).map_err(|e| match e {
            crate::data::DataError::Tensor(t) => t,
            other => crate::tensor::TensorError::Contract(other.to_string()),
        })
    };
    let make_tape = || match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let check = finite_diff_check_on(make_tape, loss, params.tensors(), eps)?;
    let mut groups = BTreeMap::new();
    let mut groups_abs = BTreeMap::new();
    for (((name, _), err), abs) in config
        .param_layout()
        .iter()
        .zip(&check.per_tensor)
        .zip(&check.per_tensor_abs)
    {
        let slot = groups.entry(param_group(name).to_string()).or_insert(0.0f64);
        *slot = slot.max(*err);
        let slot = groups_abs.entry(param_group(name).to_string()).or_insert(0.0f64);
        *slot = slot.max(*abs);
    }
    Ok(GradCheckReport {
        groups,
        groups_abs,
        max_rel_error: check.max_rel_error(),
    })
}

/// Fresh parameters and a random instance drawn from `seed`, then checked.
pub fn check_random(
    config: &FldConfig,
    observations: usize,
    queries: usize,
    seed: u64,
    eps: f64,
    fault: Option<Fault>,
) -> Result<GradCheckReport, ModelError> {
    let params = init_params(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let instance = random_instance(&mut rng, config.channels, observations, queries);
    check_model(config, &params, &instance, eps, fault)
}
