//! Glue between stored datasets and the model: fold selection, fitted
//! normalization and time rescaling.

use crate::data::{make_folds, Dataset, DataError, FoldSpec, Instance, Normalization, TimeRescale};

/// Normalizes values and rescales times the way the model expects.
pub fn prepare(instances: &[Instance], norm: &Normalization, rescale: TimeRescale) -> Vec<Instance> {
    instances
        .iter()
        .map(|i| rescale.apply(&norm.apply(i)))
        .collect()
}

/// Raw instances of one fold plus the statistics fitted on its training part.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub train: Vec<Instance>,
    pub valid: Vec<Instance>,
    pub test: Vec<Instance>,
    pub normalization: Normalization,
}

impl FoldData {
    pub fn new(dataset: &Dataset, spec: &FoldSpec, fold: usize) -> Result<Self, DataError> {
        if let Some(raw) = dataset.instances.iter().find(|i| i.is_raw()) {
            return Err(DataError::Config(format!(
                "instance {} has no forecast targets; run a task split first",
                raw.id
            )));
        }
        let folds = make_folds(dataset.instances.len(), spec)?;
        let f = folds.get(fold).ok_or_else(|| {
            DataError::Config(format!("fold {fold} out of range 0..{}", folds.len()))
        })?;
        let train = dataset.subset(&f.train);
        let normalization = Normalization::fit(&train, dataset.channels());
        Ok(FoldData {
            valid: dataset.subset(&f.valid),
            test: dataset.subset(&f.test),
            train,
            normalization,
        })
    }

    pub fn split(&self, name: &str) -> Option<&[Instance]> {
        match name {
            "train" => Some(&self.train),
            "valid" | "validation" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// A split in model space (normalized, time-rescaled).
    pub fn prepared(&self, name: &str, rescale: TimeRescale) -> Option<Vec<Instance>> {
        self.split(name)
            .map(|s| prepare(s, &self.normalization, rescale))
    }
}

/// Predictions of the per-channel training mean, which is zero in
/// normalized space.
pub fn mean_predictions(instances: &[Instance], channels: usize) -> Vec<Vec<Vec<f64>>> {
    instances
        .iter()
        .map(|i| vec![vec![0.0; channels]; i.query_times.len()])
        .collect()
}
