#![allow(dead_code)]

use fld::data::{apply_task_split, Dataset, FoldSpec, Instance, TaskKind, TimeRescale};
use fld::goodwin::{generate_dataset, GeneratorManifest, Sampling};
use fld::pipeline::FoldData;

/// Goodwin series cut for `task`, unsplittable ones dropped.
pub fn goodwin_tasks(count: usize, seed: u64, task: TaskKind) -> Dataset {
    let raw = generate_dataset(&GeneratorManifest::new(count, seed, Sampling::default())).unwrap();
    let instances = raw
        .instances
        .iter()
        .filter_map(|s| apply_task_split(s, task).ok())
        .map(|o| o.instance)
        .collect();
    Dataset {
        meta: raw.meta,
        instances,
    }
}

/// Train/valid/test of one fold in model space, plus the fold itself.
pub fn prepared_fold(dataset: &Dataset, spec: &FoldSpec, fold: usize) -> (Vec<Instance>, Vec<Instance>, Vec<Instance>, FoldData) {
    let fd = FoldData::new(dataset, spec, fold).unwrap();
    let r = TimeRescale::default();
    (
        fd.prepared("train", r).unwrap(),
        fd.prepared("valid", r).unwrap(),
        fd.prepared("test", r).unwrap(),
        fd,
    )
}
