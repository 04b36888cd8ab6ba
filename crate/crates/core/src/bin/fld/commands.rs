use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use fld::bench::run_bench;
use fld::data::{
    apply_task_split, load_dataset, save_dataset, sparsify, DataError, Dataset, FoldSpec,
    Instance,
};
use fld::goodwin::{generate_dataset, GeneratorManifest, Sampling};
use fld::gradcheck::check_random;
use fld::model::{init_params, predict_batch, Checkpoint, FldConfig, ModelParams, SplitInfo};
use fld::pipeline::FoldData;
use fld::tensor::Fault;
use fld::train::{
    evaluate, history_csv, random_search, search_csv, train_with, SearchSpace, TrainConfig,
};

use crate::{
    usage, BenchArgs, EvalArgs, FoldArgs, GenerateArgs, GradcheckArgs, OptimArgs, PredictArgs,
    SearchArgs, SplitArgs, TrainArgs,
};

/// Provenance of one invocation, written as `manifest.json` next to its
/// outputs.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    version: String,
    config: Value,
    seeds: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started_at: f64,
    wall_seconds: f64,
    details: Value,
}

struct Run {
    command: &'static str,
    config: Value,
    started_at: f64,
    clock: Instant,
}

impl Run {
    fn start(command: &'static str, args: &impl Serialize) -> Result<Self> {
        Ok(Run {
            command,
            config: serde_json::to_value(args)?,
            started_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
            clock: Instant::now(),
        })
    }

    fn finish(
        self,
        out: &Path,
        seeds: Value,
        inputs: &[&Path],
        outputs: &[PathBuf],
        details: Value,
    ) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: self.config,
            seeds,
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: outputs.to_vec(),
            started_at: self.started_at,
            wall_seconds: self.clock.elapsed().as_secs_f64(),
            details,
        };
        write(&out.join("manifest.json"), &to_json(&manifest)?)
    }
}

fn to_json(v: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn fold_spec(f: &FoldArgs) -> FoldSpec {
    FoldSpec {
        n_folds: f.folds,
        seed: f.split_seed,
        ..FoldSpec::default()
    }
}

fn train_config(o: &OptimArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: o.lr,
        l2: o.l2,
        batch_size: o.batch,
        max_epochs: o.max_epochs,
        patience: o.patience,
        seed,
    }
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let run = Run::start("generate", a)?;
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    if a.points == 0 {
        return Err(usage("--points must be at least 1"));
    }
    if !(a.sigma >= 0.0) || !(0.0..1.0).contains(&a.drop) || !(0.0..1.0).contains(&a.spread) {
        return Err(usage("need --sigma >= 0, --drop in [0, 1) and --spread in [0, 1)"));
    }
    let mut manifest = GeneratorManifest::new(
        a.count,
        a.common.seed,
        Sampling {
            points: a.points,
            sigma: a.sigma,
            drop_prob: a.drop,
            ..Sampling::default()
        },
    );
    manifest.spread = a.spread;
    let dataset = generate_dataset(&manifest)?;
    out_dir(&a.out)?;
    let path = a.out.join("goodwin.jsonl");
    save_dataset(&dataset, &path)?;
    println!("wrote {} series to {}", dataset.instances.len(), path.display());
    run.finish(
        &a.out,
        json!({ "seed": a.common.seed }),
        &[],
        &[path.clone(), fld::data::meta_path(&path)],
        serde_json::to_value(&manifest)?,
    )
}

pub fn split(a: &SplitArgs) -> Result<()> {
    let run = Run::start("split", a)?;
    let raw = load_dataset(&a.data)?;
    let mut instances = Vec::with_capacity(raw.instances.len());
    let mut skipped = Vec::new();
    let mut short = 0usize;
    for series in &raw.instances {
        match apply_task_split(series, a.task) {
            Ok(o) => {
                short += usize::from(o.short_horizon);
                instances.push(o.instance);
            }
            Err(DataError::Unsplittable { id, reason }) => skipped.push(json!({ "id": id, "reason": reason })),
            Err(e) => return Err(e.into()),
        }
    }
    if let Some(keep) = a.keep {
        instances = sparsify(&instances, keep, a.common.seed)?;
    }
    let dataset = Dataset {
        meta: raw.meta.clone(),
        instances,
    };
    out_dir(&a.out)?;
    let path = a.out.join("data.jsonl");
    save_dataset(&dataset, &path)?;
    println!(
        "task {}: {} instances, {} unsplittable, {} with a short horizon",
        a.task.name(),
        dataset.instances.len(),
        skipped.len(),
        short
    );
    run.finish(
        &a.out,
        json!({ "seed": a.common.seed }),
        &[&a.data],
        &[path.clone(), fld::data::meta_path(&path)],
        json!({
            "instances": dataset.instances.len(),
            "unsplittable": skipped,
            "short_horizon": short,
        }),
    )
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let run = Run::start("train", a)?;
    let dataset = load_dataset(&a.data)?;
    let spec = fold_spec(&a.fold);
    let fd = FoldData::new(&dataset, &spec, a.fold.fold)?;
    let rescale = dataset.meta.time_rescale;
    let config = FldConfig {
        curve: a.model.curve,
        latent: a.model.hidden,
        heads: a.model.heads,
        embed_dim: a.model.embed,
        decoder_depth: a.model.depth,
        channels: dataset.channels(),
    };
    config.validate()?;
    let tc = train_config(&a.optim, a.common.seed);
    tc.validate()?;
    let train_set = fd.prepared("train", rescale).expect("known split");
    let valid_set = fd.prepared("valid", rescale).expect("known split");
    let init = init_params(&config, a.common.seed)?;
    let outcome = train_with(&config, init, &train_set, &valid_set, &tc, |r| {
        eprintln!(
            "epoch {:>4}  train {:.6}  valid {:.6}",
            r.epoch, r.train_mse, r.valid_mse
        );
    })?;
    out_dir(&a.out)?;
    let ck_path = a.out.join("checkpoint.json");
    let hist_path = a.out.join("history.csv");
    Checkpoint::new(
        config,
        &outcome.best,
        fd.normalization.clone(),
        rescale,
        Some(SplitInfo {
            fold: a.fold.fold,
            folds: spec,
        }),
    )
    .save(&ck_path)?;
    let history: Vec<_> = outcome
        .history
        .iter()
        .map(|r| fld::train::EpochRecord { seconds: 0.0, ..r.clone() })
        .collect();
    write(&hist_path, &history_csv(&history))?;
    println!(
        "best epoch {} valid mse {}",
        outcome.best_epoch, outcome.best_valid_mse
    );
    let seconds: f64 = outcome.history.iter().map(|r| r.seconds).sum();
    run.finish(
        &a.out,
        json!({ "init": a.common.seed, "shuffle": a.common.seed, "split": a.fold.split_seed }),
        &[&a.data],
        &[ck_path, hist_path],
        json!({
            "best_epoch": outcome.best_epoch,
            "best_valid_mse": outcome.best_valid_mse,
            "epochs": outcome.history.len(),
            "params": config.param_count(),
            "epoch_seconds": outcome.history.iter().map(|r| r.seconds).collect::<Vec<_>>(),
            "train_seconds": seconds,
        }),
    )
}

pub fn search(a: &SearchArgs) -> Result<()> {
    let run = Run::start("search", a)?;
    if a.budget == 0 {
        return Err(usage("--budget must be at least 1"));
    }
    let dataset = load_dataset(&a.data)?;
    let spec = fold_spec(&a.fold);
    let fd = FoldData::new(&dataset, &spec, a.fold.fold)?;
    let rescale = dataset.meta.time_rescale;
    let tc = train_config(&a.optim, 0);
    tc.validate()?;
    let space = SearchSpace {
        budget: a.budget,
        ..SearchSpace::default()
    };
    let train_set = fd.prepared("train", rescale).expect("known split");
    let valid_set = fd.prepared("valid", rescale).expect("known split");
    let outcome = random_search(
        &space,
        a.curve,
        dataset.channels(),
        &train_set,
        &valid_set,
        &tc,
        a.common.seed,
        |t| eprintln!("{:?} valid {:.6}", t.config, t.valid_mse),
    )?;
    out_dir(&a.out)?;
    let csv_path = a.out.join("search.csv");
    let best_path = a.out.join("best_config.json");
    write(&csv_path, &search_csv(&outcome.trials))?;
    write(&best_path, &to_json(&outcome.best_config())?)?;
    let best = &outcome.trials[outcome.best];
    println!("best {:?} valid mse {}", best.config, best.valid_mse);
    run.finish(
        &a.out,
        json!({ "search": a.common.seed, "split": a.fold.split_seed }),
        &[&a.data],
        &[csv_path, best_path],
        json!({ "trials": outcome.trials.len(), "best_index": outcome.best }),
    )
}

/// Checkpoint, parameters and the requested split in model space, rebuilt
/// from the fold stored in the checkpoint.
struct Loaded {
    checkpoint: Checkpoint,
    params: ModelParams,
    raw: Vec<Instance>,
    prepared: Vec<Instance>,
}

fn load_split(checkpoint: &Path, data: &Path, split: &str) -> Result<Loaded> {
    let ck = Checkpoint::load(checkpoint)?;
    let params = ck.params()?;
    let dataset = load_dataset(data)?;
    if dataset.channels() != ck.config.channels {
        return Err(usage(format!(
            "dataset has {} channels but the checkpoint expects {}",
            dataset.channels(),
            ck.config.channels
        )));
    }
    let raw: Vec<Instance> = match (&ck.split, split) {
        (_, "all") => dataset.instances.clone(),
        (Some(info), name) => {
            let fd = FoldData::new(&dataset, &info.folds, info.fold)?;
            fd.split(name)
                .ok_or_else(|| usage(format!("unknown split {name:?}; expected train, valid, test or all")))?
                .to_vec()
        }
        (None, name) => {
            return Err(usage(format!(
                "checkpoint has no fold information; only --split all is available, not {name:?}"
            )))
        }
    };
    if let Some(bad) = raw.iter().find(|i| i.is_raw()) {
        return Err(usage(format!("instance {} has no forecast targets", bad.id)));
    }
    let prepared = fld::pipeline::prepare(&raw, &ck.normalization, ck.time_rescale);
    Ok(Loaded {
        checkpoint: ck,
        params,
        raw,
        prepared,
    })
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let run = Run::start("eval", a)?;
    let l = load_split(&a.checkpoint, &a.data, &a.split)?;
    let ev = evaluate(&l.checkpoint.config, &l.params, &l.prepared)?;
    println!("{} mse {}", a.split, ev.mse);
    if let Some(out) = &a.out {
        out_dir(out)?;
        let path = out.join("eval.json");
        write(&path, &to_json(&json!({ "split": a.split, "mse": ev.mse, "per_instance": ev.per_instance }))?)?;
        run.finish(
            out,
            json!({}),
            &[&a.checkpoint, &a.data],
            &[path],
            json!({ "mse": ev.mse, "instances": l.prepared.len() }),
        )?;
    }
    Ok(())
}

fn csv_field(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let run = Run::start("predict", a)?;
    if a.batch == 0 {
        return Err(usage("--batch must be at least 1"));
    }
    let l = load_split(&a.checkpoint, &a.data, &a.split)?;
    let preds = predict_batch(&l.checkpoint.config, &l.params, &l.prepared, a.batch)?;
    let norm = &l.checkpoint.normalization;
    let mut csv = String::from("id,query_time,channel,target,prediction\n");
    let mut rows = 0usize;
    for (inst, pred) in l.raw.iter().zip(&preds) {
        for ((t, target), p) in inst.query_times.iter().zip(&inst.targets).zip(pred) {
            for (c, (&y, &yhat)) in target.iter().zip(p).enumerate() {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    inst.id,
                    t,
                    c,
                    csv_field(y),
                    norm.invert_value(yhat, c)
                );
                rows += 1;
            }
        }
    }
    out_dir(&a.out)?;
    let path = a.out.join("predictions.csv");
    write(&path, &csv)?;
    println!("wrote {rows} rows to {}", path.display());
    run.finish(
        &a.out,
        json!({}),
        &[&a.checkpoint, &a.data],
        &[path],
        json!({ "rows": rows, "instances": l.raw.len() }),
    )
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let run = Run::start("bench", a)?;
    if a.batch == 0 || a.passes == 0 {
        return Err(usage("--batch and --passes must be at least 1"));
    }
    let l = load_split(&a.checkpoint, &a.data, &a.split)?;
    let config = &l.checkpoint.config;
    let report = run_bench(config, &l.params, &l.prepared, a.batch, a.warmup, a.passes)?;
    let single = predict_batch(config, &l.params, &l.prepared, 1)?;
    let batched = predict_batch(config, &l.params, &l.prepared, a.batch)?;
    let max_abs_diff = single
        .iter()
        .flatten()
        .flatten()
        .zip(batched.iter().flatten().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    let mut csv = String::from("pass,seconds\n");
    for (i, s) in report.samples.iter().enumerate() {
        let _ = writeln!(csv, "{i},{s}");
    }
    out_dir(&a.out)?;
    let csv_path = a.out.join("bench.csv");
    let json_path = a.out.join("bench.json");
    write(&csv_path, &csv)?;
    let summary = json!({ "report": report, "batch1_max_abs_diff": max_abs_diff });
    write(&json_path, &to_json(&summary)?)?;
    println!(
        "median {:.6}s over {} passes (min {:.6}s, max {:.6}s), {:.1} instances/s, {} parameters, batch-1 max abs diff {}",
        report.median_seconds,
        report.samples.len(),
        report.min_seconds,
        report.max_seconds,
        report.instances_per_second,
        report.params,
        max_abs_diff
    );
    run.finish(&a.out, json!({}), &[&a.checkpoint, &a.data], &[csv_path, json_path], summary)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let run = Run::start("gradcheck", a)?;
    let config = FldConfig {
        curve: a.curve,
        latent: a.hidden,
        heads: a.heads,
        embed_dim: a.embed,
        decoder_depth: a.depth,
        channels: a.channels,
    };
    config.validate()?;
    if a.observations == 0 || a.queries == 0 || !(a.eps > 0.0) {
        return Err(usage("need --observations, --queries and --eps above zero"));
    }
    let fault = a.corrupt_backward.then_some(Fault::SinDerivativeSign);
    let report = check_random(&config, a.observations, a.queries, a.common.seed, a.eps, fault)?;
    println!("{:<10} {:>10} {:>10}", "group", "rel", "abs");
    for (group, err) in &report.groups {
        println!("{group:<10} {err:>10.3e} {:>10.3e}", report.groups_abs[group]);
    }
    let passed = report.passed(a.tolerance);
    println!(
        "max relative error {:.3e} (tolerance {:.0e}): {}",
        report.max_rel_error,
        a.tolerance,
        if passed { "pass" } else { "FAIL" }
    );
    if let Some(out) = &a.out {
        out_dir(out)?;
        let path = out.join("gradcheck.json");
        write(&path, &to_json(&report)?)?;
        run.finish(out, json!({ "seed": a.common.seed }), &[], &[path], json!({ "passed": passed }))?;
    }
    if passed {
        Ok(())
    } else {
        anyhow::bail!("gradient check failed")
    }
}

