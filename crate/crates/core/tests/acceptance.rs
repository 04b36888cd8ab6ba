//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//! Run with `cargo test --release --test acceptance`.

mod common;

use std::process::Command;
use std::time::Instant;

use fld::data::{channelize, make_folds, masked_loss, FoldSpec, Instance, TaskKind};
use fld::goodwin::{rk4_integrate, GoodwinParams};
use fld::gradcheck::{check_random, random_instance};
use fld::model::{
    curve_eval, decode, encode, forward, init_params, latent_states, predict_batch,
    CurveCoefficients, CurveKind, FldConfig, ModelParams,
};
use fld::pipeline::mean_predictions;
use fld::tensor::{Tape, Tensor};
use fld::train::{evaluate, pooled_loss, train_with, Adam, TrainConfig, Trainer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{goodwin_tasks, prepared_fold};

const CURVES: [CurveKind; 3] = [CurveKind::Linear, CurveKind::Quadratic, CurveKind::Sine];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for curve in CURVES {
        let cfg = FldConfig {
            curve,
            latent: 32,
            heads: 4,
            embed_dim: 4,
            decoder_depth: 2,
            channels: 2,
        };
        let r = check_random(&cfg, 12, 4, 0, 1e-5, None).unwrap();
        let (worst, _) = r
            .groups
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        pass &= r.passed(1e-4);
        parts.push(format!(
            "{}: max rel {:.2e} ({worst}, abs {:.1e})",
            curve.name(),
            r.max_rel_error,
            r.groups_abs[worst]
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    outcome(pass, format!("{}; {secs:.1}s", parts.join(", ")))
}

fn random_case(seed: u64) -> (FldConfig, ModelParams, Instance) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = rng.gen_range(1..5);
    let cfg = FldConfig {
        curve: CURVES[seed as usize % 3],
        latent: 16,
        heads: 4,
        embed_dim: 4,
        decoder_depth: 2,
        channels,
    };
    let n = rng.gen_range(1..20);
    let k = rng.gen_range(1..6);
    let inst = random_instance(&mut rng, channels, n, k);
    (cfg, init_params(&cfg, seed).unwrap(), inst)
}

fn encoder_invariances() -> Outcome {
    let (mut perm, mut pad, mut rows) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let (cfg, params, inst) = random_case(seed);
        let view = channelize(&inst);
        let run = |v: &fld::data::ChannelView| {
            let mut tape = Tape::new();
            let enc = encode(&mut tape, &cfg, &params, v).unwrap();
            let z = latent_states(&mut tape, cfg.curve, &enc.theta, &inst.query_times).unwrap();
            (decode(&mut tape, &params, &z).unwrap().to_vec(), enc.attention)
        };
        let (base, attention) = run(&view);
        let mut shuffled = view.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for ch in &mut shuffled.channels {
            let mut idx: Vec<usize> = (0..ch.len()).collect();
            idx.shuffle(&mut rng);
            ch.times = idx.iter().map(|&i| ch.times[i]).collect();
            ch.values = idx.iter().map(|&i| ch.values[i]).collect();
        }
        perm = perm.max(max_abs(&base, &run(&shuffled).0));

        let mut padded = inst.clone();
        let t = 0.5 * (padded.times.last().unwrap() + padded.query_times[0]);
        padded.times.push(t);
        padded.values.push(vec![f64::NAN; cfg.channels]);
        let a = forward(&mut Tape::new(), &cfg, &params, &inst).unwrap().to_vec();
        let b = forward(&mut Tape::new(), &cfg, &params, &padded).unwrap().to_vec();
        pad = pad.max(max_abs(&a, &b));

        for w in attention.iter().flatten() {
            for row in w.to_rows() {
                rows = rows.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    outcome(
        perm <= 1e-9 && pad == 0.0 && rows <= 1e-12,
        format!("permutation {perm:.1e}, NaN row {pad:e}, attention row sum {rows:.1e}"),
    )
}

fn curve_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut collinear = 0.0f64;
    let mut quad_equal = true;
    let mut sine_const = true;
    for seed in 0..100 {
        let (mut cfg, _, inst) = random_case(seed);
        cfg.curve = CurveKind::Linear;
        let p = init_params(&cfg, seed).unwrap();
        let enc = encode(&mut Tape::new(), &cfg, &p, &channelize(&inst)).unwrap();
        let t: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z: Vec<Vec<f64>> = t
            .iter()
            .map(|&x| curve_eval(x, &enc.theta, CurveKind::Linear).unwrap())
            .collect();
        let lambda = (t[2] - t[0]) / (t[1] - t[0]);
        for l in 0..cfg.latent {
            let resid = z[2][l] - (z[0][l] + lambda * (z[1][l] - z[0][l]));
            collinear = collinear.max(resid.abs());
        }

        let l = cfg.latent;
        let theta = enc.theta.tensor().to_rows();
        let lin = CurveCoefficients::new(enc.theta.tensor().clone());
        let quad = CurveCoefficients::new(
            Tensor::from_rows(&[vec![0.0; l], theta[0].clone(), theta[1].clone()]).unwrap(),
        );
        for &x in &t {
            quad_equal &= curve_eval(x, &lin, CurveKind::Linear).unwrap()
                == curve_eval(x, &quad, CurveKind::Quadratic).unwrap();
        }

        let mut s: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..l).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        s[2] = vec![0.0; l];
        let sine = CurveCoefficients::new(Tensor::from_rows(&s).unwrap());
        let first = curve_eval(t[0], &sine, CurveKind::Sine).unwrap();
        for &x in &t[1..] {
            sine_const &= curve_eval(x, &sine, CurveKind::Sine).unwrap() == first;
        }
    }
    outcome(
        collinear <= 1e-10 && quad_equal && sine_const,
        format!(
            "linear collinearity residual {collinear:.1e}, quadratic(θ1=0) == linear: {quad_equal}, zero-frequency sine constant: {sine_const}"
        ),
    )
}

fn loss_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let mut single_rows = 0;
    for _ in 0..1000 {
        let k = rng.gen_range(1..8);
        let c = rng.gen_range(1..6);
        let mut targets: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let mode = rng.gen_range(0..3);
                let keep = rng.gen_range(0..c);
                (0..c)
                    .map(|j| match mode {
                        0 if j != keep => f64::NAN,
                        1 if rng.gen_bool(0.4) => f64::NAN,
                        _ => rng.gen_range(-5.0..5.0),
                    })
                    .collect()
            })
            .collect();
        if targets.iter().flatten().all(|v| v.is_nan()) {
            targets[0][0] = 1.5;
        }
        single_rows += targets
            .iter()
            .filter(|r| r.iter().filter(|v| !v.is_nan()).count() == 1)
            .count();
        let pred: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..c).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let (mut sse, mut n) = (0.0, 0);
        for i in 0..k {
            for j in 0..c {
                if !targets[i][j].is_nan() {
                    sse += (pred[i][j] - targets[i][j]).powi(2);
                    n += 1;
                }
            }
        }
        let oracle = sse / n as f64;
        let p = Tensor::from_rows(&pred).unwrap();
        let got = masked_loss(&mut Tape::new(), &targets, &p).unwrap().item().unwrap();
        worst = worst.max((got - oracle).abs());
    }
    outcome(
        worst <= 1e-12 && single_rows > 0,
        format!("max abs diff {worst:.1e} over 1000 matrices ({single_rows} single-entry rows)"),
    )
}

/// Learning rate, L2 and batch size of the Goodwin run.
const GOODWIN_LR: f64 = 2e-3;
const GOODWIN_L2: f64 = 0.0;
const GOODWIN_BATCH: usize = 64;

fn goodwin_proof_of_concept() -> Outcome {
    let start = Instant::now();
    let ds = goodwin_tasks(1000, 7, TaskKind::Obs50Fc50);
    let spec = FoldSpec {
        seed: 7,
        ..FoldSpec::default()
    };
    let (tr, va, te, _) = prepared_fold(&ds, &spec, 0);
    let cfg = FldConfig {
        curve: CurveKind::Linear,
        latent: 64,
        heads: 4,
        embed_dim: 4,
        decoder_depth: 2,
        channels: 2,
    };
    let tc = TrainConfig {
        lr: GOODWIN_LR,
        l2: GOODWIN_L2,
        batch_size: GOODWIN_BATCH,
        max_epochs: 300,
        patience: 30,
        seed: 0,
    };
    let out = train_with(&cfg, init_params(&cfg, 0).unwrap(), &tr, &va, &tc, |_| {}).unwrap();
    let model = evaluate(&cfg, &out.best, &te).unwrap().mse;
    let baseline = pooled_loss(&te, &mean_predictions(&te, 2)).unwrap().mse;
    let ratio = model / baseline;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        ratio <= 0.5,
        format!(
            "test mse {model:.4} vs training-mean {baseline:.4}, ratio {ratio:.3} (best epoch {} of {}); {secs:.0}s",
            out.best_epoch,
            out.history.len()
        ),
    )
}

fn overfit_sanity() -> Outcome {
    let ds = goodwin_tasks(50, 11, TaskKind::Obs50Fc50);
    let (tr, _, _, _) = prepared_fold(&ds, &FoldSpec::default(), 0);
    let five = &tr[..5];
    let cfg = FldConfig {
        curve: CurveKind::Linear,
        latent: 32,
        heads: 4,
        embed_dim: 4,
        decoder_depth: 2,
        channels: 2,
    };
    let params = init_params(&cfg, 0).unwrap();
    let initial = evaluate(&cfg, &params, five).unwrap().mse;
    let tc = TrainConfig {
        lr: 1e-3,
        batch_size: 5,
        max_epochs: 2000,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg, params, tc).unwrap();
    let mut last = initial;
    for epoch in 1..=tc.max_epochs {
        trainer.run_epoch(five).unwrap();
        last = evaluate(&cfg, trainer.params(), five).unwrap().mse;
        if last < 0.1 * initial {
            return outcome(
                true,
                format!("loss {initial:.4} -> {last:.4} after {epoch} epochs"),
            );
        }
    }
    outcome(false, format!("loss {initial:.4} -> {last:.4} after 2000 epochs"))
}

fn adam_oracle() -> Outcome {
    let (w0, g, lr, l2) = (0.8, 0.25, 1e-4, 1e-3);
    let mut adam = Adam::new(&[Tensor::scalar(w0)]);
    let out = adam
        .step(&[Tensor::scalar(w0)], &[Tensor::scalar(g)], &["w".into()], lr, l2)
        .unwrap();
    let ge = g + l2 * w0;
    let m = (1.0 - 0.9) * ge;
    let v = (1.0 - 0.999) * ge * ge;
    let m_hat = m / (1.0 - 0.9);
    let v_hat = v / (1.0 - 0.999);
    let expect = w0 - lr * m_hat / (v_hat.sqrt() + 1e-8);
    let got = out[0].item().unwrap();
    let diff = (got - expect).abs();
    outcome(diff <= 1e-10, format!("{got} vs {expect}, diff {diff:.1e}"))
}

fn integrator_order() -> Outcome {
    let base = GoodwinParams {
        step: 0.2,
        ..GoodwinParams::default()
    };
    let grid: Vec<f64> = (0..=100).map(f64::from).collect();
    let at = |h: f64| rk4_integrate(&GoodwinParams { step: h, ..base }, &grid).unwrap();
    let reference = at(base.step / 16.0);
    let err = |traj: &[Vec<f64>; 3]| {
        (0..3)
            .flat_map(|j| traj[j].iter().zip(&reference[j]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    };
    let coarse = err(&at(base.step));
    let fine = err(&at(base.step / 2.0));
    let ratio = coarse / fine;
    outcome(
        ratio >= 8.0,
        format!("error {coarse:.2e} -> {fine:.2e} on halving, ratio {ratio:.1}"),
    )
}

fn fld_bin(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_fld")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// generate → split → short train in `dir`; returns (data, checkpoint) paths.
fn small_pipeline(dir: &std::path::Path) -> (String, String) {
    let p = |s: &str| dir.join(s).to_str().unwrap().to_string();
    fld_bin(&["generate", "--count", "60", "--seed", "3", "--points", "30", "--out", &p("g")]);
    fld_bin(&["split", "--data", &p("g/goodwin.jsonl"), "--task", "obs50-fc50", "--out", &p("s")]);
    fld_bin(&[
        "train", "--data", &p("s/data.jsonl"), "--out", &p("t"), "--max-epochs", "2", "--lr", "1e-3",
    ]);
    (p("s/data.jsonl"), p("t/checkpoint.json"))
}

fn protocol_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = small_pipeline(dir.path());
    let search = |name: &str| {
        let out = dir.path().join(name);
        let o = out.to_str().unwrap();
        fld_bin(&[
            "search", "--data", &data, "--out", o, "--budget", "10", "--seed", "1", "--max-epochs", "2",
        ]);
        (
            std::fs::read(out.join("search.csv")).unwrap(),
            std::fs::read(out.join("best_config.json")).unwrap(),
        )
    };
    let (a, b) = (search("s1"), search("s2"));
    let rows = String::from_utf8_lossy(&a.0).lines().count() - 1;
    let spec = FoldSpec::default();
    let f1 = make_folds(100, &spec).unwrap();
    let f2 = make_folds(100, &spec).unwrap();
    let mut disjoint = true;
    for i in 0..f1.len() {
        for j in i + 1..f1.len() {
            disjoint &= f1[i].test.iter().all(|x| !f1[j].test.contains(x));
        }
    }
    outcome(
        a == b && rows <= 10 && f1 == f2 && f1.len() == 5 && disjoint,
        format!(
            "search identical: {}, {rows} rows; folds identical: {}; test sets disjoint: {disjoint}",
            a == b,
            f1 == f2
        ),
    )
}

fn bench_contract() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = small_pipeline(dir.path());
    let out = dir.path().join("b");
    fld_bin(&["bench", "--checkpoint", &ck, "--data", &data, "--out", out.to_str().unwrap()]);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    let samples = v["report"]["samples"].as_array().unwrap().len();
    let batch = v["report"]["batch_size"].as_u64().unwrap();
    let median = v["report"]["median_seconds"].as_f64().unwrap();

    let ds = goodwin_tasks(200, 5, TaskKind::Obs50Fc50);
    let (_, _, te, _) = prepared_fold(&ds, &FoldSpec::default(), 0);
    let cfg = FldConfig {
        curve: CurveKind::Sine,
        latent: 64,
        heads: 4,
        embed_dim: 4,
        decoder_depth: 2,
        channels: 2,
    };
    let params = init_params(&cfg, 3).unwrap();
    let one = predict_batch(&cfg, &params, &te, 1).unwrap();
    let many = predict_batch(&cfg, &params, &te, 64).unwrap();
    let diff = max_abs(
        &one.concat().concat(),
        &many.concat().concat(),
    );
    outcome(
        samples >= 5 && batch == 64 && median > 0.0 && diff <= 1e-12,
        format!("{samples} passes at batch {batch}, median {median:.2e}s; batch 1 vs 64 max abs diff {diff:e}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_correctness),
        ("encoder invariances", encoder_invariances),
        ("curve semantics", curve_semantics),
        ("loss oracle", loss_oracle),
        ("goodwin proof of concept", goodwin_proof_of_concept),
        ("overfit sanity", overfit_sanity),
        ("adam step oracle", adam_oracle),
        ("integrator order", integrator_order),
        ("protocol determinism", protocol_determinism),
        ("bench contract", bench_contract),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
