//! Synthetic series from the three-species Goodwin oscillator
//!
//! ```text
//! dX/dt = k1 / (K + Zⁿ) − k2·X
//! dY/dt = k3·X − k4·Y
//! dZ/dt = k5·Y − k6·Z
//! ```
//!
//! integrated with fixed-step RK4 and observed at irregular random times.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, DatasetMeta, Instance};

#[derive(Debug, Error, PartialEq)]
pub enum GoodwinError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("integration blew up at t = {time}")]
    BlowUp { time: f64 },
    #[error("instance {index}: no finite trajectory after {attempts} parameter draws")]
    Retries { index: usize, attempts: usize },
}

pub type Result<T> = std::result::Result<T, GoodwinError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoodwinParams {
    /// `k1..k6`.
    pub rates: [f64; 6],
    pub hill: f64,
    pub michaelis: f64,
    /// `(X0, Y0, Z0)`.
    pub initial: [f64; 3],
    pub duration: f64,
    pub step: f64,
}

impl Default for GoodwinParams {
    fn default() -> Self {
        GoodwinParams {
            rates: [1.0, 0.1, 1.0, 0.1, 1.0, 0.1],
            hill: 10.0,
            michaelis: 1.0,
            initial: [0.1, 0.2, 2.5],
            duration: 100.0,
            step: 0.01,
        }
    }
}

impl GoodwinParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GoodwinError::Params(m));
        if self.rates.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
            return bad(format!("rates must be finite and non-negative: {:?}", self.rates));
        }
        if !(self.hill >= 1.0) {
            return bad(format!("Hill exponent {} below 1", self.hill));
        }
        if !(self.michaelis > 0.0) {
            return bad(format!("Michaelis constant {} not positive", self.michaelis));
        }
        if self.initial.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad(format!("initial state must be non-negative: {:?}", self.initial));
        }
        if !(self.duration > 0.0 && self.step > 0.0 && self.step <= self.duration / 100.0) {
            return bad(format!(
                "need 0 < step ≤ duration/100, got step {} duration {}",
                self.step, self.duration
            ));
        }
        Ok(())
    }

    pub fn derivative(&self, s: [f64; 3]) -> [f64; 3] {
        let [k1, k2, k3, k4, k5, k6] = self.rates;
        let [x, y, z] = s;
        [
            k1 / (self.michaelis + z.powf(self.hill)) - k2 * x,
            k3 * x - k4 * y,
            k5 * y - k6 * z,
        ]
    }
}

fn axpy(s: [f64; 3], a: f64, d: [f64; 3]) -> [f64; 3] {
    [s[0] + a * d[0], s[1] + a * d[1], s[2] + a * d[2]]
}

/// Fixed-step RK4 states at `0, h, 2h, …` covering `[0, duration]`.
pub fn rk4_path(p: &GoodwinParams) -> Result<Vec<[f64; 3]>> {
    p.validate()?;
    let h = p.step;
    let steps = (p.duration / h).ceil() as usize;
    let mut path = Vec::with_capacity(steps + 1);
    let mut s = p.initial;
    path.push(s);
    for i in 0..steps {
        let k1 = p.derivative(s);
        let k2 = p.derivative(axpy(s, h / 2.0, k1));
        let k3 = p.derivative(axpy(s, h / 2.0, k2));
        let k4 = p.derivative(axpy(s, h, k3));
        for j in 0..3 {
            s[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            if !s[j].is_finite() {
                return Err(GoodwinError::BlowUp {
                    time: (i + 1) as f64 * h,
                });
            }
            // Round-off can leave a vanishing species marginally below zero.
            if s[j] < 0.0 && s[j] > -1e-9 {
                s[j] = 0.0;
            }
        }
        path.push(s);
    }
    Ok(path)
}

/// Linear interpolation of a fixed-step path at time `t`.
pub fn interpolate(path: &[[f64; 3]], step: f64, t: f64) -> [f64; 3] {
    let pos = (t / step).max(0.0);
    let i = pos.floor() as usize;
    if i + 1 >= path.len() {
        return *path.last().expect("path holds the initial state");
    }
    let w = pos - i as f64;
    let (a, b) = (path[i], path[i + 1]);
    [
        a[0] + w * (b[0] - a[0]),
        a[1] + w * (b[1] - a[1]),
        a[2] + w * (b[2] - a[2]),
    ]
}

/// Trajectory at each grid time, as three rows (X, Y, Z).
pub fn rk4_integrate(p: &GoodwinParams, grid: &[f64]) -> Result<[Vec<f64>; 3]> {
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(GoodwinError::Params("grid must be increasing".into()));
    }
    if grid.iter().any(|&t| !(0.0..=p.duration).contains(&t)) {
        return Err(GoodwinError::Params(format!(
            "grid must lie within [0, {}]",
            p.duration
        )));
    }
    let path = rk4_path(p)?;
    let mut out = [
        Vec::with_capacity(grid.len()),
        Vec::with_capacity(grid.len()),
        Vec::with_capacity(grid.len()),
    ];
    for &t in grid {
        let s = interpolate(&path, p.step, t);
        for j in 0..3 {
            out[j].push(s[j]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub points: usize,
    /// Multiplicative log-normal noise scale.
    pub sigma: f64,
    /// Probability of dropping each observed scalar.
    pub drop_prob: f64,
    /// Observed species indices (0 = X, 1 = Y, 2 = Z).
    pub channels: Vec<usize>,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            points: 100,
            sigma: 0.01,
            drop_prob: 0.0,
            channels: vec![0, 1],
        }
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub seed: u64,
    pub count: usize,
    pub nominal: GoodwinParams,
    /// Constants and initial states are drawn log-uniformly in
    /// `[nominal·(1 − spread), nominal·(1 + spread)]`.
    pub spread: f64,
    pub sampling: Sampling,
    pub max_attempts: usize,
}

impl GeneratorManifest {
    pub fn new(count: usize, seed: u64, sampling: Sampling) -> Self {
        GeneratorManifest {
            seed,
            count,
            nominal: GoodwinParams::default(),
            spread: 0.5,
            sampling,
            max_attempts: 10,
        }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, nominal: f64, spread: f64) -> f64 {
    if nominal == 0.0 {
        return 0.0;
    }
    let lo = (nominal * (1.0 - spread)).ln();
    let hi = (nominal * (1.0 + spread)).ln();
    rng.gen_range(lo..=hi).exp()
}

fn draw_params(rng: &mut ChaCha8Rng, m: &GeneratorManifest) -> GoodwinParams {
    let n = &m.nominal;
    let mut p = *n;
    for k in &mut p.rates {
        *k = log_uniform(rng, *k, m.spread);
    }
    p.hill = log_uniform(rng, n.hill, m.spread).max(1.0);
    p.michaelis = log_uniform(rng, n.michaelis, m.spread);
    for x in &mut p.initial {
        *x = log_uniform(rng, *x, m.spread);
    }
    p
}

fn generate_one(m: &GeneratorManifest, index: usize) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
    rng.set_stream(index as u64);
    let s = &m.sampling;
    for _ in 0..m.max_attempts {
        let p = draw_params(&mut rng, m);
        let mut times: Vec<f64> = (0..s.points)
            .map(|_| rng.gen_range(0.0..=p.duration))
            .collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let Ok(path) = rk4_path(&p) else { continue };
        let mut kept_times = Vec::with_capacity(times.len());
        let mut values = Vec::with_capacity(times.len());
        for &t in &times {
            let state = interpolate(&path, p.step, t);
            let row: Vec<f64> = s
                .channels
                .iter()
                .map(|&c| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let dropped = s.drop_prob > 0.0 && rng.gen::<f64>() < s.drop_prob;
                    if dropped {
                        f64::NAN
                    } else {
                        state[c] * (s.sigma * noise).exp()
                    }
                })
                .collect();
            if row.iter().any(|v| !v.is_nan()) {
                kept_times.push(t);
                values.push(row);
            }
        }
        return Ok(Instance {
            id: format!("goodwin-{index:05}"),
            times: kept_times,
            values,
            query_times: vec![],
            targets: vec![],
        });
    }
    Err(GoodwinError::Retries {
        index,
        attempts: m.max_attempts,
    })
}

/// Generates `manifest.count` raw series. Each instance draws from its own
/// RNG stream `(seed, index)`, so the result does not depend on scheduling.
pub fn generate_dataset(manifest: &GeneratorManifest) -> Result<Dataset> {
    if manifest.count == 0 {
        return Err(GoodwinError::Params("count must be at least 1".into()));
    }
    if manifest.sampling.channels.is_empty() || manifest.sampling.channels.iter().any(|&c| c > 2) {
        return Err(GoodwinError::Params("observed channels must be among 0, 1, 2".into()));
    }
    if manifest.sampling.points < 1 {
        return Err(GoodwinError::Params("points must be at least 1".into()));
    }
    manifest.nominal.validate()?;
    let instances = (0..manifest.count)
        .into_par_iter()
        .map(|i| generate_one(manifest, i))
        .collect::<Result<Vec<_>>>()?;
    let names = ["X", "Y", "Z"];
    let mut meta = DatasetMeta::new(manifest.sampling.channels.len());
    meta.channel_names = manifest
        .sampling
        .channels
        .iter()
        .map(|&c| names[c].to_string())
        .collect();
    Ok(Dataset { meta, instances })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_reduction_matches_closed_form() {
        let p = GoodwinParams {
            rates: [1.0, 0.1, 0.0, 0.1, 0.0, 0.1],
            initial: [0.3, 0.0, 0.0],
            ..GoodwinParams::default()
        };
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 * 10.0).collect();
        let [x, _, z] = rk4_integrate(&p, &grid).unwrap();
        let x_inf = 1.0 / (1.0 * 0.1);
        for (t, v) in grid.iter().zip(&x) {
            let exact = x_inf + (0.3 - x_inf) * (-0.1 * t).exp();
            assert!((v - exact).abs() < 1e-8, "t={t}: {v} vs {exact}");
        }
        assert!(z.iter().all(|&v| v == 0.0));
    }

    fn equilibrium(p: &GoodwinParams) -> [f64; 3] {
        let [k1, k2, k3, k4, k5, k6] = p.rates;
        let gain = k3 * k5 / (k4 * k6) * k1 / k2;
        // Z = gain / (K + Zⁿ) has a unique positive root.
        let (mut lo, mut hi) = (0.0, gain / p.michaelis);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid - gain / (p.michaelis + mid.powf(p.hill)) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let z = 0.5 * (lo + hi);
        let y = k6 * z / k5;
        let x = k4 * y / k3;
        [x, y, z]
    }

    #[test]
    fn equilibrium_is_stationary() {
        let mut p = GoodwinParams::default();
        p.initial = equilibrium(&p);
        let grid: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let traj = rk4_integrate(&p, &grid).unwrap();
        for j in 0..3 {
            for v in &traj[j] {
                assert!((v - p.initial[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn nominal_trajectory_oscillates() {
        let p = GoodwinParams::default();
        let grid: Vec<f64> = (0..=1000).map(|i| i as f64 * 0.1).collect();
        let [x, _, _] = rk4_integrate(&p, &grid).unwrap();
        let max = x.iter().copied().fold(f64::MIN, f64::max);
        let min = x.iter().copied().fold(f64::MAX, f64::min);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        assert!(max - min > 0.1 * mean);
        assert!(x.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn step_halving_shows_fourth_order() {
        let base = GoodwinParams {
            step: 0.2,
            ..GoodwinParams::default()
        };
        let grid: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let at = |h: f64| {
            rk4_integrate(&GoodwinParams { step: h, ..base }, &grid).unwrap()
        };
        let reference = at(base.step / 16.0);
        let err = |traj: &[Vec<f64>; 3]| {
            (0..3)
                .flat_map(|j| traj[j].iter().zip(&reference[j]).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max)
        };
        let coarse = err(&at(base.step));
        let fine = err(&at(base.step / 2.0));
        assert!(coarse / fine >= 8.0, "{coarse} / {fine}");
    }

    #[test]
    fn invalid_params_are_rejected() {
        let p = GoodwinParams {
            step: 2.0,
            ..GoodwinParams::default()
        };
        assert!(matches!(p.validate(), Err(GoodwinError::Params(_))));
        let q = GoodwinParams {
            hill: 0.5,
            ..GoodwinParams::default()
        };
        assert!(q.validate().is_err());
        let grid = [0.0, 200.0];
        assert!(rk4_integrate(&GoodwinParams::default(), &grid).is_err());
    }

    #[test]
    fn blow_up_reports_time() {
        let p = GoodwinParams {
            rates: [1e300, 0.0, 1e300, 0.0, 1e300, 0.0],
            ..GoodwinParams::default()
        };
        assert!(matches!(rk4_path(&p), Err(GoodwinError::BlowUp { .. })));
    }

    #[test]
    fn noiseless_samples_follow_the_integrator() {
        let m = GeneratorManifest::new(
            3,
            11,
            Sampling {
                points: 40,
                sigma: 0.0,
                ..Sampling::default()
            },
        );
        let ds = generate_dataset(&m).unwrap();
        for (i, inst) in ds.instances.iter().enumerate() {
            assert_eq!(inst.times.len(), 40);
            inst.validate(2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            rng.set_stream(i as u64);
            let p = draw_params(&mut rng, &m);
            let traj = rk4_integrate(&p, &inst.times).unwrap();
            for (n, row) in inst.values.iter().enumerate() {
                assert!((row[0] - traj[0][n]).abs() <= 1e-6);
                assert!((row[1] - traj[1][n]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let m = GeneratorManifest::new(4, 3, Sampling { drop_prob: 0.3, ..Sampling::default() });
        let a = generate_dataset(&m).unwrap();
        let b = generate_dataset(&m).unwrap();
        let lines = |d: &Dataset| d.instances.iter().map(crate::data::instance_to_json).collect::<Vec<_>>();
        assert_eq!(lines(&a), lines(&b));
        assert!(a.instances.iter().any(|i| i.values.iter().flatten().any(|v| v.is_nan())));
        for inst in &a.instances {
            inst.validate(2).unwrap();
            assert!(inst.values.iter().flatten().all(|v| v.is_nan() || *v >= 0.0));
        }
    }

    #[test]
    fn zero_count_is_rejected() {
        let m = GeneratorManifest::new(0, 1, Sampling::default());
        assert!(generate_dataset(&m).is_err());
    }
}
