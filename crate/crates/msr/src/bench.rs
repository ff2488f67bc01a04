//! Training-time scaling and per-request latency measurements.

use std::time::Instant;

use msr_core::features::{Sample, Standardizer};
use msr_core::model::{ModelConfig, MvModel};
use msr_core::train::{seeded, train_mv, EpochRecord, Monitor, TrainConfig, STREAM_INIT};
use serde::Serialize;

use crate::checkpoint::{Branch, Model};
use crate::error::Result;

/// Fractions of the base size timed by [`train_scaling`].
pub const SCALES: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub rows: usize,
    pub secs_per_epoch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares line through `(x, y)` and its coefficient of determination.
pub fn linear_fit(points: &[(f64, f64)]) -> LinearFit {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let syy: f64 = points.iter().map(|(_, y)| (y - my) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let sse: f64 = points
        .iter()
        .map(|(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    LinearFit {
        slope,
        intercept,
        r2,
    }
}

struct Timer {
    start: Instant,
    train_secs: Vec<f64>,
}

impl Monitor for Timer {
    fn now(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn epoch(&mut self, record: &EpochRecord) {
        self.train_secs.push(record.secs);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    pub fit: LinearFit,
}

/// Times `epochs` training epochs on the first `s × base` rows for every
/// scale in [`SCALES`]; validation uses a fixed slice so its cost does not
/// grow with the training size.
pub fn train_scaling(
    config: ModelConfig,
    train: &[Sample],
    val: &[Sample],
    base: usize,
    cfg: &TrainConfig,
) -> Result<ScalingReport> {
    let mut points = Vec::new();
    for s in SCALES {
        let rows = ((base as f64 * s).round() as usize).clamp(1, train.len());
        let subset = &train[..rows];
        let stats = Standardizer::fit(subset);
        let mut model = MvModel::new(config, stats, &mut seeded(cfg.seed, STREAM_INIT))?;
        let mut timer = Timer {
            start: Instant::now(),
            train_secs: Vec::new(),
        };
        let cfg = TrainConfig {
            patience: cfg.max_epochs.max(1),
            ..*cfg
        };
        train_mv(&mut model, subset, val, &cfg, &mut timer)?;
        let secs = timer.train_secs.iter().sum::<f64>() / timer.train_secs.len() as f64;
        log::info!("{rows} rows: {secs:.3} s/epoch");
        points.push(ScalingPoint {
            rows,
            secs_per_epoch: secs,
        });
    }
    let fit = linear_fit(&points.iter().map(|p| (p.rows as f64, p.secs_per_epoch)).collect::<Vec<_>>());
    Ok(ScalingReport { points, fit })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Latency {
    pub requests: usize,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub mean: f64,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Microseconds per single-row prediction, cycling through `samples`.
pub fn infer_latency(model: &Model, branch: Branch, samples: &[Sample], requests: usize) -> Result<Latency> {
    let warmup = requests.min(100);
    for s in samples.iter().cycle().take(warmup) {
        model.predict(branch, std::slice::from_ref(s))?;
    }
    let mut micros = Vec::with_capacity(requests);
    for s in samples.iter().cycle().take(requests) {
        let t = Instant::now();
        model.predict(branch, std::slice::from_ref(s))?;
        micros.push(t.elapsed().as_secs_f64() * 1e6);
    }
    let mean = micros.iter().sum::<f64>() / micros.len().max(1) as f64;
    micros.sort_by(f64::total_cmp);
    Ok(Latency {
        requests,
        p50: percentile(&micros, 0.5),
        p90: percentile(&micros, 0.9),
        p99: percentile(&micros, 0.99),
        mean,
    })
}
