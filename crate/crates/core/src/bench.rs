//! Batch-1 latency of the video path, preprocessing included.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::infer_level;
use crate::numerics::Tensor;

pub const MIN_SAMPLES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Machine {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub cpu_model: Option<String>,
}

impl Machine {
    pub fn current() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split_once(':')).map(|(_, v)| v.trim().to_string()));
        Machine {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cpu_model,
        }
    }
}

/// Per-sample wall-clock latency in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub latency: LatencyStats,
    pub params: usize,
    pub model_mb: f64,
    pub machine: Machine,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Times `run(i)` for `samples` iterations after `warmup` untimed ones.
pub fn measure(samples: usize, warmup: usize, mut run: impl FnMut(usize) -> Result<()>) -> Result<LatencyStats> {
    if samples < MIN_SAMPLES {
        return Err(Error::contract("bench", format!("{samples} samples; at least {MIN_SAMPLES} needed")));
    }
    for i in 0..warmup {
        run(i)?;
    }
    let mut times = Vec::with_capacity(samples);
    for i in 0..samples {
        let t = Instant::now();
        run(i)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / samples as f64;
    times.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        samples,
        warmup,
        mean_ms,
        p50_ms: percentile(&times, 50.0),
        p95_ms: percentile(&times, 95.0),
        p99_ms: percentile(&times, 99.0),
        max_ms: times[samples - 1],
    })
}

/// Seeded random feature clips of shape `[1, segments, features]`.
pub fn random_clips(ck: &Checkpoint, count: usize, seed: u64) -> Result<Vec<Tensor<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, f) = (ck.config.video.segments, ck.config.video.feature_dim);
    (0..count)
        .map(|_| Tensor::new([1, s, f], (0..s * f).map(|_| StandardNormal.sample(&mut rng)).collect()))
        .collect()
}

/// Clips are generated up front so loading stays outside the timed region.
pub fn bench(ck: &Checkpoint, samples: usize, warmup: usize, seed: u64) -> Result<BenchReport> {
    let clips = random_clips(ck, 16, seed)?;
    let renderer = ck.config.renderer();
    let latency = measure(samples, warmup, |i| {
        std::hint::black_box(infer_level(&ck.store, &ck.config, renderer.as_ref(), &clips[i % clips.len()])?);
        Ok(())
    })?;
    Ok(BenchReport { latency, params: ck.params(), model_mb: ck.param_bytes() as f64 / 1e6, machine: Machine::current() })
}
