//! Inference wall-clock benchmark: warmup runs, then the median of the
//! timed single-image forward passes, reported with a hardware descriptor.

use crate::Result;
use nusg_core::blocks::Mode;
use nusg_core::model::Model;
use nusg_core::rng::SeededRng;
use nusg_core::tensor::{Graph, Tensor};
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct BenchResult {
    /// Median over the timed runs.
    pub seconds_per_image: f64,
    pub runs: usize,
    pub warmup: usize,
    pub hardware: String,
    pub samples: Vec<f64>,
}

pub fn bench_inference(model: &Model<f32>, size: usize, warmup: usize, runs: usize) -> Result<BenchResult> {
    let mut rng = SeededRng::new(0xbe7c);
    let data: Vec<f32> = (0..3 * size * size)
        .map(|_| rng.uniform() as f32)
        .collect();
    let input = Tensor::new(&[1, 3, size, size], data)?;
    let forward = || -> Result<()> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        model.forward(&mut g, x, Mode::Eval)?;
        Ok(())
    };
    for _ in 0..warmup {
        forward()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        forward()?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    let mut sorted = samples.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    Ok(BenchResult {
        seconds_per_image: median,
        runs,
        warmup,
        hardware: hardware_descriptor(),
        samples,
    })
}

/// Best-effort CPU description: model name from /proc/cpuinfo plus the
/// available thread count and architecture.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    format!("{cpu}; {threads} threads; {}", std::env::consts::ARCH)
}
