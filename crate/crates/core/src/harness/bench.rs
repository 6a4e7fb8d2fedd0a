//! Latency profiling.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::report::{KvReport, Table};
use crate::diffops::Graph;
use crate::error::Result;
use crate::model::{Model, RunOptions};
use crate::stage::Stage;
use crate::tensor::Tensor;

pub const WARMUP: usize = 3;
/// Fewer timed repetitions than this are flagged in the report.
pub const MIN_REPS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRow {
    pub name: String,
    pub median_ms: f64,
    pub p95_ms: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub reps: usize,
    pub insufficient_samples: bool,
    pub rows: Vec<LatencyRow>,
    /// FLOPs per instrumentation slot: encoder, stages 1–3.
    pub flops: [u64; 4],
    pub params: Vec<(String, usize)>,
}

/// Nearest-rank percentile of unsorted samples, in milliseconds.
pub fn percentile_ms(samples: &[Duration], q: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    ms.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * ms.len() as f64).ceil() as usize).clamp(1, ms.len());
    ms[rank - 1]
}

/// Trainable parameters per module prefix.
pub fn module_params(model: &Model<f32>) -> Vec<(String, usize)> {
    ["encoder", "disp", "sem", "synergy"]
        .iter()
        .map(|m| (m.to_string(), model.store.trainable_count_prefix(m)))
        .filter(|(_, n)| *n > 0)
        .collect()
}

pub fn bench(model: &Model<f32>, height: usize, width: usize, reps: usize, opts: RunOptions, seed: u64) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let left = Tensor::from_fn([1, 3, height, width], |_| rng.random_range(0.0..255.0));
    let right = Tensor::from_fn([1, 3, height, width], |_| rng.random_range(0.0..255.0));
    let stages: Vec<Stage> = Stage::ALL.into_iter().filter(|&s| s <= opts.stage_stop).collect();
    // columns: encoder, per stage (disparity, semantic, refine, total), wall total
    let mut names = vec!["encoder".to_string()];
    for s in &stages {
        for b in ["disparity", "semantic", "refine", "total"] {
            names.push(format!("{s}.{b}"));
        }
    }
    names.push("total".into());
    let mut samples: Vec<Vec<Duration>> = vec![Vec::new(); names.len()];
    let mut flops = [0u64; 4];
    for it in 0..WARMUP + reps {
        let mut g = Graph::<f32>::new();
        let t = Instant::now();
        let out = model.forward(&mut g, &left, &right, opts)?;
        let wall = t.elapsed();
        if it < WARMUP {
            continue;
        }
        let mut col = 0;
        samples[col].push(out.encode_time);
        for so in &out.stages {
            for d in [so.times.disparity, so.times.semantic, so.times.refine, so.times.total()] {
                col += 1;
                samples[col].push(d);
            }
        }
        samples[names.len() - 1].push(wall);
        for (f, c) in flops.iter_mut().zip(g.counters()) {
            *f = c.flops;
        }
    }
    if reps == 0 {
        let mut g = Graph::<f32>::new();
        model.forward(&mut g, &left, &right, opts)?;
        for (f, c) in flops.iter_mut().zip(g.counters()) {
            *f = c.flops;
        }
    }
    let rows = names
        .into_iter()
        .zip(&samples)
        .map(|(name, s)| LatencyRow {
            name,
            median_ms: percentile_ms(s, 0.5),
            p95_ms: percentile_ms(s, 0.95),
        })
        .collect();
    Ok(BenchReport {
        height,
        width,
        reps,
        insufficient_samples: reps < MIN_REPS,
        rows,
        flops,
        params: module_params(model),
    })
}

impl BenchReport {
    pub fn kv(&self) -> KvReport {
        let mut r = KvReport::default();
        r.push("input", format!("{}x{}", self.height, self.width));
        r.push("repetitions", self.reps);
        r.push("warmup", WARMUP);
        if self.insufficient_samples {
            r.push("warning", format!("insufficient samples: {} < {MIN_REPS} repetitions", self.reps));
        }
        for (slot, f) in ["encoder", "stage1", "stage2", "stage3"].iter().zip(self.flops) {
            r.push(format!("flops.{slot}"), f);
        }
        r.push("flops.total", self.flops.iter().sum::<u64>());
        for (m, n) in &self.params {
            r.push(format!("params.{m}"), n);
        }
        r.push("params.total", self.params.iter().map(|p| p.1).sum::<usize>());
        r
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["component", "median_ms", "p95_ms"]);
        for row in &self.rows {
            t.row(vec![
                row.name.clone(),
                format!("{:.3}", row.median_ms),
                format!("{:.3}", row.p95_ms),
            ]);
        }
        t
    }
}
