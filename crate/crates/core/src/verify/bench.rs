//! Sampling-speed benchmark across image sizes for one model family.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::InverseStats;
use crate::model::{Model, ModelConfig};

pub const BENCH_CSV_HEADER: &str = "size,batch,ms_per_datapoint,conv_applications";
/// Sampling batch size of the reference timing protocol.
pub const DEFAULT_BATCH: usize = 100;
const MIN_TICKS: u32 = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub batch: usize,
    pub ms_per_datapoint: f64,
    /// Masked-convolution evaluations of one sampling call.
    pub conv_applications: usize,
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{BENCH_CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{:.6},{}",
                r.size, r.batch, r.ms_per_datapoint, r.conv_applications
            )
            .unwrap();
        }
        s
    }

    pub fn row(&self, size: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.size == size)
    }

    /// `t(b) / t(a)` in time per datapoint.
    pub fn time_ratio(&self, a: usize, b: usize) -> Option<f64> {
        Some(self.row(b)?.ms_per_datapoint / self.row(a)?.ms_per_datapoint)
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    /// Square image sizes; every other field of `base` is held fixed.
    pub sizes: Vec<usize>,
    pub batch: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub temperature: f64,
    pub base: ModelConfig,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let base = ModelConfig {
            image: (16, 16, 3),
            ..ModelConfig::default()
        };
        BenchConfig {
            sizes: vec![16, 32],
            batch: DEFAULT_BATCH,
            repeats: 5,
            warmup: 1,
            temperature: 1.0,
            base,
            seed: 0,
        }
    }
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

/// Median milliseconds per sampled datapoint at each size. Runs inside the
/// calling thread only. A repeat shorter than ten clock ticks is redone with
/// twice as many sampling calls.
pub fn bench_sample(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.sizes.is_empty() || cfg.batch == 0 || cfg.repeats == 0 {
        return Err(Error::Validation(
            "bench needs sizes, batch >= 1 and repeats >= 1".into(),
        ));
    }
    let tick = timer_resolution();
    let mut report = BenchReport::default();
    for &size in &cfg.sizes {
        let mc = ModelConfig {
            image: (size, size, cfg.base.image.2),
            ..cfg.base.clone()
        };
        let model = Model::<f32>::build(&mc, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut stats = InverseStats::default();
        model.sample_counted(cfg.batch, cfg.temperature, &mut rng, &mut stats)?;
        let expected = model.analytic_inverse_conv_count();
        if stats.conv_applications != expected {
            return Err(Error::Validation(format!(
                "size {size}: counted {} conv applications, expected {expected}",
                stats.conv_applications
            )));
        }
        for _ in 1..cfg.warmup {
            model.sample(cfg.batch, cfg.temperature, &mut rng)?;
        }
        let mut calls = 1u32;
        let mut times = Vec::with_capacity(cfg.repeats);
        while times.len() < cfg.repeats {
            let start = Instant::now();
            for _ in 0..calls {
                model.sample(cfg.batch, cfg.temperature, &mut rng)?;
            }
            let elapsed = start.elapsed();
            if elapsed < tick * MIN_TICKS {
                calls *= 2;
                times.clear();
                continue;
            }
            times.push(elapsed.as_secs_f64() * 1e3 / calls as f64 / cfg.batch as f64);
        }
        report.rows.push(BenchRow {
            size,
            batch: cfg.batch,
            ms_per_datapoint: median(&mut times),
            conv_applications: stats.conv_applications,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_scale_linearly_with_size() {
        let cfg = BenchConfig {
            sizes: vec![4, 8, 16],
            batch: 2,
            repeats: 1,
            base: ModelConfig {
                levels: 1,
                depths: vec![vec![1]],
                hidden_channels: 4,
                image: (4, 4, 1),
                ..ModelConfig::default()
            },
            ..BenchConfig::default()
        };
        let r = bench_sample(&cfg).unwrap();
        let counts: Vec<usize> = r.rows.iter().map(|r| r.conv_applications).collect();
        // one step, two units, squeezed side s/2: 2 * s/2 + 2 * s/2
        assert_eq!(counts, vec![8, 16, 32]);
        assert!(r.rows.iter().all(|r| r.ms_per_datapoint > 0.0));
        assert!(r
            .to_csv()
            .starts_with("size,batch,ms_per_datapoint,conv_applications\n4,2,"));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
