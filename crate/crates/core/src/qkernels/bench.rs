use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gemm_i8i8_i32, gemm_i8i8_i32_parallel, gemm_w4a4_i32, pack_int4};
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Square problem sizes `n` (an `n x n` by `n x n` product).
    pub sizes: Vec<usize>,
    /// Timed repetitions per kernel and size.
    pub repeats: usize,
    /// Stop repeating a case after this much wall time (at least 3 repeats run).
    pub max_seconds_per_case: f64,
    /// Run the integer kernels row-parallel.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![128, 256, 512],
            repeats: 1000,
            max_seconds_per_case: 10.0,
            parallel: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GemmBenchReport {
    pub kernel: String,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub repeats: usize,
    pub median_ns: f64,
    /// Operand and result bytes moved per call over the median time.
    pub gb_per_s: f64,
    /// Median time of the naive f32 GEMM divided by this kernel's.
    pub speedup_vs_f32: f64,
}

/// Triple-loop f32 reference: `A (m x k) * B (k x n)`.
pub fn naive_gemm_f32(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0f32;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

fn time<F: FnMut()>(repeats: usize, budget: f64, mut f: F) -> (usize, f64) {
    let start = Instant::now();
    let mut samples = Vec::new();
    while samples.len() < repeats.max(1) {
        let t = Instant::now();
        f();
        samples.push(t.elapsed().as_nanos() as f64);
        if samples.len() >= 3 && start.elapsed() > Duration::from_secs_f64(budget) {
            break;
        }
    }
    samples.sort_by(|a, b| a.total_cmp(b));
    (samples.len(), samples[samples.len() / 2])
}

/// Times the naive f32 GEMM, int8 x int8 GEMM and int4 x int4 GEMM on random
/// square operands.
pub fn bench(config: &BenchConfig) -> Result<Vec<GemmBenchReport>> {
    if config.sizes.is_empty() || config.sizes.contains(&0) || config.repeats == 0 {
        return Err(Error::usage("benchmark needs positive sizes and repeats"));
    }
    let mut out = Vec::new();
    for &n in &config.sizes {
        let mut rng = rng_for(&[config.seed, n as u64]);
        let af: Vec<f32> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bf: Vec<f32> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a8: Vec<i8> = (0..n * n).map(|_| rng.random_range(-128..=127)).collect();
        let b8: Vec<i8> = (0..n * n).map(|_| rng.random_range(-128..=127)).collect();
        let a4: Vec<i8> = (0..n * n).map(|_| rng.random_range(-8..=7)).collect();
        let w4 = pack_int4(n, n, &a4, vec![1.0; n])?;
        let x4: Vec<i8> = b8.iter().map(|v| v >> 4).collect();

        let (r, f32_ns) = time(config.repeats, config.max_seconds_per_case, || {
            std::hint::black_box(naive_gemm_f32(&af, &bf, n, n, n));
        });
        let mut push = |kernel: &str, repeats: usize, ns: f64, bytes: usize| {
            out.push(GemmBenchReport {
                kernel: kernel.to_string(),
                m: n,
                k: n,
                n,
                repeats,
                median_ns: ns,
                gb_per_s: bytes as f64 / ns,
                speedup_vs_f32: f32_ns / ns,
            })
        };
        push("f32-naive", r, f32_ns, 3 * n * n * 4);

        let (r, ns) = time(config.repeats, config.max_seconds_per_case, || {
            let c = if config.parallel {
                gemm_i8i8_i32_parallel(&a8, &b8, n, n, n)
            } else {
                gemm_i8i8_i32(&a8, &b8, n, n, n)
            };
            std::hint::black_box(c.ok());
        });
        push("w8a8", r, ns, 2 * n * n + n * n * 4);

        let (r, ns) = time(config.repeats, config.max_seconds_per_case, || {
            std::hint::black_box(gemm_w4a4_i32(&w4, &x4, n).ok());
        });
        push("w4a4", r, ns, n * n.div_ceil(2) + n * n + n * n * 4);
    }
    Ok(out)
}

/// Plain-text table of benchmark rows.
pub fn format_reports(reports: &[GemmBenchReport]) -> String {
    let mut s = String::from("kernel      size  repeats   median_ms     GB/s  speedup\n");
    for r in reports {
        s.push_str(&format!(
            "{:<10} {:>5} {:>8} {:>11.3} {:>8.2} {:>8.2}\n",
            r.kernel,
            r.n,
            r.repeats,
            r.median_ns / 1e6,
            r.gb_per_s,
            r.speedup_vs_f32
        ));
    }
    s
}
