//! Wall-clock comparison of the full and query-selector attention kernels
//! on identical inputs.

use crate::attention::{full_attention, query_selector_attention, selected_count};
use crate::error::Result;
use crate::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use std::time::Instant;

const WARMUP: usize = 3;

/// Median forward times for both kernels on one (L, D, f) point.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub len: usize,
    pub dim: usize,
    pub factor_f: f64,
    pub selected: usize,
    pub reps: usize,
    pub full_median_s: f64,
    pub selector_median_s: f64,
}

impl BenchReport {
    /// How many times faster the sparse kernel ran.
    pub fn speedup(&self) -> f64 {
        self.full_median_s / self.selector_median_s
    }
}

/// Time both kernels over `reps` measured runs each, discarding a fixed
/// warmup. Inputs are seeded so repeated calls measure the same work.
pub fn bench_kernels(len: usize, dim: usize, f: f64, reps: usize, seed: u64) -> Result<BenchReport> {
    let selected = selected_count(len, f)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |rows: usize, cols: usize| {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    };
    let q = random(len, dim);
    let k = random(len, dim);
    let v = random(len, dim);
    let scale = (dim as f64).sqrt();

    let full_median_s = median_time(reps, || {
        black_box(full_attention(&q, &k, &v, scale, false).unwrap());
    });
    let selector_median_s = median_time(reps, || {
        black_box(query_selector_attention(&q, &k, &v, f, scale).unwrap());
    });

    Ok(BenchReport {
        len,
        dim,
        factor_f: f,
        selected,
        reps,
        full_median_s,
        selector_median_s,
    })
}

fn median_time(reps: usize, mut run: impl FnMut()) -> f64 {
    assert!(reps >= 1);
    for _ in 0..WARMUP {
        run();
    }
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            run();
            start.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}
