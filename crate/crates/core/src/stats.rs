use rayon::prelude::*;

use crate::Scalar;

/// Paths per reduction chunk. Fixed so reductions do not depend on the
/// number of worker threads.
pub const CHUNK: usize = 512;

/// Sample mean and standard error of the mean, two-pass.
pub fn mean_stderr<S: Scalar>(samples: &[S]) -> (S, S) {
    let n = samples.len();
    if n == 0 {
        return (S::nan(), S::nan());
    }
    let mean = samples.iter().copied().sum::<S>() / S::of_usize(n);
    if n < 2 {
        return (mean, S::zero());
    }
    let ss: S = samples.iter().map(|&x| (x - mean) * (x - mean)).sum();
    let var = ss / S::of_usize(n - 1);
    (mean, (var / S::of_usize(n)).sqrt())
}

/// Running sums of a scalar sample, accumulated in `f64`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub count: usize,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, other: &Moments) {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0)
    }

    pub fn stderr(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        (self.variance() / self.count as f64).sqrt()
    }
}

/// Runs `work` over fixed-size chunks of `0..n` in parallel and returns the
/// per-chunk results in chunk order.
pub fn par_chunks<T, F>(n: usize, work: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let n_chunks = n.div_ceil(CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| work(c * CHUNK..((c + 1) * CHUNK).min(n)))
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
