//! Execution modes for the data-parallel inner loops.
//!
//! Both modes share one chunked summation order, so parallel results are
//! bit-identical to the sequential fold. Without the `parallel` feature,
//! `Parallel` degrades to the sequential path.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl ExecMode {
    /// Preferred mode for this build: parallel when compiled in.
    pub fn auto() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

pub const CHUNK: usize = 1024;

/// Sum of `f(i)` over `0..n` as three accumulators, chunked with a fixed
/// reduction order shared by both modes.
pub fn chunked_triple_sum<F>(n: usize, mode: ExecMode, f: F) -> (f64, f64, f64)
where
    F: Fn(usize) -> (f64, f64, f64) + Sync,
{
    let chunk_sum = |c: usize| {
        let lo = c * CHUNK;
        let hi = ((c + 1) * CHUNK).min(n);
        let mut acc = (0.0, 0.0, 0.0);
        for i in lo..hi {
            let v = f(i);
            acc.0 += v.0;
            acc.1 += v.1;
            acc.2 += v.2;
        }
        acc
    };
    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<(f64, f64, f64)> = run_indexed(chunks, mode, chunk_sum);
    partials
        .into_iter()
        .fold((0.0, 0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2))
}

/// Evaluate `f` over `0..n`, collecting results in index order.
pub fn run_indexed<R, F>(n: usize, mode: ExecMode, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}
