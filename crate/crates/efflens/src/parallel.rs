//! Thin fan-out layer over rayon with a sequential fallback.
//!
//! The `parallel` feature (on by default) routes [`par_map`] through rayon;
//! without it the same call is a plain sequential loop. Every call site maps
//! a pure function over independent indices and collects results in index
//! order, so output is bitwise identical regardless of thread count. That is
//! what makes `--threads 1` and the no-feature build interchangeable for the
//! reproducibility contract.

/// Install a global thread pool of `n` threads. On the sequential build this
/// is a no-op. Ignores the error if a pool already exists (tests may call it
/// repeatedly).
#[cfg(feature = "parallel")]
pub fn configure_threads(n: usize) {
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_n: usize) {}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn par_map<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    (0..n).map(f).collect()
}

/// Sequential reference path, kept callable on every build so benchmarks can
/// compare the two directly.
pub fn seq_map<R>(n: usize, f: impl Fn(usize) -> R) -> Vec<R> {
    (0..n).map(f).collect()
}
