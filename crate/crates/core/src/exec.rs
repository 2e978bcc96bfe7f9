//! Data-parallel execution helpers.
//!
//! Every hot kernel routes through these functions. With the `parallel`
//! feature (default) they dispatch to rayon; without it they run plain
//! sequential loops. Reductions over floating-point partials are always
//! folded in index order so results are bitwise identical regardless of
//! thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
use std::cell::Cell;

#[cfg(feature = "parallel")]
thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with parallel dispatch disabled on the current thread.
/// Used by the benchmark suite to compare both execution modes in one
/// process; the sequential code path is identical to the one compiled
/// when the `parallel` feature is off.
pub fn with_sequential<T>(f: impl FnOnce() -> T) -> T {
    #[cfg(feature = "parallel")]
    {
        let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
        let out = f();
        FORCE_SEQUENTIAL.with(|c| c.set(prev));
        out
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

#[cfg(feature = "parallel")]
fn sequential_forced() -> bool {
    FORCE_SEQUENTIAL.with(|c| c.get())
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        if !sequential_forced() {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Splits `data` into equally sized chunks and fills each one
/// independently; chunk `i` covers `data[i*chunk..(i+1)*chunk]`.
pub fn par_fill_chunks(data: &mut [f64], chunk: usize, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    debug_assert!(chunk > 0 && data.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    {
        if !sequential_forced() {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_is_index_ordered() {
        let v = par_map(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn sequential_override_matches_parallel() {
        let a = par_map(257, |i| (i as f64).sin());
        let b = with_sequential(|| par_map(257, |i| (i as f64).sin()));
        assert_eq!(a, b);
    }

    #[test]
    fn fill_chunks_covers_all() {
        let mut data = vec![0.0; 12];
        par_fill_chunks(&mut data, 3, |i, c| c.fill(i as f64));
        assert_eq!(data, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
    }
}
