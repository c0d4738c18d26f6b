//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) the helpers dispatch to rayon;
//! without it every call runs on the calling thread. Each output element is
//! produced by the same sequential inner loop in both modes, so results are
//! bit-identical regardless of the execution mode or thread count.

/// How a data-parallel loop is executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

/// Below this many scalar multiply-adds a kernel stays on the calling thread.
pub const PARALLEL_THRESHOLD: usize = 1 << 15;

impl Exec {
    /// Parallel when the feature is enabled and the workload is large enough.
    pub fn auto(work: usize) -> Exec {
        if cfg!(feature = "parallel") && work >= PARALLEL_THRESHOLD {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    /// The best mode available in this build, ignoring workload size.
    pub fn available() -> Exec {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Runs `f(row_index, row)` over consecutive `row_len`-sized chunks of `out`.
pub fn for_each_row<F>(out: &mut [f64], row_len: usize, exec: Exec, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
        }
        _ => out
            .chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row)),
    }
}

/// Maps `f` over `0..n`, preserving index order in the output.
pub fn map_range<T, F>(n: usize, exec: Exec, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Worker cap from `CRCKD_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("CRCKD_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Runs `f` inside a pool capped by `CRCKD_THREADS` (or rayon's default).
pub fn with_capped_pool<R, F>(f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = thread_cap() {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                return pool.install(f);
            }
        }
        f()
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let mut a = vec![0.0; 40];
        let mut b = vec![0.0; 40];
        let fill = |i: usize, row: &mut [f64]| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (i * 10 + j) as f64 * 0.1;
            }
        };
        for_each_row(&mut a, 4, Exec::Sequential, fill);
        for_each_row(&mut b, 4, Exec::available(), fill);
        assert_eq!(a, b);
        let s = map_range(17, Exec::Sequential, |i| i * i);
        let p = map_range(17, Exec::available(), |i| i * i);
        assert_eq!(s, p);
    }

    #[test]
    fn small_work_stays_sequential() {
        assert_eq!(Exec::auto(10), Exec::Sequential);
    }
}
