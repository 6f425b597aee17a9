//! Data-parallel helpers with a sequential fallback.
//!
//! Results are always collected in index order, so reductions performed by
//! callers over the returned vectors do not depend on thread scheduling.

/// How an embarrassingly parallel loop is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Runs on the rayon pool when the `parallel` feature is enabled,
    /// otherwise identical to `Sequential`.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Minimum loop length before per-observation work is farmed out.
pub const PAR_MIN_LEN: usize = 512;

pub fn map_range<T, F>(len: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if exec.is_parallel() {
            use rayon::prelude::*;
            return (0..len).into_par_iter().map(f).collect();
        }
    }
    let _ = exec;
    (0..len).map(f).collect()
}

/// Like [`map_range`] but only goes parallel for long loops.
pub fn map_range_auto<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let exec = if len >= PAR_MIN_LEN {
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    map_range(len, exec, f)
}
