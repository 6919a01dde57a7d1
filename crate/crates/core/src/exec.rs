//! Execution strategy for the data-parallel loops.
//!
//! With the `parallel` feature (default) batch work fans out over rayon's
//! global pool. Without it, or with [`Parallelism::Sequential`], the same
//! closures run in a plain loop. Output order always follows input index.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    Parallel,
}

impl Default for Parallelism {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Parallel
        } else {
            Parallelism::Sequential
        }
    }
}

impl Parallelism {
    /// Maps `f` over `0..len`, preserving index order.
    pub fn map_range<R, F>(self, len: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Parallelism::Parallel => (0..len).into_par_iter().map(f).collect(),
            _ => (0..len).map(f).collect(),
        }
    }

    /// Fallible variant of [`map_range`](Self::map_range); returns the
    /// lowest-index error.
    pub fn try_map_range<R, E, F>(self, len: usize, f: F) -> Result<Vec<R>, E>
    where
        R: Send,
        E: Send,
        F: Fn(usize) -> Result<R, E> + Sync + Send,
    {
        self.map_range(len, f).into_iter().collect()
    }

    /// Sums `f` over `0..len`. Parallel sums are reduced over fixed-size
    /// chunks in index order, so both strategies give identical results.
    pub fn sum_range<F>(self, len: usize, f: F) -> f64
    where
        F: Fn(usize) -> f64 + Sync + Send,
    {
        const CHUNK: usize = 256;
        let chunks = len.div_ceil(CHUNK);
        let partial = self.map_range(chunks, |c| {
            let end = ((c + 1) * CHUNK).min(len);
            (c * CHUNK..end).map(&f).sum::<f64>()
        });
        partial.into_iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let a = Parallelism::Sequential.map_range(1000, f);
        let b = Parallelism::Parallel.map_range(1000, f);
        assert_eq!(a, b);
        assert_eq!(
            Parallelism::Sequential.sum_range(10_001, f).to_bits(),
            Parallelism::Parallel.sum_range(10_001, f).to_bits()
        );
    }

    #[test]
    fn try_map_reports_first_error() {
        let r: Result<Vec<usize>, usize> =
            Parallelism::Parallel.try_map_range(100, |i| if i % 7 == 3 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(3));
    }
}
