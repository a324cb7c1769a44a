//! Execution mode for the data-parallel inner loops.
//!
//! Every helper here preserves input order in its output, so callers that
//! fold the results sequentially get the same floating point answer no
//! matter how rayon schedules the work.

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Row chunk size used by all chunked reductions.
pub const CHUNK_ROWS: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    /// Uses rayon when compiled with the `parallel` feature, sequential otherwise.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps `f` over a slice, returning results in slice order.
    pub fn map_slice<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
        }
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }

    /// Fills `out` in fixed `chunk`-sized pieces; `f` gets the chunk's start offset.
    pub fn fill_chunks<T, F>(self, out: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i * chunk, c));
            return;
        }
        out.chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i * chunk, c));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let xs: Vec<f64> = (0..10_000).map(|i| (i as f64).sin()).collect();
        let seq = Execution::Sequential.map_slice(&xs, |i, x| x * i as f64);
        let par = Execution::Parallel.map_slice(&xs, |i, x| x * i as f64);
        assert_eq!(seq, par);

        let mut a = vec![0.0; 2000];
        let mut b = vec![0.0; 2000];
        Execution::Sequential.fill_chunks(&mut a, 64, |off, c| {
            for (k, v) in c.iter_mut().enumerate() {
                *v = (off + k) as f64;
            }
        });
        Execution::Parallel.fill_chunks(&mut b, 64, |off, c| {
            for (k, v) in c.iter_mut().enumerate() {
                *v = (off + k) as f64;
            }
        });
        assert_eq!(a, b);
        assert_eq!(a[1999], 1999.0);
    }
}
