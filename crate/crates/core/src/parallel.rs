//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers dispatch to rayon; without
//! it, or when [`Parallelism::Sequential`] is requested, they run in order on
//! the calling thread. Results are always returned in input order, and each
//! item is computed by the same code path either way, so outputs are bitwise
//! identical across modes.

use std::sync::atomic::{AtomicBool, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Rayon,
}

impl Parallelism {
    /// `Rayon` only when the feature is compiled in.
    pub fn effective(self) -> Self {
        if cfg!(feature = "parallel") {
            self
        } else {
            Parallelism::Sequential
        }
    }
}

static KERNEL_PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Toggle row-parallel tensor kernels at runtime (used by benches).
pub fn set_kernel_parallelism(mode: Parallelism) {
    KERNEL_PARALLEL.store(mode.effective() == Parallelism::Rayon, Ordering::Relaxed);
}

pub fn kernel_parallelism() -> Parallelism {
    if KERNEL_PARALLEL.load(Ordering::Relaxed) {
        Parallelism::Rayon
    } else {
        Parallelism::Sequential
    }
}

/// Map `f` over `items`, preserving order.
pub fn map<I, R, F>(mode: Parallelism, items: &[I], f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(usize, &I) -> R + Sync + Send,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
        }
        _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
    }
}

/// Map `f` over `0..n`, preserving order.
pub fn map_range<R, F>(mode: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

// Below this many multiply-adds the rayon dispatch costs more than it saves.
#[cfg(feature = "parallel")]
const ROW_PARALLEL_THRESHOLD: usize = 1 << 16;

/// Fill `out` row by row. `work` is the approximate op count of the whole fill.
pub(crate) fn for_each_row<T, F>(out: &mut [T], row_len: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if work >= ROW_PARALLEL_THRESHOLD && kernel_parallelism() == Parallelism::Rayon {
            use rayon::prelude::*;
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work;
    out.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let xs: Vec<u64> = (0..100).collect();
        let a = map(Parallelism::Sequential, &xs, |i, x| x * x + i as u64);
        let b = map(Parallelism::Rayon, &xs, |i, x| x * x + i as u64);
        assert_eq!(a, b);
        assert_eq!(map_range(Parallelism::Rayon, 5, |i| i), vec![0, 1, 2, 3, 4]);
    }
}
