//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature, chunked loops run on the rayon pool unless
//! disabled at runtime through [`set_enabled`]. Each chunk is owned by one
//! task and processed in a fixed order, so the output never depends on the
//! scheduling.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Below this many scalar multiply-adds a loop is not worth splitting.
const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Toggles parallel execution at runtime. Has no effect without the
/// `parallel` feature.
pub fn set_enabled(enabled: bool) {
    ENABLED.store(enabled, Ordering::Relaxed);
}

/// Whether loops currently run in parallel.
pub fn is_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Calls `f(index, chunk)` for every `chunk_len`-sized chunk of `data`.
///
/// `work` is a rough estimate of the total number of operations and is used
/// only to decide whether splitting pays off.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if is_enabled() && work >= MIN_PARALLEL_WORK && data.len() > chunk_len {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = work;
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `0..n` and collects the results in index order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if is_enabled() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_visit_every_element_once() {
        let mut v = vec![0usize; 1 << 16];
        for_each_chunk(&mut v, 1000, usize::MAX, |i, c| {
            for x in c.iter_mut() {
                *x += i + 1;
            }
        });
        for (j, x) in v.iter().enumerate() {
            assert_eq!(*x, j / 1000 + 1);
        }
    }

    #[test]
    fn map_indices_keeps_order() {
        let v = map_indices(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }
}
