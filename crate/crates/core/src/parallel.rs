//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper hands each output slot to the closure exactly once and the
//! closure computes that slot with a fixed internal order, so results are
//! bitwise identical for any thread count and for either mode.

/// Execution mode for the data-parallel kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Threading {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled; sequential otherwise.
    Parallel,
}

impl Default for Threading {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Threading::Parallel
        } else {
            Threading::Sequential
        }
    }
}

/// Fill `out` in chunks of `chunk` elements; the closure receives the chunk
/// index and the mutable chunk.
pub fn for_each_chunk<T, F>(threading: Threading, out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk = chunk.max(1);
    match threading {
        #[cfg(feature = "parallel")]
        Threading::Parallel => {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }
        _ => out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
    }
}

/// Map `f` over `items`, preserving order.
pub fn map_collect<I, R, F>(threading: Threading, items: &[I], f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(&I) -> R + Send + Sync,
{
    match threading {
        #[cfg(feature = "parallel")]
        Threading::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}
