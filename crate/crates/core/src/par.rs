//! Ordered chunked maps: serial by default, rayon under `parallel`.
//! Chunk boundaries depend only on the item count, so reductions over the
//! returned vector are identical for every pool size.

use alloc::vec::Vec;

pub const CHUNK: usize = 256;

pub fn map_chunks<R, F>(n_items: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(core::ops::Range<usize>) -> R + Sync + Send,
{
    let n_chunks = n_items.div_ceil(CHUNK);
    let range = move |c: usize| c * CHUNK..((c + 1) * CHUNK).min(n_items);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n_chunks).into_par_iter().map(|c| f(range(c))).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n_chunks).map(|c| f(range(c))).collect()
    }
}
