//! Data-parallel helpers. With the `parallel` feature the closures run on the
//! rayon pool; without it they run in order on the calling thread.
//!
//! Every helper partitions work by output element, and each output is produced
//! by one fixed sequential reduction, so results are bit-identical regardless
//! of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many scalar multiply-adds the sequential path wins.
#[cfg(feature = "parallel")]
const MIN_PAR_WORK: usize = 1 << 14;

/// Calls `f(chunk_index, chunk)` for every `chunk`-sized piece of `data`.
/// `work` is a rough count of scalar operations, used to skip the pool for
/// small jobs.
pub fn chunks_mut<T, F>(data: &mut [T], chunk: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if work >= MIN_PAR_WORK && data.len() > chunk {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = work;
    data.chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// `(0..n).map(f).collect()`, in parallel when the feature is on.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Caps the global worker pool. Returns the thread count in effect.
/// Reads `WVT_THREADS` when `threads` is `None`.
pub fn init_threads(threads: Option<usize>) -> usize {
    let requested = threads.or_else(|| {
        std::env::var("WVT_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
    });
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = requested {
            // Fails only if the pool was already built; keep whatever exists.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = requested;
        1
    }
}

/// A one-worker pool: helpers called inside `run` execute sequentially.
pub struct Sequential {
    #[cfg(feature = "parallel")]
    pool: rayon::ThreadPool,
}

impl Sequential {
    pub fn new() -> Self {
        Self {
            #[cfg(feature = "parallel")]
            pool: rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .expect("single-thread pool"),
        }
    }

    pub fn run<R: Send, F: FnOnce() -> R + Send>(&self, f: F) -> R {
        #[cfg(feature = "parallel")]
        {
            self.pool.install(f)
        }
        #[cfg(not(feature = "parallel"))]
        {
            f()
        }
    }
}

impl Default for Sequential {
    fn default() -> Self {
        Self::new()
    }
}

/// Runs `f` with parallel helpers restricted to a single worker.
pub fn with_single_thread<R: Send, F: FnOnce() -> R + Send>(f: F) -> R {
    Sequential::new().run(f)
}

/// Workers available to the helpers.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
