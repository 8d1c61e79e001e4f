//! Order-preserving data-parallel maps. With the `parallel` feature the
//! work runs on rayon unless sequential mode is selected at runtime;
//! without it everything runs on the calling thread. Results always come
//! back in input order, so reductions over them are deterministic.

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Parallel,
    Sequential,
}

pub fn set_mode(mode: Mode) {
    SEQUENTIAL.store(mode == Mode::Sequential, Ordering::SeqCst);
}

pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && !SEQUENTIAL.load(Ordering::SeqCst) {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Caps the global worker pool. Reads `OMNI_THREADS` when `jobs` is
/// `None`. Only the first successful call takes effect.
pub fn init_threads(jobs: Option<usize>) -> usize {
    let jobs = jobs.or_else(|| std::env::var("OMNI_THREADS").ok()?.parse().ok());
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = jobs.filter(|n| *n > 0) {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        1
    }
}

pub fn map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

pub fn map_range<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Runs two closures, concurrently when parallel.
pub fn join<A, B, FA, FB>(fa: FA, fb: FB) -> (A, B)
where
    A: Send,
    B: Send,
    FA: FnOnce() -> A + Send,
    FB: FnOnce() -> B + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        return rayon::join(fa, fb);
    }
    (fa(), fb())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_preserve_order_in_both_modes() {
        let xs: Vec<u64> = (0..100).collect();
        let par = map(&xs, |x| x * x);
        let r = map_range(100, |i| (i * i) as u64);
        assert_eq!(par, r);
        set_mode(Mode::Sequential);
        let seq = map(&xs, |x| x * x);
        set_mode(Mode::Parallel);
        assert_eq!(par, seq);
        assert_eq!(join(|| 1, || 2), (1, 2));
    }
}
