//! Thread-pool plumbing for the data-parallel inner loops.
//!
//! Three workloads fan out over independent items: finite-difference
//! gradient sweeps (one item per parameter coordinate), frozen-model
//! embedding extraction (one item per conversation), and ensemble weight
//! search (one item per grid cell). Each item is a pure function of its
//! inputs, results are collected in input order and reduced sequentially,
//! so the parallel and sequential paths produce bitwise-identical output.
//!
//! With the `parallel` feature disabled the crate compiles without rayon
//! and `Threading::Parallel` silently degrades to the sequential path.

/// Execution policy for the fan-out helpers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threading {
    Sequential,
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

/// Map `f` over `items`, preserving order.
pub fn map<I, O, F>(threading: Threading, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    match threading {
        Threading::Sequential => items.iter().map(f).collect(),
        Threading::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.iter().map(f).collect()
            }
        }
    }
}

/// Map `f` over the index range `0..n`, preserving order.
pub fn map_range<O, F>(threading: Threading, n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    match threading {
        Threading::Sequential => (0..n).map(f).collect(),
        Threading::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let items: Vec<u64> = (0..1000).collect();
        let seq = map(Threading::Sequential, &items, |x| x * x + 1);
        let par = map(Threading::Parallel, &items, |x| x * x + 1);
        assert_eq!(seq, par);

        let seq = map_range(Threading::Sequential, 257, |i| (i as f64).sqrt());
        let par = map_range(Threading::Parallel, 257, |i| (i as f64).sqrt());
        assert_eq!(seq, par);
    }
}
