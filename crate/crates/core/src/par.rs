//! Sequential/parallel dispatch for the data-parallel loops.
//!
//! With the `parallel` feature (default) the heavy loops fan out over rayon;
//! without it every call runs sequentially. Both paths produce bit-identical
//! results: work is split into independent chunks and each chunk is computed
//! the same way regardless of which thread runs it.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Whether this mode actually runs on multiple threads in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Run `f(chunk_index, chunk)` over `chunk_len`-sized chunks of `out`.
pub(crate) fn for_each_chunk<F>(exec: Execution, out: &mut [f32], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    out.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// `(0..n).map(f)` with results in index order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_match_between_modes() {
        let run = |exec| {
            let mut v = vec![0f32; 1000];
            for_each_chunk(exec, &mut v, 7, |i, c| {
                for (j, x) in c.iter_mut().enumerate() {
                    *x = (i * 7 + j) as f32 * 0.5;
                }
            });
            v
        };
        assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
    }

    #[test]
    fn map_indexed_keeps_order() {
        let v = map_indexed(Execution::Parallel, 100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }
}
