//! Data-parallel helpers. With the `parallel` feature the hot loops run on
//! rayon; without it (or with [`ExecMode::Sequential`]) they run in order on
//! the calling thread. Both paths produce identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// The mode used when callers do not choose one.
    pub fn preferred() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Order-preserving map over a slice.
pub fn map<T, U, F>(mode: ExecMode, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// Order-preserving map over `0..len`.
pub fn map_range<U, F>(mode: ExecMode, len: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => (0..len).into_par_iter().map(f).collect(),
        _ => (0..len).map(f).collect(),
    }
}

/// Order-preserving fallible map; returns the first error in input order.
pub fn try_map<T, U, E, F>(mode: ExecMode, items: &[T], f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    map(mode, items, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let xs: Vec<u64> = (0..10_000).collect();
        let seq = map(ExecMode::Sequential, &xs, |x| x * x);
        let par = map(ExecMode::Parallel, &xs, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(
            map_range(ExecMode::Parallel, 5, |i| i + 1),
            vec![1, 2, 3, 4, 5]
        );
        let r: Result<Vec<u64>, u64> =
            try_map(ExecMode::Parallel, &xs, |&x| if x == 7 || x == 9 { Err(x) } else { Ok(x) });
        assert_eq!(r, Err(7));
    }
}
