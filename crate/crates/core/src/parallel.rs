//! Data-parallel helpers. With the `parallel` feature these fan out over rayon's
//! pool; without it, or with [`Parallelism::Sequential`], they run in order.
//! Results are identical either way: every closure writes only to its own item.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

pub fn for_each_mut<T, F>(items: &mut [T], par: Parallelism, f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
        return;
    }
    let _ = par;
    items.iter_mut().enumerate().for_each(|(i, t)| f(i, t));
}

/// Order-preserving map.
pub fn map<T, R, F>(items: &[T], par: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = par;
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(n: usize, par: Parallelism, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = par;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let a = map_range(100, Parallelism::Parallel, |i| i * i);
        let b = map_range(100, Parallelism::Sequential, |i| i * i);
        assert_eq!(a, b);
        let mut v = vec![0usize; 10];
        for_each_mut(&mut v, Parallelism::Parallel, |i, x| *x = i + 1);
        assert_eq!(v, (1..=10).collect::<Vec<_>>());
    }
}
