//! Discounted optimal control with CLF-shaped stage costs: LQR-based CLF
//! synthesis, grid value iteration, multiple shooting, and numerical checks of
//! the resulting value and state bounds.

pub mod analysis;
pub mod clf;
pub mod costs;
pub mod error;
pub mod field;
pub mod linalg;
pub mod solvers;
pub mod systems;
pub mod trajopt;

pub use error::{Error, Result};

/// `(0..n).map(f)` collected in index order, in parallel when enabled.
#[cfg(feature = "parallel")]
pub(crate) fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Writes `f(i)` into `out[i]`, in parallel when enabled.
#[cfg(feature = "parallel")]
pub(crate) fn par_fill<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    out.par_iter_mut().enumerate().for_each(|(i, o)| *o = f(i));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_fill<T, F>(out: &mut [T], f: F)
where
    F: Fn(usize) -> T,
{
    out.iter_mut().enumerate().for_each(|(i, o)| *o = f(i));
}
