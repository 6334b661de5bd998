//! Data-parallel map helpers. With the `parallel` feature (default) the
//! parallel variants run on rayon; without it they fall back to the serial
//! path. Output order matches input order in both cases, so results are
//! deterministic either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Order-preserving map, parallel when the feature is enabled.
#[cfg(feature = "parallel")]
pub fn par_map<T: Sync, U: Send, F: Fn(&T) -> U + Sync + Send>(items: &[T], f: F) -> Vec<U> {
    items.par_iter().map(|t| f(t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T: Sync, U: Send, F: Fn(&T) -> U + Sync + Send>(items: &[T], f: F) -> Vec<U> {
    serial_map(items, f)
}

/// Always-serial map; the benchmark baseline.
pub fn serial_map<T, U, F: Fn(&T) -> U>(items: &[T], f: F) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Map over an index range, parallel when enabled.
#[cfg(feature = "parallel")]
pub fn par_map_range<U: Send, F: Fn(usize) -> U + Sync + Send>(n: usize, f: F) -> Vec<U> {
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_range<U: Send, F: Fn(usize) -> U + Sync + Send>(n: usize, f: F) -> Vec<U> {
    (0..n).map(f).collect()
}
