//! Order-preserving map that fans out over rayon when the `parallel`
//! feature is on and the caller asks for it.

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(parallel: bool, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if parallel && items.len() > 1 {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(_parallel: bool, items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Whether `map(true, ..)` actually runs in parallel in this build.
pub const ENABLED: bool = cfg!(feature = "parallel");
