//! Order-preserving data parallelism with a sequential fallback.
//!
//! All parallel loops in this crate map independent items and collect
//! results in input order; reductions happen sequentially afterwards. That
//! keeps every floating-point result bit-identical whether the `parallel`
//! feature is on or off and regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Apply `f` to each index in `0..n` and write the result into the
/// corresponding slot of `out`. Slots are disjoint, so the parallel and
/// sequential versions produce identical buffers.
#[cfg(feature = "parallel")]
pub fn par_fill<U, F>(out: &mut [U], f: F)
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    out.par_iter_mut().enumerate().for_each(|(i, slot)| *slot = f(i));
}

#[cfg(not(feature = "parallel"))]
pub fn par_fill<U, F>(out: &mut [U], f: F)
where
    F: Fn(usize) -> U,
{
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = f(i);
    }
}

/// Process disjoint row chunks of `data` in parallel. `chunk` rows of
/// `width` elements each go to `f` along with the first row index of the
/// chunk.
#[cfg(feature = "parallel")]
pub fn par_row_chunks<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(width > 0 && data.len() % width == 0);
    data.par_chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
pub fn par_row_chunks<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    debug_assert!(width > 0 && data.len() % width == 0);
    for (i, row) in data.chunks_mut(width).enumerate() {
        f(i, row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order() {
        let xs: Vec<usize> = (0..1000).collect();
        let ys = par_map(xs, |x| x * 2);
        assert_eq!(ys, (0..1000).map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn par_fill_writes_every_slot() {
        let mut out = vec![0usize; 257];
        par_fill(&mut out, |i| i + 1);
        assert!(out.iter().enumerate().all(|(i, &v)| v == i + 1));
    }

    #[test]
    fn par_row_chunks_touches_disjoint_rows() {
        let mut data = vec![0.0; 12];
        par_row_chunks(&mut data, 4, |i, row| {
            for v in row.iter_mut() {
                *v = i as f64;
            }
        });
        assert_eq!(data[0], 0.0);
        assert_eq!(data[4], 1.0);
        assert_eq!(data[11], 2.0);
    }
}
