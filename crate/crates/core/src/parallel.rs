//! Reductions whose result does not depend on the rayon thread count.
//!
//! Work is split into fixed-size chunks; each chunk is summed sequentially and
//! the partial sums are combined in chunk order. The same inputs therefore give
//! bit-identical results on one thread or many.

use rayon::prelude::*;

pub const CHUNK: usize = 4096;

/// Sum `term(i)` for `i in 0..len` in a thread-count independent order.
pub fn det_sum<F>(len: usize, term: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = len.div_ceil(CHUNK);
    let partials: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(len);
            let mut acc = 0.0;
            for i in start..end {
                acc += term(i);
            }
            acc
        })
        .collect();
    partials.into_iter().sum()
}

/// Several sums at once, same ordering guarantees as [`det_sum`].
pub fn det_sum_n<const N: usize, F>(len: usize, term: F) -> [f64; N]
where
    F: Fn(usize) -> [f64; N] + Sync,
{
    let chunks = len.div_ceil(CHUNK);
    let partials: Vec<[f64; N]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(len);
            let mut acc = [0.0; N];
            for i in start..end {
                let t = term(i);
                for k in 0..N {
                    acc[k] += t[k];
                }
            }
            acc
        })
        .collect();
    let mut total = [0.0; N];
    for p in partials {
        for k in 0..N {
            total[k] += p[k];
        }
    }
    total
}
