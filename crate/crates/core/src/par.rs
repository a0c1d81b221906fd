//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these run on the rayon pool; without
//! it they are plain iterator loops. Reductions always sum fixed-size chunks
//! in index order, so results are bit-identical whatever the thread count.

/// Chunk size used by every reduction in the crate.
pub const REDUCE_CHUNK: usize = 256;

/// `out[i] = f(i)` for every `i`.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
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

/// Calls `f(row_index, row)` on each `width`-sized row of `data`.
pub fn for_each_row_mut<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// Like [`for_each_row_mut`], with two row-aligned output buffers.
pub fn for_each_row_mut2<F>(a: &mut [f64], wa: usize, b: &mut [f64], wb: usize, f: F)
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        a.par_chunks_mut(wa)
            .zip(b.par_chunks_mut(wb))
            .enumerate()
            .for_each(|(i, (ra, rb))| f(i, ra, rb));
    }
    #[cfg(not(feature = "parallel"))]
    {
        a.chunks_mut(wa)
            .zip(b.chunks_mut(wb))
            .enumerate()
            .for_each(|(i, (ra, rb))| f(i, ra, rb));
    }
}

/// Deterministic vector-valued sum: `Σ_i f(i, acc)` where `f` adds its term into `acc`.
///
/// Partial sums are formed over fixed chunks of [`REDUCE_CHUNK`] indices and
/// then combined in chunk order.
pub fn sum_vec<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = map_indexed(chunks, |c| {
        let mut acc = vec![0.0; width];
        let lo = c * REDUCE_CHUNK;
        let hi = (lo + REDUCE_CHUNK).min(n);
        for i in lo..hi {
            f(i, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Deterministic scalar sum of `f(i)` over `0..n`.
pub fn sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    map_indexed(chunks, |c| {
        let lo = c * REDUCE_CHUNK;
        let hi = (lo + REDUCE_CHUNK).min(n);
        (lo..hi).map(&f).sum::<f64>()
    })
    .into_iter()
    .sum()
}

/// Calls `f(first_row, state, block_a, block_b)` on blocks of `block_rows`
/// row-aligned rows, with `state = init()` created once per block.
pub fn for_each_block_mut2<S, I, F>(
    a: &mut [f64],
    wa: usize,
    b: &mut [f64],
    wb: usize,
    block_rows: usize,
    init: I,
    f: F,
) where
    I: Fn() -> S + Sync + Send,
    F: Fn(usize, &mut S, &mut [f64], &mut [f64]) + Sync + Send,
{
    let run = |(c, (ra, rb)): (usize, (&mut [f64], &mut [f64]))| {
        let mut state = init();
        f(c * block_rows, &mut state, ra, rb);
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        a.par_chunks_mut(wa * block_rows)
            .zip(b.par_chunks_mut(wb * block_rows))
            .enumerate()
            .for_each(run);
    }
    #[cfg(not(feature = "parallel"))]
    {
        a.chunks_mut(wa * block_rows)
            .zip(b.chunks_mut(wb * block_rows))
            .enumerate()
            .for_each(run);
    }
}

/// Single-buffer form of [`for_each_block_mut2`].
pub fn for_each_block_mut<S, I, F>(a: &mut [f64], wa: usize, block_rows: usize, init: I, f: F)
where
    I: Fn() -> S + Sync + Send,
    F: Fn(usize, &mut S, &mut [f64]) + Sync + Send,
{
    let run = |(c, ra): (usize, &mut [f64])| {
        let mut state = init();
        f(c * block_rows, &mut state, ra);
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        a.par_chunks_mut(wa * block_rows).enumerate().for_each(run);
    }
    #[cfg(not(feature = "parallel"))]
    {
        a.chunks_mut(wa * block_rows).enumerate().for_each(run);
    }
}

/// Deterministic vector sum like [`sum_vec`], with per-chunk scratch state.
pub fn sum_vec_with<S, I, F>(n: usize, width: usize, init: I, f: F) -> Vec<f64>
where
    I: Fn() -> S + Sync + Send,
    F: Fn(usize, &mut S, &mut [f64]) + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = map_indexed(chunks, |c| {
        let mut acc = vec![0.0; width];
        let mut state = init();
        let lo = c * REDUCE_CHUNK;
        let hi = (lo + REDUCE_CHUNK).min(n);
        for i in lo..hi {
            f(i, &mut state, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_matches_plain_sum_structure() {
        let n = 1000;
        let s = sum(n, |i| i as f64);
        assert_eq!(s, (n * (n - 1) / 2) as f64);
        let v = sum_vec(n, 2, |i, acc| {
            acc[0] += 1.0;
            acc[1] += i as f64;
        });
        assert_eq!(v, vec![n as f64, s]);
    }

    #[test]
    fn empty_inputs() {
        assert_eq!(sum(0, |_| 1.0), 0.0);
        assert_eq!(sum_vec(0, 3, |_, _| {}), vec![0.0; 3]);
    }
}
