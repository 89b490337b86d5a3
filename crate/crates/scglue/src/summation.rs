//! Schedule-independent reductions.
//!
//! Quadratures, norms and CG inner products feed acceptance-grade numbers, so
//! every reduction here is deterministic for any thread count: the index
//! space is cut into fixed-size blocks, each block is summed sequentially
//! with Neumaier compensation, and the ordered block sums are combined
//! pairwise. Thread scheduling can only change *who* computes a block, never
//! the arithmetic order.

use rayon::prelude::*;

const BLOCK: usize = 4096;

/// Compensated (Neumaier) sequential sum.
pub fn neumaier<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Pairwise combination of a slice, in index order.
pub fn pairwise(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise(&values[..mid]) + pairwise(&values[mid..])
        }
    }
}

/// Deterministic sum of `f(i)` over `0..n`, parallel over fixed blocks.
pub fn det_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let blocks: Vec<f64> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let lo = b * BLOCK;
            let hi = (lo + BLOCK).min(n);
            neumaier((lo..hi).map(&f))
        })
        .collect();
    pairwise(&blocks)
}

/// Deterministic dot product of two equal-length slices.
pub fn det_dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    det_sum(a.len(), |i| a[i] * b[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det_sum_matches_reference() {
        let n = 100_000;
        let exact: f64 = neumaier((0..n).map(|i| 1.0 / (1.0 + i as f64)));
        let d = det_sum(n, |i| 1.0 / (1.0 + i as f64));
        assert!((d - exact).abs() < 1e-10);
    }

    #[test]
    fn det_sum_thread_count_invariant() {
        let n = 50_000;
        let f = |i: usize| ((i as f64) * 0.37).sin() / (1.0 + i as f64).sqrt();
        let pool1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let s1 = pool1.install(|| det_sum(n, f));
        let s4 = pool4.install(|| det_sum(n, f));
        assert_eq!(s1.to_bits(), s4.to_bits());
    }

    #[test]
    fn neumaier_cancellation() {
        let v = vec![1e16, 1.0, -1e16];
        assert_eq!(neumaier(v), 1.0);
    }
}
