//! Matrix-multiply kernels over row-major slices.
//!
//! Every kernel computes one output row at a time with a fixed reduction
//! order, so the rayon path (feature `parallel`) and the sequential path
//! produce bitwise-identical results.

use super::Float;

/// Below this many multiply-adds the parallel path is not worth the fork.
pub const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `c[m,n] = a[m,k] * b[k,n]`
    NN,
    /// `c[m,n] = a[m,k] * b[n,k]^T`
    NT,
    /// `c[m,n] += a[k,m]^T * b[k,n]`
    TN,
}

#[inline]
fn row_nn<F: Float>(i: usize, k: usize, n: usize, a: &[F], b: &[F], row: &mut [F]) {
    row.fill(F::zero());
    let a_row = &a[i * k..(i + 1) * k];
    for (p, &av) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (c, &bv) in row.iter_mut().zip(b_row) {
            *c = *c + av * bv;
        }
    }
}

#[inline]
fn row_nt<F: Float>(i: usize, k: usize, n: usize, a: &[F], b: &[F], row: &mut [F]) {
    let a_row = &a[i * k..(i + 1) * k];
    for (j, c) in row.iter_mut().enumerate().take(n) {
        let b_row = &b[j * k..(j + 1) * k];
        let mut acc = F::zero();
        for (&av, &bv) in a_row.iter().zip(b_row) {
            acc = acc + av * bv;
        }
        *c = acc;
    }
}

#[inline]
fn row_tn<F: Float>(i: usize, k: usize, m: usize, n: usize, a: &[F], b: &[F], row: &mut [F]) {
    for p in 0..k {
        let av = a[p * m + i];
        let b_row = &b[p * n..(p + 1) * n];
        for (c, &bv) in row.iter_mut().zip(b_row) {
            *c = *c + av * bv;
        }
    }
}

fn run_row<F: Float>(
    layout: Layout,
    i: usize,
    (m, k, n): (usize, usize, usize),
    a: &[F],
    b: &[F],
    row: &mut [F],
) {
    match layout {
        Layout::NN => row_nn(i, k, n, a, b, row),
        Layout::NT => row_nt(i, k, n, a, b, row),
        Layout::TN => row_tn(i, k, m, n, a, b, row),
    }
}

/// Sequential kernel.
pub fn gemm_seq<F: Float>(layout: Layout, dims: (usize, usize, usize), a: &[F], b: &[F], c: &mut [F]) {
    let (m, k, n) = dims;
    debug_assert!(m * k == a.len() && k * n == b.len() && m * n == c.len());
    for (i, row) in c.chunks_mut(n).enumerate() {
        run_row(layout, i, dims, a, b, row);
    }
}

/// Row-parallel kernel on the rayon pool.
#[cfg(feature = "parallel")]
pub fn gemm_par<F: Float>(layout: Layout, dims: (usize, usize, usize), a: &[F], b: &[F], c: &mut [F]) {
    use rayon::prelude::*;
    let n = dims.2;
    c.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| run_row(layout, i, dims, a, b, row));
}

/// Dispatches to the parallel kernel when the feature is enabled and the
/// problem is large enough; otherwise runs sequentially.
pub fn gemm<F: Float>(layout: Layout, dims: (usize, usize, usize), a: &[F], b: &[F], c: &mut [F]) {
    #[cfg(feature = "parallel")]
    {
        let (m, k, n) = dims;
        if m * k * n >= PAR_THRESHOLD && m > 1 {
            return gemm_par(layout, dims, a, b, c);
        }
    }
    gemm_seq(layout, dims, a, b, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn hand_computed_product() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        let mut c = [0.0; 2];
        gemm_seq(Layout::NN, (2, 2, 1), &a, &b, &mut c);
        assert_eq!(c, [17.0, 39.0]);
    }

    #[test]
    fn layouts_agree_with_triple_loop() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_seq(Layout::NN, (m, k, n), &a, &b, &mut c);
        assert_eq!(c, want);

        let bt = transpose(k, n, &b);
        gemm_seq(Layout::NT, (m, k, n), &a, &bt, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(m, k, &a);
        let mut c = vec![0.0; m * n];
        gemm_seq(Layout::TN, (m, k, n), &at, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_is_bitwise_sequential() {
        let (m, k, n) = (64, 48, 40);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.013).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.029).cos()).collect();
        for layout in [Layout::NN, Layout::NT, Layout::TN] {
            let mut s = vec![0.0; m * n];
            let mut p = vec![0.0; m * n];
            gemm_seq(layout, (m, k, n), &a, &b, &mut s);
            gemm_par(layout, (m, k, n), &a, &b, &mut p);
            assert_eq!(s, p, "{layout:?}");
        }
    }
}
