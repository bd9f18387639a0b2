//! Dense matrix kernels. Every output element is produced by exactly one
//! task in a fixed summation order, so results do not depend on thread count.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 15;

fn rows_mut<F>(out: &mut [f64], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// `a[n,k] · b[k,m]`
pub(crate) fn gemm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    rows_mut(&mut out, m, n * k * m, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a[n,k]ᵀ · b[n,m]` → `[k,m]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    rows_mut(&mut out, m, n * k * m, |p, row| {
        for i in 0..n {
            let av = a[i * k + p];
            let b_row = &b[i * m..(i + 1) * m];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a[n,m] · b[k,m]ᵀ` → `[n,k]`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    rows_mut(&mut out, k, n * k * m, |i, row| {
        let a_row = &a[i * m..(i + 1) * m];
        for (p, o) in row.iter_mut().enumerate() {
            let b_row = &b[p * m..(p + 1) * m];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    });
    out
}
