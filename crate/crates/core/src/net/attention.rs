//! Scaled dot-product attention without projections.

use crate::error::{Error, Result};
use crate::tensor::{gemm_t, Real};

fn softmax_rows<T: Real>(s: &mut [T], cols: usize) {
    for row in s.chunks_mut(cols) {
        let m = row.iter().copied().fold(row[0], T::max);
        let mut z = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
}

/// `softmax(Q·Kᵀ/√d)·V` for row-major `Q: nq×d`, `K, V: nk×d`.
pub fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    nq: usize,
    nk: usize,
    d: usize,
) -> Result<Vec<T>> {
    if q.len() != nq * d || k.len() != nk * d || v.len() != nk * d || nk == 0 || d == 0 {
        return Err(Error::Shape(format!(
            "attention expects Q {nq}x{d}, K and V {nk}x{d}; got {}, {}, {} values",
            q.len(),
            k.len(),
            v.len()
        )));
    }
    let scale = T::ONE / T::from_f64(d as f64).sqrt();
    let mut s = vec![T::ZERO; nq * nk];
    gemm_t(false, true, nq, d, nk, scale, q, k, T::ZERO, &mut s);
    softmax_rows(&mut s, nk);
    let mut out = vec![T::ZERO; nq * d];
    gemm_t(false, false, nq, nk, d, T::ONE, &s, v, T::ZERO, &mut out);
    Ok(out)
}

/// Attention on channel-major features (`d×n`, the layout of a `Tensor`
/// plane stack). Keys and values share `kv`. Returns `(out d×nq, probs nq×nk)`.
pub(crate) fn attend<T: Real>(
    q: &[T],
    kv: &[T],
    d: usize,
    nq: usize,
    nk: usize,
) -> (Vec<T>, Vec<T>) {
    let scale = T::ONE / T::from_f64(d as f64).sqrt();
    let mut p = vec![T::ZERO; nq * nk];
    gemm_t(true, false, nq, d, nk, scale, q, kv, T::ZERO, &mut p);
    softmax_rows(&mut p, nk);
    let mut out = vec![T::ZERO; d * nq];
    gemm_t(false, true, d, nk, nq, T::ONE, kv, &p, T::ZERO, &mut out);
    (out, p)
}

/// Backward of [`attend`]: adds into `dq` (d×nq) and `dkv` (d×nk).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_backward<T: Real>(
    q: &[T],
    kv: &[T],
    p: &[T],
    g: &[T],
    d: usize,
    nq: usize,
    nk: usize,
    dq: &mut [T],
    dkv: &mut [T],
) {
    let scale = T::ONE / T::from_f64(d as f64).sqrt();
    // value path
    gemm_t(false, false, d, nq, nk, T::ONE, g, p, T::ONE, dkv);
    let mut ds = vec![T::ZERO; nq * nk];
    gemm_t(true, false, nq, d, nk, T::ONE, g, kv, T::ZERO, &mut ds);
    for (dp_row, p_row) in ds.chunks_mut(nk).zip(p.chunks(nk)) {
        let dot: T = dp_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum();
        for (v, &pv) in dp_row.iter_mut().zip(p_row) {
            *v = pv * (*v - dot) * scale;
        }
    }
    // query and key paths
    gemm_t(false, true, d, nk, nq, T::ONE, kv, &ds, T::ONE, dq);
    gemm_t(false, false, d, nq, nk, T::ONE, q, &ds, T::ONE, dkv);
}
