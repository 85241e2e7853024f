//! Exact scaled dot-product attention, dense and tiled.
//!
//! The tiled path streams over key/value tiles with an online softmax
//! (running row max and running normalizer), so the `T×T` score matrix is
//! never formed. Only a `tile×tile` scratch block exists at any time. The
//! backward pass recomputes score tiles from the saved per-row
//! log-sum-exp instead of storing probabilities.

use super::{Real, Tape, Tensor};
use crate::error::{Error, Result};

/// Shape bookkeeping shared by both attention paths: `[.., T, dh]` inputs
/// where all leading extents are flattened into one batch-head axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttnDims {
    pub groups: usize,
    pub tq: usize,
    pub tk: usize,
    pub dh: usize,
}

pub(crate) fn attn_dims(q: &[usize], k: &[usize], v: &[usize]) -> Result<AttnDims> {
    if q.len() < 2 || k.len() != q.len() || v.len() != q.len() {
        return Err(Error::shape("attention", q, k));
    }
    let r = q.len();
    if q[..r - 2] != k[..r - 2] || k[..r - 1] != v[..r - 1] || q[r - 1] != k[r - 1] {
        return Err(Error::shape("attention", q, k));
    }
    if v[r - 1] != q[r - 1] {
        return Err(Error::shape("attention", q, v));
    }
    Ok(AttnDims {
        groups: q[..r - 2].iter().product(),
        tq: q[r - 2],
        tk: k[r - 2],
        dh: q[r - 1],
    })
}

/// Forward pass of tiled attention for every group.
///
/// `kv_order`, when given, is a permutation of key/value tile indices and
/// sets the order in which tiles are streamed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn tiled_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: AttnDims,
    tile: usize,
    kv_order: Option<&[usize]>,
    out: &mut [T],
    lse: &mut [T],
) {
    let AttnDims { groups, tq, tk, dh } = d;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let n_kv_tiles = tk.div_ceil(tile);
    let default_order: Vec<usize> = (0..n_kv_tiles).collect();
    let order = kv_order.unwrap_or(&default_order);

    let mut s = vec![T::zero(); tile * tile];
    let mut row_max = vec![T::zero(); tile];
    let mut row_sum = vec![T::zero(); tile];
    let mut acc = vec![T::zero(); tile * dh];

    for g in 0..groups {
        let qg = &q[g * tq * dh..(g + 1) * tq * dh];
        let kg = &k[g * tk * dh..(g + 1) * tk * dh];
        let vg = &v[g * tk * dh..(g + 1) * tk * dh];
        let og = &mut out[g * tq * dh..(g + 1) * tq * dh];
        let lg = &mut lse[g * tq..(g + 1) * tq];

        for i0 in (0..tq).step_by(tile) {
            let bq = tile.min(tq - i0);
            let q_tile = &qg[i0 * dh..(i0 + bq) * dh];
            row_max[..bq].fill(T::neg_infinity());
            row_sum[..bq].fill(T::zero());
            acc[..bq * dh].fill(T::zero());

            for &j in order {
                let j0 = j * tile;
                let bk = tile.min(tk - j0);
                let k_tile = &kg[j0 * dh..(j0 + bk) * dh];
                let v_tile = &vg[j0 * dh..(j0 + bk) * dh];
                let st = &mut s[..bq * bk];
                T::gemm(bq, dh, bk, q_tile, false, k_tile, true, st, false);

                for r in 0..bq {
                    let row = &mut st[r * bk..(r + 1) * bk];
                    let mut tile_max = T::neg_infinity();
                    for x in row.iter_mut() {
                        *x *= scale;
                        tile_max = tile_max.max(*x);
                    }
                    let new_max = row_max[r].max(tile_max);
                    let correction = if row_max[r] == T::neg_infinity() {
                        T::zero()
                    } else {
                        (row_max[r] - new_max).exp()
                    };
                    let mut sum = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - new_max).exp();
                        sum += *x;
                    }
                    row_sum[r] = row_sum[r] * correction + sum;
                    row_max[r] = new_max;
                    acc[r * dh..(r + 1) * dh].iter_mut().for_each(|a| *a *= correction);
                }
                T::gemm(bq, bk, dh, st, false, v_tile, false, &mut acc[..bq * dh], true);
            }

            for r in 0..bq {
                let inv = T::one() / row_sum[r];
                let dst = &mut og[(i0 + r) * dh..(i0 + r + 1) * dh];
                dst.iter_mut()
                    .zip(&acc[r * dh..(r + 1) * dh])
                    .for_each(|(o, &a)| *o = a * inv);
                lg[i0 + r] = row_max[r] + row_sum[r].ln();
            }
        }
    }
}

/// Backward pass of tiled attention; gradients are accumulated.
#[allow(clippy::too_many_arguments)]
pub(crate) fn tiled_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    out: &[T],
    lse: &[T],
    dout: &[T],
    d: AttnDims,
    tile: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let AttnDims { groups, tq, tk, dh } = d;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut p = vec![T::zero(); tile * tile];
    let mut dp = vec![T::zero(); tile * tile];
    let mut delta = vec![T::zero(); tq];

    for g in 0..groups {
        let qo = g * tq * dh;
        let ko = g * tk * dh;
        let qg = &q[qo..qo + tq * dh];
        let kg = &k[ko..ko + tk * dh];
        let vg = &v[ko..ko + tk * dh];
        let og = &out[qo..qo + tq * dh];
        let dog = &dout[qo..qo + tq * dh];
        let lg = &lse[g * tq..(g + 1) * tq];
        for (r, dlt) in delta.iter_mut().enumerate() {
            *dlt = og[r * dh..(r + 1) * dh]
                .iter()
                .zip(&dog[r * dh..(r + 1) * dh])
                .map(|(&a, &b)| a * b)
                .sum();
        }

        for i0 in (0..tq).step_by(tile) {
            let bq = tile.min(tq - i0);
            let q_tile = &qg[i0 * dh..(i0 + bq) * dh];
            let do_tile = &dog[i0 * dh..(i0 + bq) * dh];
            for j0 in (0..tk).step_by(tile) {
                let bk = tile.min(tk - j0);
                let k_tile = &kg[j0 * dh..(j0 + bk) * dh];
                let v_tile = &vg[j0 * dh..(j0 + bk) * dh];
                let pt = &mut p[..bq * bk];
                T::gemm(bq, dh, bk, q_tile, false, k_tile, true, pt, false);
                for r in 0..bq {
                    let l = lg[i0 + r];
                    pt[r * bk..(r + 1) * bk]
                        .iter_mut()
                        .for_each(|x| *x = (*x * scale - l).exp());
                }
                T::gemm(
                    bk,
                    bq,
                    dh,
                    pt,
                    true,
                    do_tile,
                    false,
                    &mut dv[ko + j0 * dh..ko + (j0 + bk) * dh],
                    true,
                );
                let dpt = &mut dp[..bq * bk];
                T::gemm(bq, dh, bk, do_tile, false, v_tile, true, dpt, false);
                for r in 0..bq {
                    let dl = delta[i0 + r];
                    for c in 0..bk {
                        let idx = r * bk + c;
                        dpt[idx] = pt[idx] * (dpt[idx] - dl) * scale;
                    }
                }
                T::gemm(
                    bq,
                    bk,
                    dh,
                    dpt,
                    false,
                    k_tile,
                    false,
                    &mut dq[qo + i0 * dh..qo + (i0 + bq) * dh],
                    true,
                );
                T::gemm(
                    bk,
                    bq,
                    dh,
                    dpt,
                    true,
                    q_tile,
                    false,
                    &mut dk[ko + j0 * dh..ko + (j0 + bk) * dh],
                    true,
                );
            }
        }
    }
}

/// `softmax(QKᵀ/√dh)·V` with the full score matrix materialized.
pub fn attention_naive<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (q, k, v) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = tape.attention_naive(q, k, v)?;
    Ok(tape.value(out).clone())
}

/// Tiled exact attention with an online softmax.
pub fn attention_tiled<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, tile: usize) -> Result<Tensor<T>> {
    attention_tiled_ordered(q, k, v, tile, None)
}

/// Tiled attention streaming key/value tiles in an explicit order.
pub fn attention_tiled_ordered<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    tile: usize,
    kv_order: Option<&[usize]>,
) -> Result<Tensor<T>> {
    if tile == 0 {
        return Err(Error::InvalidArgument("attention tile must be >= 1".into()));
    }
    let d = attn_dims(q.shape(), k.shape(), v.shape())?;
    if let Some(order) = kv_order {
        let n = d.tk.div_ceil(tile);
        let mut seen = vec![false; n];
        if order.len() != n || !order.iter().all(|&j| j < n && !std::mem::replace(&mut seen[j], true)) {
            return Err(Error::InvalidArgument(format!(
                "kv tile order must be a permutation of 0..{n}"
            )));
        }
    }
    let mut out = vec![T::zero(); q.numel()];
    let mut lse = vec![T::zero(); d.groups * d.tq];
    tiled_forward(q.data(), k.data(), v.data(), d, tile, kv_order, &mut out, &mut lse);
    Tensor::from_vec(q.shape(), out)
}
