//! Matched cross-attention kernels.
//!
//! For input token `j`, each head attends over the concatenation of all input
//! keys/values and the context keys/values listed in `matching_tokens(j)`,
//! with one softmax over the joint set scaled by `1/sqrt(d_head)`. An empty
//! match set reduces to plain self-attention.

use crate::correspondence::TokenMatchMap;
use crate::error::{RadError, Result};
use crate::nn::tensor::Tensor;

/// Softmax weights kept from the forward pass for backpropagation. For each
/// head `h` and token `j`: `input[h][j*n..]` over the `n` input keys and
/// `context[h][offset[j]..offset[j+1]]` over the matched context keys.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub input: Vec<Vec<f64>>,
    pub context: Vec<Vec<f64>>,
    pub offsets: Vec<usize>,
}

fn check_shapes(q: &Tensor, k: &Tensor, v: &Tensor, ctx: &[(&Tensor, &Tensor)], map: &TokenMatchMap, heads: usize) -> Result<()> {
    let d = q.cols;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(RadError::input(format!("d_model {d} not divisible by {heads} heads")));
    }
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(RadError::input("Q, K, V shapes differ"));
    }
    if map.sets().len() != q.rows {
        return Err(RadError::input(format!(
            "match map covers {} tokens, input has {}",
            map.sets().len(),
            q.rows
        )));
    }
    for (j, set) in map.sets().iter().enumerate() {
        for &(c, t) in set {
            let Some((kc, _)) = ctx.get(c) else {
                return Err(RadError::input(format!("token {j} matched to missing context image {c}")));
            };
            if t >= kc.rows {
                return Err(RadError::input(format!(
                    "token {j} matched to context token {t} outside grid of {}",
                    kc.rows
                )));
            }
        }
    }
    for (kc, vc) in ctx {
        if kc.cols != d || vc.cols != d || kc.rows != vc.rows {
            return Err(RadError::input("context K/V shapes inconsistent"));
        }
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forward pass; returns the `N × d` output and the softmax cache.
pub fn matched_attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    ctx: &[(&Tensor, &Tensor)],
    map: &TokenMatchMap,
    heads: usize,
) -> Result<(Tensor, AttentionCache)> {
    check_shapes(q, k, v, ctx, map, heads)?;
    let (n, d) = q.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    for set in map.sets() {
        offsets.push(offsets.last().unwrap() + set.len());
    }
    let total_ctx = *offsets.last().unwrap();
    let mut out = Tensor::zeros(n, d);
    let mut cache = AttentionCache {
        input: Vec::with_capacity(heads),
        context: Vec::with_capacity(heads),
        offsets,
    };
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p_in = vec![0.0; n * n];
        // Input-input logits via a strided gemm over this head's columns.
        unsafe {
            matrixmultiply::dgemm(
                n,
                dh,
                n,
                scale,
                q.data.as_ptr().add(h * dh),
                d as isize,
                1,
                k.data.as_ptr().add(h * dh),
                1,
                d as isize,
                0.0,
                p_in.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let mut p_ctx = vec![0.0; total_ctx];
        for j in 0..n {
            let qj = &q.row(j)[cols.clone()];
            let (lo, hi) = (cache.offsets[j], cache.offsets[j + 1]);
            for (slot, &(c, t)) in map.matching_tokens(j).iter().enumerate() {
                p_ctx[lo + slot] = scale * dot(qj, &ctx[c].0.row(t)[cols.clone()]);
            }
            let row = &mut p_in[j * n..(j + 1) * n];
            let mx = row
                .iter()
                .chain(&p_ctx[lo..hi])
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for x in row.iter_mut().chain(p_ctx[lo..hi].iter_mut()) {
                *x = (*x - mx).exp();
                sum += *x;
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|x| *x *= inv);
            p_ctx[lo..hi].iter_mut().for_each(|x| *x *= inv);
        }
        // out_h = P_in · V_h
        unsafe {
            matrixmultiply::dgemm(
                n,
                n,
                dh,
                1.0,
                p_in.as_ptr(),
                n as isize,
                1,
                v.data.as_ptr().add(h * dh),
                d as isize,
                1,
                0.0,
                out.data.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
        }
        for j in 0..n {
            let lo = cache.offsets[j];
            for (slot, &(c, t)) in map.matching_tokens(j).iter().enumerate() {
                let p = p_ctx[lo + slot];
                let vc = &ctx[c].1.row(t)[cols.clone()];
                let o = &mut out.row_mut(j)[cols.clone()];
                for (oi, vi) in o.iter_mut().zip(vc) {
                    *oi += p * vi;
                }
            }
        }
        cache.input.push(p_in);
        cache.context.push(p_ctx);
    }
    Ok((out, cache))
}

/// Forward-only matched cross-attention.
pub fn matched_cross_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    ctx: &[(&Tensor, &Tensor)],
    map: &TokenMatchMap,
    heads: usize,
) -> Result<Tensor> {
    matched_attention_forward(q, k, v, ctx, map, heads).map(|(o, _)| o)
}

/// Gradients of the attention inputs.
pub struct AttentionGrads {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// `(dK_c, dV_c)` per context image.
    pub ctx: Vec<(Tensor, Tensor)>,
}

#[allow(clippy::too_many_arguments)]
pub fn matched_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    ctx: &[(&Tensor, &Tensor)],
    map: &TokenMatchMap,
    heads: usize,
    cache: &AttentionCache,
    dout: &Tensor,
) -> AttentionGrads {
    let (n, d) = q.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut g = AttentionGrads {
        q: Tensor::zeros(n, d),
        k: Tensor::zeros(n, d),
        v: Tensor::zeros(n, d),
        ctx: ctx
            .iter()
            .map(|(kc, vc)| (Tensor::zeros(kc.rows, d), Tensor::zeros(vc.rows, d)))
            .collect(),
    };
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let p_in = &cache.input[h];
        let p_ctx = &cache.context[h];
        // dP_in = dO_h · V_hᵀ
        let mut dp_in = vec![0.0; n * n];
        unsafe {
            matrixmultiply::dgemm(
                n,
                dh,
                n,
                1.0,
                dout.data.as_ptr().add(h * dh),
                d as isize,
                1,
                v.data.as_ptr().add(h * dh),
                1,
                d as isize,
                0.0,
                dp_in.as_mut_ptr(),
                n as isize,
                1,
            );
            // dV_h = P_inᵀ · dO_h
            matrixmultiply::dgemm(
                n,
                n,
                dh,
                1.0,
                p_in.as_ptr(),
                1,
                n as isize,
                dout.data.as_ptr().add(h * dh),
                d as isize,
                1,
                0.0,
                g.v.data.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
        }
        let mut ds_ctx = vec![0.0; p_ctx.len()];
        for j in 0..n {
            let doj = &dout.row(j)[cols.clone()];
            let lo = cache.offsets[j];
            let set = map.matching_tokens(j);
            let mut dp_c = Vec::with_capacity(set.len());
            for (slot, &(c, t)) in set.iter().enumerate() {
                let vc = &ctx[c].1.row(t)[cols.clone()];
                dp_c.push(dot(doj, vc));
                let p = p_ctx[lo + slot];
                let dvc = &mut g.ctx[c].1.row_mut(t)[cols.clone()];
                for (a, b) in dvc.iter_mut().zip(doj) {
                    *a += p * b;
                }
            }
            let row_p = &p_in[j * n..(j + 1) * n];
            let row_dp = &mut dp_in[j * n..(j + 1) * n];
            let mut inner = dot(row_p, row_dp);
            for (slot, dp) in dp_c.iter().enumerate() {
                inner += p_ctx[lo + slot] * dp;
            }
            // dS = P ⊙ (dP − ⟨P, dP⟩), folded with the logit scale.
            for (dp, &p) in row_dp.iter_mut().zip(row_p) {
                *dp = p * (*dp - inner) * scale;
            }
            for (slot, dp) in dp_c.iter().enumerate() {
                ds_ctx[lo + slot] = p_ctx[lo + slot] * (dp - inner) * scale;
            }
        }
        let ds_in = dp_in;
        unsafe {
            // dQ_h = dS_in · K_h
            matrixmultiply::dgemm(
                n,
                n,
                dh,
                1.0,
                ds_in.as_ptr(),
                n as isize,
                1,
                k.data.as_ptr().add(h * dh),
                d as isize,
                1,
                0.0,
                g.q.data.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
            // dK_h = dS_inᵀ · Q_h
            matrixmultiply::dgemm(
                n,
                n,
                dh,
                1.0,
                ds_in.as_ptr(),
                1,
                n as isize,
                q.data.as_ptr().add(h * dh),
                d as isize,
                1,
                0.0,
                g.k.data.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
        }
        for j in 0..n {
            let lo = cache.offsets[j];
            let qj: Vec<f64> = q.row(j)[cols.clone()].to_vec();
            for (slot, &(c, t)) in map.matching_tokens(j).iter().enumerate() {
                let ds = ds_ctx[lo + slot];
                if ds == 0.0 {
                    continue;
                }
                let kc = &ctx[c].0.row(t)[cols.clone()];
                let dq = &mut g.q.row_mut(j)[cols.clone()];
                for (a, b) in dq.iter_mut().zip(kc) {
                    *a += ds * b;
                }
                let dkc = &mut g.ctx[c].0.row_mut(t)[cols.clone()];
                for (a, b) in dkc.iter_mut().zip(&qj) {
                    *a += ds * b;
                }
            }
        }
    }
    g
}
