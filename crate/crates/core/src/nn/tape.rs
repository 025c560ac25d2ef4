//! A small reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Every op computes its value eagerly; `backward` walks the tape once in
//! reverse. Frozen parameters enter as constants, so their gradients are
//! exactly zero by construction.

use std::sync::Arc;

use crate::correspondence::TokenMatchMap;
use crate::error::{RadError, Result};
use crate::nn::attention::{matched_attention_backward, matched_attention_forward, AttentionCache};
use crate::nn::params::{Gradients, ParamStore};
use crate::nn::tensor::{gemm, Tensor};

/// Index of a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Marks a zero entry in a gather index.
pub const GATHER_ZERO: usize = usize::MAX;

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Const,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Softplus(Var),
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    ConcatCols(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        ctx: Vec<(Var, Var)>,
        map: Arc<TokenMatchMap>,
        heads: usize,
        cache: Option<AttentionCache>,
    },
    SiLog {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
        lambda: f64,
    },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    grad_enabled: bool,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scale-invariant log loss over masked entries, with its gradient w.r.t. `pred`.
pub fn silog_with_grad(pred: &[f64], target: &[f64], mask: &[bool], lambda: f64) -> Result<(f64, Vec<f64>)> {
    let idx: Vec<usize> = (0..pred.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(RadError::UndefinedLoss);
    }
    let n = idx.len() as f64;
    let d: Vec<f64> = idx.iter().map(|&i| pred[i].ln() - target[i].ln()).collect();
    let mean = d.iter().sum::<f64>() / n;
    let mean_sq = d.iter().map(|x| x * x).sum::<f64>() / n;
    let loss = mean_sq - lambda * mean * mean;
    let mut grad = vec![0.0; pred.len()];
    for (&i, &dk) in idx.iter().zip(&d) {
        grad[i] = (2.0 * dk / n - 2.0 * lambda * mean / n) / pred[i];
    }
    Ok((loss, grad))
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore, grad_enabled: bool) -> Self {
        Self {
            store,
            grad_enabled,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: false,
            op: Op::Const,
        });
        Var(self.nodes.len() - 1)
    }

    /// The parameter as a tape leaf, created once per tape.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let value = self.store.entry(id).value.clone();
        let needs_grad = self.grad_enabled && !self.store.is_frozen(id);
        self.nodes.push(Node {
            value,
            needs_grad,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `x + bias` with a `1 × cols` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let mut value = self.value(x).clone();
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, value.cols), "bias shape");
        for r in 0..value.rows {
            for (o, bb) in value.row_mut(r).iter_mut().zip(&b.data) {
                *o += bb;
            }
        }
        self.push(value, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, x) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((o, gg), bb) in value.row_mut(r).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gg + bb;
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v = gelu(*v));
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v = softplus(*v));
        self.push(value, Op::Softplus(x), &[x])
    }

    /// `out.data[i] = x.data[index[i]]`, or 0 for [`GATHER_ZERO`].
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let src = &self.value(x).data;
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i] })
            .collect();
        self.push(Tensor::from_vec(rows, cols, data), Op::Gather { x, index }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn matched_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        ctx: &[(Var, Var)],
        map: Arc<TokenMatchMap>,
        heads: usize,
    ) -> Result<Var> {
        let ctx_vals: Vec<(&Tensor, &Tensor)> = ctx.iter().map(|&(a, b)| (self.value(a), self.value(b))).collect();
        let (value, cache) =
            matched_attention_forward(self.value(q), self.value(k), self.value(v), &ctx_vals, &map, heads)?;
        let mut parents = vec![q, k, v];
        parents.extend(ctx.iter().flat_map(|&(a, b)| [a, b]));
        let needs = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                ctx: ctx.to_vec(),
                map,
                heads,
                cache: needs.then_some(cache),
            },
            &parents,
        ))
    }

    /// Scalar scale-invariant log loss over the entries where `mask` holds.
    pub fn silog(&mut self, pred: Var, target: Vec<f64>, mask: Vec<bool>, lambda: f64) -> Result<Var> {
        let (loss, _) = silog_with_grad(&self.value(pred).data, &target, &mask, lambda)?;
        Ok(self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::SiLog {
                pred,
                target,
                mask,
                lambda,
            },
            &[pred],
        ))
    }

    /// Gradients of the scalar `loss` w.r.t. every non-frozen parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut out = Gradients::empty(self.store.len());
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let lv = self.value(loss);
        assert_eq!(lv.shape(), (1, 1), "backward needs a scalar");
        if !self.nodes[loss.0].needs_grad {
            return out;
        }
        grads[loss.0] = Some(Tensor::full(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.grads[*id] = Some(g),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let bv = self.value(*b);
                        let mut ga = Tensor::zeros(g.rows, bv.rows);
                        gemm(&g, false, bv, true, &mut ga, 0.0);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let av = self.value(*a);
                        let mut gb = Tensor::zeros(av.cols, g.cols);
                        gemm(av, true, &g, false, &mut gb, 0.0);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.needs(*bias) {
                        let mut gb = Tensor::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        self.acc(&mut grads, *bias, gb);
                    }
                    self.acc(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, g.clone());
                    }
                    self.acc(&mut grads, *b, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = g.shape();
                    if self.needs(*gain) || self.needs(*bias) {
                        let mut gg = Tensor::zeros(1, cols);
                        let mut gb = Tensor::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gg.data[c] += g.at(r, c) * xhat.at(r, c);
                                gb.data[c] += g.at(r, c);
                            }
                        }
                        self.acc(&mut grads, *gain, gg);
                        self.acc(&mut grads, *bias, gb);
                    }
                    if self.needs(*x) {
                        let gain_v = &self.value(*gain).data;
                        let mut gx = Tensor::zeros(rows, cols);
                        let n = cols as f64;
                        for r in 0..rows {
                            let dxhat: Vec<f64> = g.row(r).iter().zip(gain_v).map(|(a, b)| a * b).collect();
                            let s1: f64 = dxhat.iter().sum();
                            let s2: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                gx.data[r * cols + c] =
                                    inv_std[r] / n * (n * dxhat[c] - s1 - xhat.at(r, c) * s2);
                            }
                        }
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (o, &xx) in gx.data.iter_mut().zip(&xv.data) {
                        *o *= gelu_grad(xx);
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Softplus(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (o, &xx) in gx.data.iter_mut().zip(&xv.data) {
                        *o *= sigmoid(xx);
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Gather { x, index } => {
                    if self.needs(*x) {
                        let xv = self.value(*x);
                        let mut gx = Tensor::zeros(xv.rows, xv.cols);
                        for (&src, &gv) in index.iter().zip(&g.data) {
                            if src != GATHER_ZERO {
                                gx.data[src] += gv;
                            }
                        }
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        if self.needs(p) {
                            let mut gp = Tensor::zeros(g.rows, cols);
                            for r in 0..g.rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                            }
                            self.acc(&mut grads, p, gp);
                        }
                        off += cols;
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    ctx,
                    map,
                    heads,
                    cache,
                } => {
                    let cache = cache.as_ref().expect("attention cache kept when gradients flow");
                    let ctx_vals: Vec<(&Tensor, &Tensor)> =
                        ctx.iter().map(|&(a, b)| (self.value(a), self.value(b))).collect();
                    let ag = matched_attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        &ctx_vals,
                        map,
                        *heads,
                        cache,
                        &g,
                    );
                    self.acc(&mut grads, *q, ag.q);
                    self.acc(&mut grads, *k, ag.k);
                    self.acc(&mut grads, *v, ag.v);
                    for (&(kc, vc), (gk, gv)) in ctx.iter().zip(ag.ctx) {
                        self.acc(&mut grads, kc, gk);
                        self.acc(&mut grads, vc, gv);
                    }
                }
                Op::SiLog {
                    pred,
                    target,
                    mask,
                    lambda,
                } => {
                    let pv = self.value(*pred);
                    let (_, dl) = silog_with_grad(&pv.data, target, mask, *lambda).expect("checked in forward");
                    let s = g.data[0];
                    let gp = Tensor::from_vec(pv.rows, pv.cols, dl.into_iter().map(|x| x * s).collect());
                    self.acc(&mut grads, *pred, gp);
                }
            }
        }
        out
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}
