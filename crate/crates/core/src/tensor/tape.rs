//! Wengert-list reverse-mode differentiation.
//!
//! Each op evaluates eagerly, pushes its output onto the tape together with
//! whatever it needs for the adjoint, and returns a [`Var`] handle.
//! [`Tape::backward`] walks the list in reverse and accumulates gradients
//! into every leaf created with `requires_grad`.

use super::attention::{attn_dims, tiled_backward, tiled_forward, AttnDims};
use super::conv::{col2im, conv2d_out_extent, conv_transpose2d_geometry, im2col, Geometry};
use super::kernels::{gelu, gelu_grad, softmax_row, strides};
use super::params::ParamId;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug)]
pub struct BatchNormState<'a, T: Real> {
    pub running_mean: &'a mut [T],
    pub running_var: &'a mut [T],
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug)]
struct BatchPair {
    a: usize,
    b: usize,
}

enum Op<T: Real> {
    Leaf,
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    Scale {
        a: Var,
        c: T,
    },
    AddSuffix {
        a: Var,
        b: Var,
    },
    AddChannel {
        a: Var,
        b: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        pairs: Vec<BatchPair>,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: Geometry,
    },
    ConvT2d {
        x: Var,
        w: Var,
        geom: Geometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: Vec<T>,
        denom: Vec<T>,
        sqrt: bool,
    },
    Act {
        a: Var,
        kind: Activation,
    },
    Softmax {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    L1 {
        pred: Var,
        target: Var,
    },
    Reshape {
        a: Var,
    },
    TransposeLast2 {
        a: Var,
    },
    SplitHeads {
        a: Var,
        heads: usize,
    },
    MergeHeads {
        a: Var,
        heads: usize,
    },
    Patchify {
        a: Var,
        patch: usize,
    },
    Unpatchify {
        a: Var,
        patch: usize,
    },
    SliceLast {
        a: Var,
        start: usize,
    },
    AttnTiled {
        q: Var,
        k: Var,
        v: Var,
        tile: usize,
        dims: AttnDims,
        lse: Vec<T>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Ordered record of executed operations.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; gradients flow into it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.push_node(t, Op::Leaf, needs_grad, None)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records a leaf bound to a parameter store entry.
    pub fn param_leaf(&mut self, id: ParamId, t: Tensor<T>, requires_grad: bool) -> Var {
        let mut t = t;
        t.zero_grad();
        t.set_requires_grad(requires_grad);
        self.push_node(t, Op::Leaf, requires_grad, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Leaves bound to parameters, with their accumulated gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.nodes.iter().filter_map(|n| Some((n.param?, n.value.grad()?)))
    }

    fn push_node(&mut self, mut value: Tensor<T>, op: Op<T>, needs_grad: bool, param: Option<ParamId>) -> Var {
        value.set_requires_grad(needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::from_vec(shape, data)?;
        Ok(self.push_node(value, op, needs_grad, None))
    }

    // ---------------------------------------------------------------- ops

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// Elementwise op; shapes must match or one side must be a scalar.
    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (da, db) = (self.data(a), self.data(b));
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let (shape, out): (Vec<usize>, Vec<T>) = if sa == sb {
            (sa.to_vec(), da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect())
        } else if db.len() == 1 {
            (sa.to_vec(), da.iter().map(|&x| f(x, db[0])).collect())
        } else if da.len() == 1 {
            (sb.to_vec(), db.iter().map(|&y| f(da[0], y)).collect())
        } else {
            return Err(Error::shape("elementwise", sa, sb));
        };
        self.push(&shape, out, Op::Binary { a, b, kind }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Scale { a, c }, &[a])
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_suffix", sa, sb));
        }
        let db = self.data(b);
        let n = db.len();
        let out = self.data(a).iter().enumerate().map(|(i, &x)| x + db[i % n]).collect();
        let shape = sa.to_vec();
        self.push(&shape, out, Op::AddSuffix { a, b }, &[a, b])
    }

    /// Adds a per-channel bias `b[c]` to `a[n, c, ...]`.
    pub fn add_channel_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb != [sa[1]] {
            return Err(Error::shape("add_channel_bias", sa, sb));
        }
        let c = sa[1];
        let inner: usize = sa[2..].iter().product();
        let db = self.data(b);
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + db[(i / inner) % c])
            .collect();
        let shape = sa.to_vec();
        self.push(&shape, out, Op::AddChannel { a, b }, &[a, b])
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast
    /// leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (batch, pairs) = broadcast_batches(&sa[..sa.len() - 2], &sb[..sb.len() - 2])
            .ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let mut out = vec![T::zero(); pairs.len() * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for (o, p) in pairs.iter().enumerate() {
                T::gemm(
                    m,
                    k,
                    n,
                    &da[p.a * m * k..],
                    false,
                    &db[p.b * k * n..],
                    false,
                    &mut out[o * m * n..(o + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        self.push(&shape, out, Op::Matmul { a, b, pairs, m, k, n }, &[a, b])
    }

    /// `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear bias", &[dout], self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![T::zero(); rows * dout];
        T::gemm(
            rows,
            din,
            dout,
            self.data(x),
            false,
            self.data(w),
            false,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let db = self.data(b);
            out.chunks_mut(dout)
                .for_each(|row| row.iter_mut().zip(db).for_each(|(o, &bb)| *o += bb));
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(&shape, out, Op::Linear { x, w, b }, &inputs)
    }

    /// 2-D convolution, `x[n, cin, h, w]`, `weight[cout, cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (n, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let geom = Geometry {
            channels: cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: conv2d_out_extent(h, kh, stride, pad)?,
            ow: conv2d_out_extent(w, kw, stride, pad)?,
        };
        let (rows, cols) = (geom.rows(), geom.cols());
        let mut out = vec![T::zero(); n * cout * cols];
        let mut buf = vec![T::zero(); rows * cols];
        {
            let (dx, dw) = (self.data(x), self.data(weight));
            for s in 0..n {
                im2col(&dx[s * cin * h * w..(s + 1) * cin * h * w], &geom, &mut buf);
                T::gemm(
                    cout,
                    rows,
                    cols,
                    dw,
                    false,
                    &buf,
                    false,
                    &mut out[s * cout * cols..(s + 1) * cout * cols],
                    false,
                );
            }
        }
        self.push(
            &[n, cout, geom.oh, geom.ow],
            out,
            Op::Conv2d { x, w: weight, geom },
            &[x, weight],
        )
    }

    /// Transposed convolution doubling the spatial extent,
    /// `weight[cin, cout, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || sw[2] != sw[3] {
            return Err(Error::shape("conv_transpose2d", &sx, &sw));
        }
        let (n, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kk) = (sw[1], sw[2]);
        let (pad, _) = conv_transpose2d_geometry(kk, stride)?;
        let geom = Geometry {
            channels: cout,
            h: h * stride,
            w: w * stride,
            kh: kk,
            kw: kk,
            stride,
            pad,
            oh: h,
            ow: w,
        };
        let (rows, cols) = (geom.rows(), geom.cols());
        let plane = geom.h * geom.w;
        let mut out = vec![T::zero(); n * cout * plane];
        let mut buf = vec![T::zero(); rows * cols];
        {
            let (dx, dw) = (self.data(x), self.data(weight));
            for s in 0..n {
                T::gemm(
                    rows,
                    cin,
                    cols,
                    dw,
                    true,
                    &dx[s * cin * cols..(s + 1) * cin * cols],
                    false,
                    &mut buf,
                    false,
                );
                col2im(&buf, &geom, &mut out[s * cout * plane..(s + 1) * cout * plane]);
            }
        }
        self.push(
            &[n, cout, geom.h, geom.w],
            out,
            Op::ConvT2d { x, w: weight, geom },
            &[x, weight],
        )
    }

    /// Batch normalization over `(n, h, w)` per channel of `x[n, c, h, w]`.
    ///
    /// Train mode normalizes with batch statistics and updates the running
    /// statistics (unbiased variance); eval mode uses the running
    /// statistics.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: BatchNormState<'_, T>,
        mode: NormMode,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::invalid_shape(
                "batch_norm2d",
                format!("expected 4-D input, got {sx:?}"),
            ));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if n == 0 {
            return Err(Error::InvalidArgument("batch_norm2d on an empty batch".into()));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm2d params", &[c], self.shape(gamma)));
        }
        if state.running_mean.len() != c || state.running_var.len() != c {
            return Err(Error::shape("batch_norm2d state", &[c], &[state.running_mean.len()]));
        }
        let plane = h * w;
        let count = n * plane;
        let dx = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let eps = T::of(state.eps);
        let mut xhat = vec![T::zero(); dx.len()];
        let mut out = vec![T::zero(); dx.len()];
        let mut inv_std = vec![T::zero(); c];
        let train = mode == NormMode::Train;
        for ch in 0..c {
            let idx = |s: usize| (s * c + ch) * plane;
            let (mean, var) = if train {
                let mut sum = T::zero();
                for s in 0..n {
                    sum += dx[idx(s)..idx(s) + plane].iter().copied().sum::<T>();
                }
                let mean = sum / T::of(count as f64);
                let mut sq = T::zero();
                for s in 0..n {
                    for &v in &dx[idx(s)..idx(s) + plane] {
                        sq += (v - mean) * (v - mean);
                    }
                }
                let var = sq / T::of(count as f64);
                let m = T::of(state.momentum);
                let unbiased = if count > 1 { sq / T::of((count - 1) as f64) } else { var };
                state.running_mean[ch] = (T::one() - m) * state.running_mean[ch] + m * mean;
                state.running_var[ch] = (T::one() - m) * state.running_var[ch] + m * unbiased;
                (mean, var)
            } else {
                (state.running_mean[ch], state.running_var[ch])
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for s in 0..n {
                for i in idx(s)..idx(s) + plane {
                    let xh = (dx[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        self.push(
            &sx,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )
    }

    /// Layer normalization over the last extent.
    ///
    /// With `sqrt == false` the centered input is divided by `σ² + ε`
    /// itself; with `sqrt == true` by `√(σ² + ε)`. Missing `gamma`/`beta`
    /// act as one and zero.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64, sqrt: bool) -> Result<Var> {
        if eps < 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be non-negative".into()));
        }
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm params", &[d], self.shape(p)));
            }
        }
        let dx = self.data(x);
        let rows = dx.len() / d;
        let g = gamma.map(|v| self.data(v));
        let b = beta.map(|v| self.data(v));
        let mut out = vec![T::zero(); dx.len()];
        let mut means = Vec::with_capacity(rows);
        let mut denoms = Vec::with_capacity(rows);
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let row = &dx[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let denom = var + T::of(eps);
            let s = if sqrt {
                T::one() / denom.sqrt()
            } else {
                T::one() / denom
            };
            for i in 0..d {
                let mut y = (row[i] - mean) * s;
                if let Some(g) = g {
                    y *= g[i];
                }
                if let Some(b) = b {
                    y += b[i];
                }
                out[r * d + i] = y;
            }
            means.push(mean);
            denoms.push(denom);
        }
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        self.push(
            &sx,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                denom: denoms,
                sqrt,
            },
            &inputs,
        )
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let out = self
            .data(a)
            .iter()
            .map(|&x| match kind {
                Activation::Relu => x.max(T::zero()),
                Activation::Tanh => x.tanh(),
                Activation::Gelu => gelu(x),
            })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Act { a, kind }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    /// Softmax over the last extent, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap();
        let mut out = self.data(a).to_vec();
        out.chunks_mut(d).for_each(softmax_row);
        self.push(&shape, out, Op::Softmax { a }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum::<T>();
        self.push(&[1], vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a);
        let s = d.iter().copied().sum::<T>() / T::of(d.len() as f64);
        self.push(&[1], vec![s], Op::Mean { a }, &[a])
    }

    /// Mean absolute difference over all elements.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(Error::shape("l1_loss", sp, st));
        }
        let (dp, dt) = (self.data(pred), self.data(target));
        let s = dp.iter().zip(dt).map(|(&p, &t)| (p - t).abs()).sum::<T>() / T::of(dp.len() as f64);
        self.push(&[1], vec![s], Op::L1 { pred, target }, &[pred, target])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.data(a).to_vec();
        self.push(shape, out, Op::Reshape { a }, &[a])
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::invalid_shape("transpose", format!("rank {r} < 2")));
        }
        let (p, q) = (shape[r - 2], shape[r - 1]);
        let src = self.data(a);
        let mut out = vec![T::zero(); src.len()];
        transpose_blocks(src, &mut out, p, q);
        shape.swap(r - 2, r - 1);
        self.push(&shape, out, Op::TransposeLast2 { a }, &[a])
    }

    /// `[b, t, h*dh]` → `[b, h, t, dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::invalid_shape("split_heads", format!("{s:?} into {heads} heads")));
        }
        let (b, t, dh) = (s[0], s[1], s[2] / heads);
        let mut out = vec![T::zero(); b * t * s[2]];
        split_heads_into(self.data(a), &mut out, b, t, heads, dh, false);
        self.push(&[b, heads, t, dh], out, Op::SplitHeads { a, heads }, &[a])
    }

    /// `[b, h, t, dh]` → `[b, t, h*dh]`.
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid_shape("merge_heads", format!("{s:?}")));
        }
        let (b, heads, t, dh) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![T::zero(); b * t * heads * dh];
        split_heads_into(self.data(a), &mut out, b, t, heads, dh, true);
        self.push(&[b, t, heads * dh], out, Op::MergeHeads { a, heads }, &[a])
    }

    /// `[n, c, h, w]` → `[n, (h/p)(w/p), c·p²]`, features ordered `(c, dy, dx)`.
    pub fn patchify(&mut self, a: Var, patch: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || patch == 0 || !s[2].is_multiple_of(patch) || !s[3].is_multiple_of(patch) {
            return Err(Error::invalid_shape(
                "patchify",
                format!("{s:?} not divisible into {patch}x{patch} patches"),
            ));
        }
        let geo = PatchGeo::new(s[0], s[1], s[2], s[3], patch);
        let mut out = vec![T::zero(); self.value(a).numel()];
        geo.scatter(self.data(a), &mut out, false);
        self.push(&[geo.n, geo.tokens(), geo.feat()], out, Op::Patchify { a, patch }, &[a])
    }

    /// Inverse of [`Tape::patchify`] back to `[n, c, h, w]`.
    pub fn unpatchify(&mut self, a: Var, patch: usize, c: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
            return Err(Error::invalid_shape("unpatchify", format!("{h}x{w} by patch {patch}")));
        }
        let geo = PatchGeo::new(s[0], c, h, w, patch);
        if s.len() != 3 || s[1] != geo.tokens() || s[2] != geo.feat() {
            return Err(Error::shape("unpatchify", &s, &[geo.n, geo.tokens(), geo.feat()]));
        }
        let mut out = vec![T::zero(); self.value(a).numel()];
        geo.scatter(self.data(a), &mut out, true);
        self.push(&[geo.n, c, h, w], out, Op::Unpatchify { a, patch }, &[a])
    }

    /// Slice `[start, start+len)` of the last extent.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap();
        if len == 0 || start + len > d {
            return Err(Error::invalid_shape(
                "slice_last",
                format!("[{start}, {}) of {d}", start + len),
            ));
        }
        let out = self
            .data(a)
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        *shape.last_mut().unwrap() = len;
        self.push(&shape, out, Op::SliceLast { a, start }, &[a])
    }

    /// Dense attention over `[.., T, dh]`; builds the `T×T` matrix.
    pub fn attention_naive(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = attn_dims(self.shape(q), self.shape(k), self.shape(v))?;
        let kt = self.transpose_last2(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, T::of(1.0 / (d.dh as f64).sqrt()))?;
        let probs = self.softmax(scaled)?;
        self.matmul(probs, v)
    }

    /// Tiled attention with online softmax; exact, never builds `T×T`.
    pub fn attention_tiled(&mut self, q: Var, k: Var, v: Var, tile: usize) -> Result<Var> {
        if tile == 0 {
            return Err(Error::InvalidArgument("attention tile must be >= 1".into()));
        }
        let dims = attn_dims(self.shape(q), self.shape(k), self.shape(v))?;
        let mut out = vec![T::zero(); self.value(q).numel()];
        let mut lse = vec![T::zero(); dims.groups * dims.tq];
        tiled_forward(
            self.data(q),
            self.data(k),
            self.data(v),
            dims,
            tile,
            None,
            &mut out,
            &mut lse,
        );
        let shape = self.shape(q).to_vec();
        self.push(
            &shape,
            out,
            Op::AttnTiled {
                q,
                k,
                v,
                tile,
                dims,
                lse,
            },
            &[q, k, v],
        )
    }

    // ----------------------------------------------------------- backward

    /// Backpropagates from a scalar loss with upstream gradient 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.backward_with(loss, &[T::one()])
    }

    /// Backpropagates an explicit upstream gradient of `root`'s shape.
    pub fn backward_with(&mut self, root: Var, upstream: &[T]) -> Result<()> {
        if upstream.len() != self.value(root).numel() {
            return Err(Error::shape("backward upstream", self.shape(root), &[upstream.len()]));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(upstream.to_vec());
        let mut leaf_grads = Vec::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            self.node_backward(i, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn node_backward(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { a, b, kind } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let a_scalar = da.len() == 1 && db.len() != 1;
                let b_scalar = db.len() == 1 && da.len() != 1;
                let pick = |d: &[T], j: usize, scalar: bool| if scalar { d[0] } else { d[j] };
                if self.needs(*a) {
                    let ga: Vec<T> = (0..g.len())
                        .map(|j| match kind {
                            Binary::Add | Binary::Sub => g[j],
                            Binary::Mul => g[j] * pick(db, j, b_scalar),
                        })
                        .collect();
                    accumulate(grads, *a, reduce_if(ga, a_scalar));
                }
                if self.needs(*b) {
                    let gb: Vec<T> = (0..g.len())
                        .map(|j| match kind {
                            Binary::Add => g[j],
                            Binary::Sub => -g[j],
                            Binary::Mul => g[j] * pick(da, j, a_scalar),
                        })
                        .collect();
                    accumulate(grads, *b, reduce_if(gb, b_scalar));
                }
            }
            Op::Scale { a, c } => {
                accumulate(grads, *a, g.iter().map(|&x| x * *c).collect());
            }
            Op::AddSuffix { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    let n = self.value(*b).numel();
                    let mut gb = vec![T::zero(); n];
                    g.iter().enumerate().for_each(|(j, &x)| gb[j % n] += x);
                    accumulate(grads, *b, gb);
                }
            }
            Op::AddChannel { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    let sa = self.shape(*a);
                    let c = sa[1];
                    let inner: usize = sa[2..].iter().product();
                    let mut gb = vec![T::zero(); c];
                    g.iter().enumerate().for_each(|(j, &x)| gb[(j / inner) % c] += x);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Matmul { a, b, pairs, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (da, db) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); da.len()];
                    for (o, p) in pairs.iter().enumerate() {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[o * m * n..],
                            false,
                            &db[p.b * k * n..],
                            true,
                            &mut ga[p.a * m * k..(p.a + 1) * m * k],
                            true,
                        );
                    }
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); db.len()];
                    for (o, p) in pairs.iter().enumerate() {
                        T::gemm(
                            k,
                            m,
                            n,
                            &da[p.a * m * k..],
                            true,
                            &g[o * m * n..],
                            false,
                            &mut gb[p.b * k * n..(p.b + 1) * k * n],
                            true,
                        );
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (din, dout) = (sw[0], sw[1]);
                let dx = self.data(*x);
                let rows = dx.len() / din;
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); dx.len()];
                    T::gemm(rows, dout, din, g, false, self.data(*w), true, &mut gx, false);
                    accumulate(grads, *x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); din * dout];
                    T::gemm(din, rows, dout, dx, true, g, false, &mut gw, false);
                    accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![T::zero(); dout];
                        g.chunks(dout)
                            .for_each(|row| gb.iter_mut().zip(row).for_each(|(a, &x)| *a += x));
                        accumulate(grads, *b, gb);
                    }
                }
            }
            Op::Conv2d { x, w, geom } => {
                let dx = self.data(*x);
                let dw = self.data(*w);
                let n = self.shape(*x)[0];
                let cout = self.shape(*w)[0];
                let (rows, cols) = (geom.rows(), geom.cols());
                let in_sz = geom.channels * geom.h * geom.w;
                let mut buf = vec![T::zero(); rows * cols];
                let mut gw = self.needs(*w).then(|| vec![T::zero(); dw.len()]);
                let mut gx = self.needs(*x).then(|| vec![T::zero(); dx.len()]);
                for s in 0..n {
                    let gs = &g[s * cout * cols..(s + 1) * cout * cols];
                    if let Some(gw) = gw.as_mut() {
                        im2col(&dx[s * in_sz..(s + 1) * in_sz], geom, &mut buf);
                        T::gemm(cout, cols, rows, gs, false, &buf, true, gw, true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        T::gemm(rows, cout, cols, dw, true, gs, false, &mut buf, false);
                        col2im(&buf, geom, &mut gx[s * in_sz..(s + 1) * in_sz]);
                    }
                }
                if let Some(gw) = gw {
                    accumulate(grads, *w, gw);
                }
                if let Some(gx) = gx {
                    accumulate(grads, *x, gx);
                }
            }
            Op::ConvT2d { x, w, geom } => {
                let dx = self.data(*x);
                let dw = self.data(*w);
                let (n, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (rows, cols) = (geom.rows(), geom.cols());
                let plane = geom.channels * geom.h * geom.w;
                let mut buf = vec![T::zero(); rows * cols];
                let mut gw = self.needs(*w).then(|| vec![T::zero(); dw.len()]);
                let mut gx = self.needs(*x).then(|| vec![T::zero(); dx.len()]);
                for s in 0..n {
                    im2col(&g[s * plane..(s + 1) * plane], geom, &mut buf);
                    if let Some(gx) = gx.as_mut() {
                        T::gemm(
                            cin,
                            rows,
                            cols,
                            dw,
                            false,
                            &buf,
                            false,
                            &mut gx[s * cin * cols..(s + 1) * cin * cols],
                            false,
                        );
                    }
                    if let Some(gw) = gw.as_mut() {
                        T::gemm(
                            cin,
                            cols,
                            rows,
                            &dx[s * cin * cols..(s + 1) * cin * cols],
                            false,
                            &buf,
                            true,
                            gw,
                            true,
                        );
                    }
                }
                if let Some(gw) = gw {
                    accumulate(grads, *w, gw);
                }
                if let Some(gx) = gx {
                    accumulate(grads, *x, gx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let plane = s[2] * s[3];
                let count = T::of((n * plane) as f64);
                let gam = self.data(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for smp in 0..n {
                    for ch in 0..c {
                        let base = (smp * c + ch) * plane;
                        for i in base..base + plane {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for smp in 0..n {
                        for ch in 0..c {
                            let base = (smp * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for i in base..base + plane {
                                gx[i] = if *train {
                                    k * (g[i] - (sum_g[ch] + xhat[i] * sum_gx[ch]) / count)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, sum_gx);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, sum_g);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                denom,
                sqrt,
            } => {
                let dx = self.data(*x);
                let d = *self.shape(*x).last().unwrap();
                let gam = gamma.map(|v| self.data(v));
                let mut ggam = gamma.map(|_| vec![T::zero(); d]);
                let mut gbet = beta.map(|_| vec![T::zero(); d]);
                let mut gx = vec![T::zero(); dx.len()];
                let inv_d = T::one() / T::of(d as f64);
                let two = T::of(2.0);
                let mut gy = vec![T::zero(); d];
                let mut du = vec![T::zero(); d];
                for (r, (&mu, &den)) in mean.iter().zip(denom).enumerate() {
                    let row = &dx[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let (s, ds) = if *sqrt {
                        let s = T::one() / den.sqrt();
                        (s, -T::of(0.5) * s / den)
                    } else {
                        let s = T::one() / den;
                        (s, -s * s)
                    };
                    let mut dot = T::zero();
                    for i in 0..d {
                        let u = row[i] - mu;
                        if let Some(gg) = ggam.as_mut() {
                            gg[i] += grow[i] * u * s;
                        }
                        if let Some(gb) = gbet.as_mut() {
                            gb[i] += grow[i];
                        }
                        gy[i] = match gam {
                            Some(gm) => grow[i] * gm[i],
                            None => grow[i],
                        };
                        dot += gy[i] * u;
                    }
                    let dv = dot * ds;
                    let mut mean_du = T::zero();
                    for i in 0..d {
                        du[i] = gy[i] * s + dv * two * (row[i] - mu) * inv_d;
                        mean_du += du[i];
                    }
                    mean_du *= inv_d;
                    for i in 0..d {
                        gx[r * d + i] = du[i] - mean_du;
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, gx);
                }
                if let (Some(v), Some(gg)) = (gamma, ggam) {
                    if self.needs(*v) {
                        accumulate(grads, *v, gg);
                    }
                }
                if let (Some(v), Some(gb)) = (beta, gbet) {
                    if self.needs(*v) {
                        accumulate(grads, *v, gb);
                    }
                }
            }
            Op::Act { a, kind } => {
                let da = self.data(*a);
                let ga = match kind {
                    Activation::Relu => da
                        .iter()
                        .zip(g)
                        .map(|(&x, &gg)| if x > T::zero() { gg } else { T::zero() })
                        .collect(),
                    Activation::Tanh => out.iter().zip(g).map(|(&y, &gg)| gg * (T::one() - y * y)).collect(),
                    Activation::Gelu => da.iter().zip(g).map(|(&x, &gg)| gg * gelu_grad(x)).collect(),
                };
                accumulate(grads, *a, ga);
            }
            Op::Softmax { a } => {
                let d = *self.shape(*a).last().unwrap();
                let mut ga = vec![T::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks(d).zip(out.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    for i in 0..d {
                        dst[i] = yr[i] * (gr[i] - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, vec![g[0] / T::of(n as f64); n]);
            }
            Op::L1 { pred, target } => {
                let (dp, dt) = (self.data(*pred), self.data(*target));
                let scale = g[0] / T::of(dp.len() as f64);
                let sg: Vec<T> = dp
                    .iter()
                    .zip(dt)
                    .map(|(&p, &t)| {
                        if p > t {
                            scale
                        } else if p < t {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.needs(*target) {
                    accumulate(grads, *target, sg.iter().map(|&x| -x).collect());
                }
                if self.needs(*pred) {
                    accumulate(grads, *pred, sg);
                }
            }
            Op::Reshape { a } => accumulate(grads, *a, g.to_vec()),
            Op::TransposeLast2 { a } => {
                let s = self.shape(*a);
                let r = s.len();
                let mut ga = vec![T::zero(); g.len()];
                transpose_blocks(g, &mut ga, s[r - 1], s[r - 2]);
                accumulate(grads, *a, ga);
            }
            Op::SplitHeads { a, heads } => {
                let s = self.shape(*a);
                let mut ga = vec![T::zero(); g.len()];
                split_heads_into(g, &mut ga, s[0], s[1], *heads, s[2] / heads, true);
                accumulate(grads, *a, ga);
            }
            Op::MergeHeads { a, heads } => {
                let s = self.shape(*a);
                let mut ga = vec![T::zero(); g.len()];
                split_heads_into(g, &mut ga, s[0], s[2], *heads, s[3], false);
                accumulate(grads, *a, ga);
            }
            Op::Patchify { a, patch } => {
                let s = self.shape(*a);
                let geo = PatchGeo::new(s[0], s[1], s[2], s[3], *patch);
                let mut ga = vec![T::zero(); g.len()];
                geo.scatter(g, &mut ga, true);
                accumulate(grads, *a, ga);
            }
            Op::Unpatchify { a, patch } => {
                let s = node.value.shape();
                let geo = PatchGeo::new(s[0], s[1], s[2], s[3], *patch);
                let mut ga = vec![T::zero(); g.len()];
                geo.scatter(g, &mut ga, false);
                accumulate(grads, *a, ga);
            }
            Op::SliceLast { a, start } => {
                let d = *self.shape(*a).last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let mut ga = vec![T::zero(); self.value(*a).numel()];
                for (dst, src) in ga.chunks_mut(d).zip(g.chunks(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                accumulate(grads, *a, ga);
            }
            Op::AttnTiled {
                q,
                k,
                v,
                tile,
                dims,
                lse,
            } => {
                let mut gq = vec![T::zero(); self.value(*q).numel()];
                let mut gk = vec![T::zero(); self.value(*k).numel()];
                let mut gv = vec![T::zero(); self.value(*v).numel()];
                tiled_backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    out,
                    lse,
                    g,
                    *dims,
                    *tile,
                    &mut gq,
                    &mut gk,
                    &mut gv,
                );
                for (var, gr) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.needs(var) {
                        accumulate(grads, var, gr);
                    }
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn reduce_if<T: Real>(g: Vec<T>, to_scalar: bool) -> Vec<T> {
    if to_scalar {
        vec![g.into_iter().sum()]
    } else {
        g
    }
}

/// Numpy-style broadcasting of matmul batch extents. Returns the output
/// batch shape and, per output batch, the flat batch index into each input.
fn broadcast_batches(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<BatchPair>)> {
    let r = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; r - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(r);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return None;
        }
        out.push(x.max(y));
    }
    let (sa, sb, so) = (strides(&pa), strides(&pb), strides(&out));
    let total: usize = out.iter().product();
    let pairs = (0..total)
        .map(|flat| {
            let (mut ia, mut ib) = (0, 0);
            for d in 0..r {
                let idx = (flat / so[d]) % out[d];
                if pa[d] != 1 {
                    ia += idx * sa[d];
                }
                if pb[d] != 1 {
                    ib += idx * sb[d];
                }
            }
            BatchPair { a: ia, b: ib }
        })
        .collect();
    Some((out, pairs))
}

/// Transposes every trailing `p×q` block of `src` into `q×p` in `dst`.
fn transpose_blocks<T: Real>(src: &[T], dst: &mut [T], p: usize, q: usize) {
    for (s, d) in src.chunks(p * q).zip(dst.chunks_mut(p * q)) {
        for i in 0..p {
            for j in 0..q {
                d[j * p + i] = s[i * q + j];
            }
        }
    }
}

/// `[b, t, h, dh]` ↔ `[b, h, t, dh]` permutation; `inverse` maps the head
/// layout back to the token layout.
fn split_heads_into<T: Real>(src: &[T], dst: &mut [T], b: usize, t: usize, h: usize, dh: usize, inverse: bool) {
    for bi in 0..b {
        for ti in 0..t {
            for hi in 0..h {
                let tok = ((bi * t + ti) * h + hi) * dh;
                let head = ((bi * h + hi) * t + ti) * dh;
                let (from, to) = if inverse { (head, tok) } else { (tok, head) };
                dst[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
}

#[derive(Clone, Copy)]
struct PatchGeo {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
}

impl PatchGeo {
    fn new(n: usize, c: usize, h: usize, w: usize, p: usize) -> Self {
        Self { n, c, h, w, p }
    }

    fn tokens(&self) -> usize {
        (self.h / self.p) * (self.w / self.p)
    }

    fn feat(&self) -> usize {
        self.c * self.p * self.p
    }

    /// Image → tokens, or tokens → image when `inverse`.
    fn scatter<T: Real>(&self, src: &[T], dst: &mut [T], inverse: bool) {
        let (gh, gw) = (self.h / self.p, self.w / self.p);
        let (t, f) = (self.tokens(), self.feat());
        for s in 0..self.n {
            for ci in 0..self.c {
                for y in 0..self.h {
                    for x in 0..self.w {
                        let img = ((s * self.c + ci) * self.h + y) * self.w + x;
                        let tok = (y / self.p) * gw + x / self.p;
                        let feat = (ci * self.p + y % self.p) * self.p + x % self.p;
                        let tk = (s * t + tok) * f + feat;
                        debug_assert!(tok < gh * gw);
                        if inverse {
                            dst[img] = src[tk];
                        } else {
                            dst[tk] = src[img];
                        }
                    }
                }
            }
        }
    }
}
