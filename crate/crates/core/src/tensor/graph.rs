//! Define-by-run computation tape.
//!
//! Every op appends a node holding its output value and enough bookkeeping
//! to run the vector-Jacobian product later. Nodes are appended in execution
//! order, so the tape index order is a topological order and the backward pass
//! is a single reverse sweep. A fresh `Graph` is built for every forward pass.

use super::kernels::{self, axis_split, gemm};
use super::optim::{ParamId, ParamStore};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) inputs: Vec<Var>,
}

pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    /// `b` is either the same shape as `a` or a trailing suffix of it.
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f32,
    },
    AddScalar {
        a: Var,
    },
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    LogClamped {
        a: Var,
        min: f32,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis {
        a: Var,
        axis: usize,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Gather {
        a: Var,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        smoothing: f32,
        probs: Vec<f32>,
    },
    PairwiseDistance {
        x: Var,
    },
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) params: Vec<(ParamId, Var)>,
    bound: Vec<Option<Var>>,
    macs: u64,
}

/// Squared distances below this are clamped before the square root.
pub const DISTANCE_EPS: f32 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations executed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            inputs: inputs.to_vec(),
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            inputs: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf with no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            inputs: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter as a tracked leaf. Repeated calls return the
    /// same node, so gradients for a parameter accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.input(store.value(id).clone());
        self.bound[id.0] = Some(v);
        self.params.push((id, v));
        v
    }

    /// Parameters that `from` depends on through paths avoiding `stop` nodes.
    pub fn params_reachable(&self, from: Var, stop: &[Var]) -> Vec<ParamId> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![from];
        while let Some(v) = stack.pop() {
            if seen[v.0] || stop.contains(&v) {
                continue;
            }
            seen[v.0] = true;
            stack.extend(self.nodes[v.0].inputs.iter().copied());
        }
        self.params
            .iter()
            .filter(|(_, v)| seen[v.0])
            .map(|(id, _)| *id)
            .collect()
    }

    /// Routes later `param(store, id)` calls to an existing leaf, e.g. one
    /// created by `input` with perturbed values during gradient checks.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        self.bound[id.0] = Some(v);
        self.params.retain(|(p, _)| *p != id);
        self.params.push((id, v));
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = MatmulDims::infer(&sa, &sb, trans_b)?;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(dims.n);
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if dims.shared_b {
                gemm(
                    dims.batch * dims.m,
                    dims.k,
                    dims.n,
                    av,
                    false,
                    bv,
                    trans_b,
                    &mut out,
                    0.0,
                );
            } else {
                let (sa_, sb_, sc_) = (dims.m * dims.k, dims.k * dims.n, dims.m * dims.n);
                for i in 0..dims.batch {
                    gemm(
                        dims.m,
                        dims.k,
                        dims.n,
                        &av[i * sa_..(i + 1) * sa_],
                        false,
                        &bv[i * sb_..(i + 1) * sb_],
                        trans_b,
                        &mut out[i * sc_..(i + 1) * sc_],
                        0.0,
                    );
                }
            }
        }
        self.macs += (dims.batch * dims.m * dims.k * dims.n) as u64;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    /// Elementwise sum; `b` may omit leading batch axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(bv.len().max(1)) {
            kernels::add_assign(chunk, bv);
        }
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise difference; `b` may omit leading batch axes of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("sub", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(bv.len().max(1)) {
            for (o, s) in chunk.iter_mut().zip(bv) {
                *o -= s;
            }
        }
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for (o, s) in out.data_mut().iter_mut().zip(bv) {
            *o *= s;
        }
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale { a, factor }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar { a }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.log_clamped(a, f32::MIN_POSITIVE)
    }

    /// `ln(max(x, min))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, min: f32) -> Var {
        let out = self.value(a).map(|x| x.max(min).ln());
        self.push(out, Op::LogClamped { a, min }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f32>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f32>() / t.numel().max(1) as f32;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Mean over one axis, which is removed from the output shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "mean_axis",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for i in 0..n {
                let base = (o * n + i) * inner;
                kernels::add_assign(dst, &src[base..base + inner]);
            }
        }
        let inv = 1.0 / n as f32;
        out.iter_mut().for_each(|x| *x *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::MeanAxis { a, axis }, &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len()) {
            return Err(Error::shape("permute", &shape, perm));
        }
        for &p in perm {
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::shape("permute", &shape, perm));
            }
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut out = vec![0.0; self.value(a).numel()];
        kernels::permute_into(self.value(a).data(), &shape, perm, &mut out);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(Error::OutOfRange {
                what: "slice end",
                index: start + len,
                size: shape[axis],
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Slice { a, axis, start }, &[a]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = self.value(a).clone();
        let data = out.data_mut();
        // f64 accumulation keeps every output within half an ulp
        let mut buf = vec![0.0f64; n];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| data[idx(i)]).fold(f32::NEG_INFINITY, f32::max) as f64;
                let mut sum = 0.0f64;
                for (i, e) in buf.iter_mut().enumerate() {
                    *e = (data[idx(i)] as f64 - max).exp();
                    sum += *e;
                }
                for (i, e) in buf.iter().enumerate() {
                    data[idx(i)] = (e / sum) as f32;
                }
            }
        }
        Ok(self.push(out, Op::Softmax { a, axis }, &[a]))
    }

    /// Layer normalization over the last axis with population variance.
    /// `gamma`/`beta` are optional so that a parameter-free variant exists.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f32,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::NotScalar(shape.clone()))?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        let rows = self.value(x).numel() / d.max(1);
        let mut out = self.value(x).clone();
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let g = gamma.map(|v| self.value(v).data().to_vec());
        let b = beta.map(|v| self.value(v).data().to_vec());
        for row in out.data_mut().chunks_mut(d) {
            let mu = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps as f64).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                let mut y = (*v as f64 - mu) * r;
                if let Some(g) = &g {
                    y *= g[i] as f64;
                }
                if let Some(b) = &b {
                    y += b[i] as f64;
                }
                *v = y as f32;
            }
            mean.push(mu as f32);
            rstd.push(r as f32);
        }
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &inputs,
        ))
    }

    /// Row lookup: `table[indices[i], :]` for each `i`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("embedding", &shape, &[indices.len()]));
        }
        let (rows, d) = (shape[0], shape[1]);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::OutOfRange {
                    what: "embedding table",
                    index: i,
                    size: rows,
                });
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(&[indices.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    /// Picks flat elements of `a` into a 1-d tensor.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            out.push(*src.get(i).ok_or(Error::OutOfRange {
                what: "gather source",
                index: i,
                size: src.len(),
            })?);
        }
        let value = Tensor::new(&[indices.len()], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                a,
                indices: indices.to_vec(),
            },
            &[a],
        ))
    }

    /// Per-row cross-entropy of `logits: [R, C]` against class indices,
    /// with optional label smoothing. Output shape `[R]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f32) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let c = shape[1];
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut out = Vec::with_capacity(labels.len());
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::OutOfRange {
                    what: "class label",
                    index: label,
                    size: c,
                });
            }
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
            let mut loss = 0.0f64;
            for (j, &x) in row.iter().enumerate() {
                let logp = x as f64 - lse;
                probs[r * c + j] = logp.exp() as f32;
                let q = smoothing as f64 / c as f64 + if j == label { 1.0 - smoothing as f64 } else { 0.0 };
                if q > 0.0 {
                    loss -= q * logp;
                }
            }
            out.push(loss as f32);
        }
        let value = Tensor::new(&[labels.len()], out)?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                smoothing,
                probs,
            },
            &[logits],
        ))
    }

    /// Euclidean distance matrix `[B, B]` between the rows of `x: [B, d]`.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("pairwise_distance", &shape, &[0, 0]));
        }
        let (b, d) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                let sq: f32 = (0..d)
                    .map(|k| {
                        let diff = src[i * d + k] - src[j * d + k];
                        diff * diff
                    })
                    .sum();
                out[i * b + j] = sq.max(DISTANCE_EPS).sqrt();
            }
        }
        let value = Tensor::new(&[b, b], out)?;
        Ok(self.push(value, Op::PairwiseDistance { x }, &[x]))
    }
}

pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub shared_b: bool,
}

impl MatmulDims {
    pub(crate) fn infer(sa: &[usize], sb: &[usize], trans_b: bool) -> Result<Self> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(op, sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(op, sa, sb));
        }
        let lead_a = &sa[..sa.len() - 2];
        let batch = lead_a.iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != *lead_a {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(Self {
            batch,
            m,
            k,
            n,
            shared_b,
        })
    }
}
