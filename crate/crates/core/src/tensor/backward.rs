use super::graph::{Graph, MatmulDims, Op, Var, DISTANCE_EPS};
use super::kernels::{self, axis_split, gemm};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Gradients of a scalar with respect to every tracked node of a graph.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(&self.shapes[v.0], g.clone()).ok()
    }

    /// Gradient of `v`, or zeros when the output did not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub(crate) fn raw(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f32>>], v: Var, len: usize) -> &'a mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        self.vjp(loss, &[1.0])
    }

    /// Vector-Jacobian product: reverse sweep from `out` seeded with the
    /// cotangent `seed` (same number of elements as `out`).
    pub fn vjp(&self, out: Var, seed: &[f32]) -> Result<Gradients> {
        let out_shape = self.shape(out);
        if seed.len() != self.value(out).numel() {
            return Err(Error::shape("vjp", out_shape, &[seed.len()]));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(seed.to_vec());
        }
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|node| node.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.numel()
    }

    fn backprop_node(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let dims = MatmulDims::infer(self.shape(a), self.shape(b), trans_b)?;
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let (m, k, nn) = (dims.m, dims.k, dims.n);
                if self.tracked(a) {
                    let ga = slot(grads, a, av.len());
                    if dims.shared_b {
                        gemm(dims.batch * m, nn, k, g, false, bv, !trans_b, ga, 1.0);
                    } else {
                        for i in 0..dims.batch {
                            gemm(
                                m,
                                nn,
                                k,
                                &g[i * m * nn..(i + 1) * m * nn],
                                false,
                                &bv[i * k * nn..(i + 1) * k * nn],
                                !trans_b,
                                &mut ga[i * m * k..(i + 1) * m * k],
                                1.0,
                            );
                        }
                    }
                }
                if self.tracked(b) {
                    let gb = slot(grads, b, bv.len());
                    let rows = if dims.shared_b { dims.batch * m } else { m };
                    let batches = if dims.shared_b { 1 } else { dims.batch };
                    for i in 0..batches {
                        let ai = &av[i * rows * k..(i + 1) * rows * k];
                        let gi = &g[i * rows * nn..(i + 1) * rows * nn];
                        let gbi = &mut gb[i * k * nn..(i + 1) * k * nn];
                        if trans_b {
                            gemm(nn, rows, k, gi, true, ai, false, gbi, 1.0);
                        } else {
                            gemm(k, rows, nn, ai, true, gi, false, gbi, 1.0);
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if self.tracked(*a) {
                    kernels::add_assign(slot(grads, *a, g.len()), g);
                }
                if self.tracked(*b) {
                    let len = self.numel(*b);
                    let gb = slot(grads, *b, len);
                    for chunk in g.chunks(len.max(1)) {
                        for (d, s) in gb.iter_mut().zip(chunk) {
                            *d += sign * s;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.tracked(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.tracked(*b) {
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale { a, factor } => {
                if self.tracked(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s * factor;
                    }
                }
            }
            Op::AddScalar { a } | Op::Reshape(a) => {
                if self.tracked(*a) {
                    kernels::add_assign(slot(grads, *a, g.len()), g);
                }
            }
            Op::Gelu(a) => self.unary(*a, g, grads, |x, _| kernels::gelu_grad(x)),
            Op::Sigmoid(a) => {
                if self.tracked(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }
            Op::Relu(a) => self.unary(*a, g, grads, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::LogClamped { a, min } => {
                let min = *min;
                self.unary(*a, g, grads, move |x, _| if x > min { 1.0 / x } else { 0.0 })
            }
            Op::Sum(a) | Op::Mean(a) => {
                if self.tracked(*a) {
                    let len = self.numel(*a);
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        1.0 / len.max(1) as f32
                    } else {
                        1.0
                    };
                    let ga = slot(grads, *a, len);
                    let v = g[0] * scale;
                    ga.iter_mut().for_each(|d| *d += v);
                }
            }
            Op::MeanAxis { a, axis } => {
                if self.tracked(*a) {
                    let shape = self.shape(*a);
                    let (outer, n, inner) = axis_split(shape, *axis);
                    let inv = 1.0 / n as f32;
                    let ga = slot(grads, *a, outer * n * inner);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for i in 0..n {
                            let base = (o * n + i) * inner;
                            for (d, s) in ga[base..base + inner].iter_mut().zip(src) {
                                *d += s * inv;
                            }
                        }
                    }
                }
            }
            Op::Permute { a, perm } => {
                if self.tracked(*a) {
                    let mut tmp = vec![0.0; g.len()];
                    kernels::permute_into(g, node.value.shape(), &kernels::inverse_perm(perm), &mut tmp);
                    kernels::add_assign(slot(grads, *a, g.len()), &tmp);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.tracked(p) {
                        let gp = slot(grads, p, outer * len * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            kernels::add_assign(
                                &mut gp[o * len * inner..(o + 1) * len * inner],
                                &g[src..src + len * inner],
                            );
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                if self.tracked(*a) {
                    let shape = self.shape(*a);
                    let (outer, n, inner) = axis_split(shape, *axis);
                    let len = node.value.shape()[*axis];
                    let ga = slot(grads, *a, outer * n * inner);
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        kernels::add_assign(
                            &mut ga[dst..dst + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Softmax { a, axis } => {
                if self.tracked(*a) {
                    let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                    let ga = slot(grads, *a, g.len());
                    if inner == 1 {
                        for ((gr, yr), dr) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                            let dot: f32 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                            for i in 0..n {
                                dr[i] += yr[i] * (gr[i] - dot);
                            }
                        }
                    } else {
                        for o in 0..outer {
                            for j in 0..inner {
                                let idx = |i: usize| (o * n + i) * inner + j;
                                let dot: f32 = (0..n).map(|i| g[idx(i)] * out[idx(i)]).sum();
                                for i in 0..n {
                                    ga[idx(i)] += out[idx(i)] * (g[idx(i)] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let d = *self.shape(*x).last().unwrap_or(&1);
                let gam = gamma.map(|v| self.value(v).data());
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; xv.len()];
                let mut dyhat = vec![0.0; d];
                for (r, (xr, gr)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut mean_dy = 0.0;
                    let mut mean_dy_xhat = 0.0;
                    for i in 0..d {
                        let xhat = (xr[i] - mu) * rs;
                        dgamma[i] += gr[i] * xhat;
                        dbeta[i] += gr[i];
                        dyhat[i] = gr[i] * gam.map_or(1.0, |gm| gm[i]);
                        mean_dy += dyhat[i];
                        mean_dy_xhat += dyhat[i] * xhat;
                    }
                    mean_dy /= d as f32;
                    mean_dy_xhat /= d as f32;
                    let dxr = &mut dx[r * d..(r + 1) * d];
                    for i in 0..d {
                        let xhat = (xr[i] - mu) * rs;
                        dxr[i] = rs * (dyhat[i] - mean_dy - xhat * mean_dy_xhat);
                    }
                }
                if self.tracked(*x) {
                    kernels::add_assign(slot(grads, *x, dx.len()), &dx);
                }
                if let Some(gv) = gamma.filter(|v| self.tracked(*v)) {
                    kernels::add_assign(slot(grads, gv, d), &dgamma);
                }
                if let Some(bv) = beta.filter(|v| self.tracked(*v)) {
                    kernels::add_assign(slot(grads, bv, d), &dbeta);
                }
            }
            Op::Embedding { table, indices } => {
                if self.tracked(*table) {
                    let d = self.shape(*table)[1];
                    let gt = slot(grads, *table, self.numel(*table));
                    for (r, &i) in indices.iter().enumerate() {
                        kernels::add_assign(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Gather { a, indices } => {
                if self.tracked(*a) {
                    let ga = slot(grads, *a, self.numel(*a));
                    for (r, &i) in indices.iter().enumerate() {
                        ga[i] += g[r];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                smoothing,
                probs,
            } => {
                if self.tracked(*logits) {
                    let c = self.shape(*logits)[1];
                    let gl = slot(grads, *logits, probs.len());
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let q = smoothing / c as f32
                                + if j == label { 1.0 - smoothing } else { 0.0 };
                            gl[r * c + j] += g[r] * (probs[r * c + j] - q);
                        }
                    }
                }
            }
            Op::PairwiseDistance { x } => {
                if self.tracked(*x) {
                    let shape = self.shape(*x);
                    let (b, d) = (shape[0], shape[1]);
                    let xv = self.value(*x).data();
                    let gx = slot(grads, *x, b * d);
                    for i in 0..b {
                        for j in 0..b {
                            if i == j || g[i * b + j] == 0.0 {
                                continue;
                            }
                            let sq: f32 = (0..d)
                                .map(|k| {
                                    let diff = xv[i * d + k] - xv[j * d + k];
                                    diff * diff
                                })
                                .sum();
                            if sq <= DISTANCE_EPS {
                                continue;
                            }
                            let dist = out[i * b + j];
                            let coeff = g[i * b + j] / dist;
                            for k in 0..d {
                                let diff = coeff * (xv[i * d + k] - xv[j * d + k]);
                                gx[i * d + k] += diff;
                                gx[j * d + k] -= diff;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn unary(
        &self,
        a: Var,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
        deriv: impl Fn(f32, f32) -> f32,
    ) {
        if !self.tracked(a) {
            return;
        }
        let xv = self.value(a).data();
        let ga = slot(grads, a, g.len());
        for i in 0..g.len() {
            ga[i] += g[i] * deriv(xv[i], g[i]);
        }
    }
}
