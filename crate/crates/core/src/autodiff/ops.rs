use super::kernels::{
    axis_extents, for_each_broadcast, for_each_strided, gemm_acc, gemm_nt_acc, gemm_tn_acc,
};
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_shapes, broadcast_strides, norm_axis, strides, Float, Tensor};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Float>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

/// Result shape of a batched matmul, plus (batch, m, k, n).
fn matmul_shape(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Vec<usize>, usize, usize, usize)> {
    if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k, n) = (a[a.len() - 2], a[a.len() - 1], b[b.len() - 1]);
    let batch = broadcast_shapes(&a[..a.len() - 2], &b[..b.len() - 2])
        .ok_or_else(|| Error::shape("matmul", a, b))?;
    let mut out = batch.clone();
    out.extend([m, n]);
    if b.len() == 2 {
        // A shared right operand: one [batch·m, k] × [k, n] product.
        return Ok((out, Vec::new(), batch.iter().product::<usize>() * m, k, n));
    }
    Ok((out, batch, m, k, n))
}

/// Visits each batch matrix, yielding (out, a, b) matrix indices.
fn for_each_batch(batch: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    if batch.is_empty() {
        f(0, 0, 0);
        return;
    }
    let sa = broadcast_strides(&a[..a.len() - 2], batch);
    let sb = broadcast_strides(&b[..b.len() - 2], batch);
    for_each_broadcast(batch, &sa, &sb, f);
}

impl<T: Float> Graph<T> {
    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| kind.apply(x, y))
                .collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else {
            let shape = broadcast_shapes(ta.shape(), tb.shape())
                .ok_or_else(|| Error::shape(kind.name(), ta.shape(), tb.shape()))?;
            let sa = broadcast_strides(ta.shape(), &shape);
            let sb = broadcast_strides(tb.shape(), &shape);
            let mut data = vec![T::zero(); shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&shape, &sa, &sb, |o, i, j| data[o] = kind.apply(da[i], db[j]));
            Tensor::from_parts(shape, data)
        };
        let op = match kind {
            Binary::Add => Op::Add(a, b),
            Binary::Sub => Op::Sub(a, b),
            Binary::Mul => Op::Mul(a, b),
            Binary::Div => Op::Div(a, b),
        };
        self.push(kind.name(), out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(name, out, op)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let k = T::of(k);
        self.unary("scale", x, |v| v * k, Op::Scale(x, k))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(sigmoid(x))`, evaluated without forming `sigmoid(x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "log_sigmoid",
            x,
            |v| v.min(T::zero()) - (-v.abs()).exp().ln_1p(),
            Op::LogSigmoid(x),
        )
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("nonpositive input {bad}"),
            });
        }
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v < T::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        self.unary("sqrt", x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    /// `max(x, floor)`; the gradient is zero wherever the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let lo = T::of(floor);
        self.unary("clamp_min", x, |v| v.max(lo), Op::ClampMin(x, lo))
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, batch, m, k, n) = matmul_shape(ta.shape(), tb.shape())?;
        let mut data = vec![T::zero(); shape.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        for_each_batch(&batch, ta.shape(), tb.shape(), |o, i, j| {
            gemm_acc(
                &da[i * m * k..(i + 1) * m * k],
                &db[j * k * n..(j + 1) * k * n],
                &mut data[o * m * n..(o + 1) * m * n],
                m,
                k,
                n,
            )
        });
        self.push("matmul", Tensor::from_parts(shape, data), Op::MatMul(a, b))
    }

    /// General axis permutation: output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("bad permutation {perm:?} for shape {shape:?}")));
        }
        let src_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let input = self.value(x).data();
        let mut data = vec![T::zero(); input.len()];
        for_each_strided(&out_shape, &src, |o, s| data[o] = input[s]);
        self.push("permute", Tensor::from_parts(out_shape, data), Op::Permute(x, perm.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::invalid("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x))
    }

    pub fn concat(&mut self, xs: &[Var], axis: isize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        let axis = norm_axis(axis, base.len(), "concat")?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push("concat", Tensor::from_parts(shape, data), Op::Concat(xs.to_vec(), axis))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: isize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = norm_axis(axis, shape.len(), "narrow")?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} exceeds axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let input = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&input[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("narrow", Tensor::from_parts(out_shape, data), Op::Narrow { x, axis, start })
    }

    /// Splits into `parts` equal pieces along `axis`.
    pub fn split(&mut self, x: Var, axis: isize, parts: usize) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        let ax = norm_axis(axis, shape.len(), "split")?;
        if parts == 0 || shape[ax] % parts != 0 {
            return Err(Error::invalid(
                "split",
                format!("axis {ax} of {shape:?} not divisible into {parts} parts"),
            ));
        }
        let w = shape[ax] / parts;
        (0..parts).map(|p| self.narrow(x, axis, p * w, w)).collect()
    }

    /// Sum along `axis`; with `keepdim` the axis stays with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: isize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = norm_axis(axis, shape.len(), "sum_axis")?;
        let (outer, len, inner) = axis_extents(&shape, axis);
        let input = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for a in 0..len {
                let src = &input[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut kept = shape.clone();
        kept[axis] = 1;
        let v = self.push("sum_axis", Tensor::from_parts(kept, data), Op::SumAxis(x, axis))?;
        if keepdim {
            return Ok(v);
        }
        let mut squeezed = shape;
        squeezed.remove(axis);
        if squeezed.is_empty() {
            squeezed.push(1);
        }
        self.reshape(v, &squeezed)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: isize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = norm_axis(axis, shape.len(), "softmax")?;
        let (outer, len, inner) = axis_extents(&shape, axis);
        let input = self.value(x).data();
        let mut data = vec![T::zero(); input.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..len {
                    mx = mx.max(input[at(a)]);
                }
                let mut z = T::zero();
                for a in 0..len {
                    let e = (input[at(a)] - mx).exp();
                    data[at(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    data[at(a)] = data[at(a)] / z;
                }
            }
        }
        self.push("softmax", Tensor::from_parts(shape, data), Op::Softmax(x, axis))
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("layer_norm", "rank 0"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = self.value(x).numel() / d;
        let (input, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); input.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &input[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            for c in 0..d {
                out[r * d + c] = (row[c] - mu) * rs * g[c] + b[c];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let op = Op::LayerNorm { x, gamma, beta, mean, rstd };
        self.push("layer_norm", Tensor::from_parts(shape, out), op)
    }

    /// Mean cross-entropy of `logits: [n, vocab]` against class `targets`,
    /// skipping rows where `targets[r]` is `None`. With `smoothing > 0` the
    /// target distribution puts `smoothing / vocab` mass on every class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], smoothing: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let (n, vocab) = (shape[0], shape[1]);
        let input = self.value(logits).data();
        let mut probs = vec![T::zero(); n * vocab];
        let mut target = vec![T::zero(); n * vocab];
        let mut loss = T::zero();
        let mut count = 0;
        let off = T::of(smoothing / vocab as f64);
        let on = T::of(1.0 - smoothing) + off;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::invalid("cross_entropy", format!("target {t} >= vocab {vocab}")));
            }
            count += 1;
            let row = &input[r * vocab..(r + 1) * vocab];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for c in 0..vocab {
                let q = if c == t { on } else { off };
                let logp = row[c] - lse;
                probs[r * vocab + c] = logp.exp();
                target[r * vocab + c] = q;
                if q != T::zero() {
                    loss -= q * logp;
                }
            }
        }
        if count == 0 {
            return Err(Error::invalid("cross_entropy", "no target rows"));
        }
        let value = Tensor::scalar(loss / T::of(count as f64));
        self.push("cross_entropy", value, Op::CrossEntropy { logits, target, probs, count })
    }

    /// Row lookup: `table: [vocab, d]` gathered at `ids` into `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid("embedding", format!("table must be 2-D, got {shape:?}")));
        }
        let (vocab, d) = (shape[0], shape[1]);
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::invalid("embedding", format!("id {id} >= vocab {vocab}")));
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let op = Op::Embedding { table, ids: ids.to_vec() };
        self.push("embedding", Tensor::from_parts(vec![ids.len(), d], data), op)
    }

    pub(super) fn backprop_node(&self, idx: usize, g: &[T], lower: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let n = self.nodes[v.0].value.numel();
                lower[v.0].get_or_insert_with(|| vec![T::zero(); n])
            }};
        }

        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) | &Op::Mul(a, b) | &Op::Div(a, b) => {
                let kind = match node.op {
                    Op::Add(..) => Binary::Add,
                    Op::Sub(..) => Binary::Sub,
                    Op::Mul(..) => Binary::Mul,
                    _ => Binary::Div,
                };
                let shape = node.value.shape();
                let (sa_shape, sb_shape) = (self.shape(a), self.shape(b));
                let sa = broadcast_strides(sa_shape, shape);
                let sb = broadcast_strides(sb_shape, shape);
                let (va, vb) = (val(a), val(b));
                if needs(a) {
                    let ga = slot!(a);
                    for_each_broadcast(shape, &sa, &sb, |o, i, j| {
                        ga[i] += match kind {
                            Binary::Add | Binary::Sub => g[o],
                            Binary::Mul => g[o] * vb[j],
                            Binary::Div => g[o] / vb[j],
                        }
                    });
                }
                if needs(b) {
                    let gb = slot!(b);
                    for_each_broadcast(shape, &sa, &sb, |o, i, j| {
                        gb[j] += match kind {
                            Binary::Add => g[o],
                            Binary::Sub => -g[o],
                            Binary::Mul => g[o] * va[i],
                            Binary::Div => -g[o] * va[i] / (vb[j] * vb[j]),
                        }
                    });
                }
            }
            &Op::Scale(x, k) => zip_acc(slot!(x), g, |gi, _| gi * k),
            &Op::AddScalar(x) => zip_acc(slot!(x), g, |gi, _| gi),
            &Op::Relu(x) => {
                let xv = val(x);
                zip_acc(slot!(x), g, |gi, i| if xv[i] > T::zero() { gi } else { T::zero() })
            }
            &Op::Sigmoid(x) => zip_acc(slot!(x), g, |gi, i| gi * out[i] * (T::one() - out[i])),
            &Op::LogSigmoid(x) => {
                let xv = val(x);
                zip_acc(slot!(x), g, |gi, i| gi * sigmoid(-xv[i]))
            }
            &Op::Exp(x) => zip_acc(slot!(x), g, |gi, i| gi * out[i]),
            &Op::Log(x) => {
                let xv = val(x);
                zip_acc(slot!(x), g, |gi, i| gi / xv[i])
            }
            &Op::Sqrt(x) => zip_acc(slot!(x), g, |gi, i| gi / (T::of(2.0) * out[i])),
            &Op::Square(x) => {
                let xv = val(x);
                zip_acc(slot!(x), g, |gi, i| T::of(2.0) * gi * xv[i])
            }
            &Op::ClampMin(x, lo) => {
                let xv = val(x);
                zip_acc(slot!(x), g, |gi, i| if xv[i] > lo { gi } else { T::zero() })
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (_, batch, m, k, n) = matmul_shape(sa, sb).expect("validated in forward");
                let (va, vb) = (val(a), val(b));
                if needs(a) {
                    let ga = slot!(a);
                    for_each_batch(&batch, sa, sb, |o, i, j| {
                        gemm_nt_acc(
                            &g[o * m * n..(o + 1) * m * n],
                            &vb[j * k * n..(j + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        )
                    });
                }
                if needs(b) {
                    let gb = slot!(b);
                    for_each_batch(&batch, sa, sb, |o, i, j| {
                        gemm_tn_acc(
                            &va[i * m * k..(i + 1) * m * k],
                            &g[o * m * n..(o + 1) * m * n],
                            &mut gb[j * k * n..(j + 1) * k * n],
                            m,
                            k,
                            n,
                        )
                    });
                }
            }
            Op::Permute(x, perm) => {
                let in_strides = strides(self.shape(*x));
                let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let gx = slot!(*x);
                for_each_strided(node.value.shape(), &src, |o, s| gx[s] += g[o]);
            }
            &Op::Reshape(x) => zip_acc(slot!(x), g, |gi, _| gi),
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                let total = node.value.shape()[*axis] * inner;
                for &x in xs {
                    let chunk = self.shape(x)[*axis] * inner;
                    if needs(x) {
                        let gx = slot!(x);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (d, &s) in gx[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = axis_extents(self.shape(x), axis);
                let len = node.value.shape()[axis];
                let gx = slot!(x);
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, &s) in gx[base..base + len * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            &Op::SumAxis(x, axis) => {
                let (outer, len, inner) = axis_extents(self.shape(x), axis);
                let gx = slot!(x);
                for o in 0..outer {
                    for a in 0..len {
                        let dst = &mut gx[(o * len + a) * inner..(o * len + a + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += s;
                        }
                    }
                }
            }
            &Op::SumAll(x) => {
                let g0 = g[0];
                slot!(x).iter_mut().for_each(|d| *d += g0);
            }
            &Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_extents(node.value.shape(), axis);
                let gx = slot!(x);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: T = (0..len).map(|a| g[at(a)] * out[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] += out[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let d = *node.value.shape().last().unwrap();
                let rows = mean.len();
                let (xv, gv) = (val(*x), val(*gamma));
                let dn = T::of(d as f64);
                let xhat = |r: usize, c: usize| (xv[r * d + c] - mean[r]) * rstd[r];
                if needs(*gamma) {
                    let gg = slot!(*gamma);
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat(r, c);
                        }
                    }
                }
                if needs(*beta) {
                    let gb = slot!(*beta);
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                }
                if needs(*x) {
                    let gx = slot!(*x);
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..d {
                            let dxh = g[r * d + c] * gv[c];
                            m1 += dxh;
                            m2 += dxh * xhat(r, c);
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for c in 0..d {
                            let dxh = g[r * d + c] * gv[c];
                            gx[r * d + c] += rstd[r] * (dxh - m1 - xhat(r, c) * m2);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, target, probs, count } => {
                let vocab = self.shape(*logits)[1];
                let k = g[0] / T::of(*count as f64);
                let gx = slot!(*logits);
                for r in 0..probs.len() / vocab {
                    let row = r * vocab..(r + 1) * vocab;
                    if target[row.clone()].iter().all(|&q| q == T::zero()) {
                        continue;
                    }
                    for c in row {
                        gx[c] += k * (probs[c] - target[c]);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let gt = slot!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += g[r * d + c];
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn zip_acc<T: Float>(dst: &mut [T], g: &[T], f: impl Fn(T, usize) -> T) {
    for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
        *d += f(gi, i);
    }
}
