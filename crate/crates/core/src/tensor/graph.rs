use std::borrow::Cow;

use rand::Rng;

use super::kernels::{self, axpy, dot};
use super::{Scalar, Tensor};
use crate::{rng, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
    Dropout { a: Var, mask: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Mse { a: Var, b: Var },
    Sum { a: Var },
}

struct Node<'a, T: Scalar> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. Parameters may be borrowed for the lifetime `'a` so that
/// inference does not copy weights.
pub struct Graph<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes `data` of `shape` so that output axis `i` is input axis `perm[i]`.
fn permute_data<T: Copy + Default>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let stride_of_out: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::default(); data.len()];
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = data[src];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += stride_of_out[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= stride_of_out[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, parents: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients are not tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape,
            value: Cow::Owned(t.data),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf, typically a model parameter.
    pub fn leaf_ref(&mut self, t: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: Cow::Borrowed(&t.data),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let v = self.input(t);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
        }
    }

    /// `a[..., k] x b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return shape_err("matmul", sa, sb);
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.push(shape, out, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched `a[B,m,k] x b[B,k,n]`, or `a x b^T` for `b[B,n,k]` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return shape_err("bmm", &sa, &sb);
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let a_b = &av[bi * m * k..(bi + 1) * m * k];
            let b_b = &bv[bi * k * n..(bi + 1) * k * n];
            let o_b = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                for i in 0..m {
                    for j in 0..n {
                        o_b[i * n + j] = dot(&a_b[i * k..(i + 1) * k], &b_b[j * k..(j + 1) * k]);
                    }
                }
            } else {
                o_b.copy_from_slice(&kernels::matmul(a_b, b_b, m, k, n));
            }
        }
        Ok(self.push(vec![batch, m, n], out, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// Elementwise sum; `b`'s shape must be a suffix of `a`'s and is
    /// broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err("add", sa, sb);
        }
        let shape = sa.to_vec();
        let bv = self.value(b);
        let n = bv.len();
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_exact_mut(n.max(1)) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o += x;
            }
        }
        Ok(self.push(shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("mul", self.shape(a), self.shape(b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, s }, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let d = *self.shape(a).last().unwrap_or(&1);
        let out = kernels::softmax_rows(self.value(a), d);
        self.push(self.shape(a).to_vec(), out, Op::Softmax { a }, &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err("layer_norm", self.shape(x), self.shape(gamma));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / d.max(1);
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::one() / T::from_f64(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu { a }, &[a])
    }

    /// Inverted dropout with a mask drawn from `rng::stream(seed, [])`.
    /// Identity when `train` is false or `p` is zero.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, seed: u64) -> Var {
        if !train || p <= 0.0 {
            return a;
        }
        let mut r = rng::stream(seed, &[]);
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if r.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Dropout { a, mask }, &[a])
    }

    /// Rows of `table[V, D]` selected by `ids`, shape `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || ids.iter().any(|&i| i >= st[0]) {
            return shape_err("embedding", st, &[ids.iter().copied().max().unwrap_or(0)]);
        }
        let d = st[1];
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return shape_err("concat", &first, &[axis]);
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return shape_err("concat", &first, s);
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut out = Vec::with_capacity(outer * total * first[axis + 1..].iter().product::<usize>());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.len() / outer.max(1);
                out.extend_from_slice(&v[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return shape_err("slice", &sa, &[axis, start, len]);
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * sa[axis] * inner;
            out.extend_from_slice(&v[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Slice { a, axis, start }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return shape_err("reshape", self.shape(a), shape);
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, &[a]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        let valid = perm.len() == sa.len()
            && perm.iter().all(|&p| p < sa.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return shape_err("permute", &sa, perm);
        }
        let out = permute_data(self.value(a), &sa, perm);
        let shape = perm.iter().map(|&p| sa[p]).collect();
        Ok(self.push(
            shape,
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        ))
    }

    /// Mean squared error, a scalar of shape `[1]`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("mse", self.shape(a), self.shape(b));
        }
        let n = T::from_f64(self.value(a).len() as f64);
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>();
        Ok(self.push(vec![1], vec![s / n], Op::Mse { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<T>();
        self.push(vec![1], vec![s], Op::Sum { a }, &[a])
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let k = nodes[b.0].shape[0];
                let n = nodes[b.0].shape[1];
                let m = nodes[a.0].value.len() / k.max(1);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |da| kernels::matmul_grad_a(g, bv, da, m, k, n));
                acc(*b, &mut |db| kernels::matmul_grad_b(av, g, db, m, k, n));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = &nodes[a.0].shape;
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let trans_b = *trans_b;
                acc(*a, &mut |da| {
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        let dab = &mut da[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            // a[m,k] * b[n,k]^T: da = g * b
                            for i in 0..m {
                                for j in 0..n {
                                    axpy(gb[i * n + j], &bb[j * k..(j + 1) * k], &mut dab[i * k..(i + 1) * k]);
                                }
                            }
                        } else {
                            kernels::matmul_grad_a(gb, bb, dab, m, k, n);
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        let dbb = &mut db[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            // db[n,k] = g^T * a
                            for i in 0..m {
                                for j in 0..n {
                                    axpy(gb[i * n + j], &ab[i * k..(i + 1) * k], &mut dbb[j * k..(j + 1) * k]);
                                }
                            }
                        } else {
                            kernels::matmul_grad_b(ab, gb, dbb, m, k, n);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |da| axpy(T::one(), g, da));
                acc(*b, &mut |db| {
                    let n = db.len().max(1);
                    for chunk in g.chunks_exact(n) {
                        axpy(T::one(), chunk, db);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { a, s } => acc(*a, &mut |da| axpy(*s, g, da)),
            Op::Softmax { a } => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*a, &mut |da| {
                    for r in 0..y.len() / d {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let s = dot(yr, gr);
                        for c in 0..d {
                            da[r * d + c] += yr[c] * (gr[c] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let rows = xhat.len() / d;
                let gv = &nodes[gamma.0].value;
                let inv_d = T::one() / T::from_f64(d as f64);
                acc(*x, &mut |dx| {
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        for c in 0..d {
                            dxhat[c] = gr[c] * gv[c];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
                        let m2 = dot(&dxhat, xr) * inv_d;
                        for c in 0..d {
                            dx[r * d + c] += rstd[r] * (dxhat[c] - m1 - xr[c] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for chunk in g.chunks_exact(d) {
                        axpy(T::one(), chunk, db);
                    }
                });
            }
            Op::Gelu { a } => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * kernels::gelu_grad(av[i]);
                    }
                });
            }
            Op::Dropout { a, mask } => acc(*a, &mut |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * mask[i];
                }
            }),
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                acc(*table, &mut |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        axpy(T::one(), &g[r * d..(r + 1) * d], &mut dt[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let row = g.len() / outer.max(1);
                let mut offset = 0;
                for &p in parts {
                    let chunk = nodes[p.0].value.len() / outer.max(1);
                    acc(p, &mut |dp| {
                        for o in 0..outer {
                            axpy(
                                T::one(),
                                &g[o * row + offset..o * row + offset + chunk],
                                &mut dp[o * chunk..(o + 1) * chunk],
                            );
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { a, axis, start } => {
                let sa = &nodes[a.0].shape;
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let len = node.shape[*axis];
                acc(*a, &mut |da| {
                    for o in 0..outer {
                        let base = o * sa[*axis] * inner + start * inner;
                        axpy(
                            T::one(),
                            &g[o * len * inner..(o + 1) * len * inner],
                            &mut da[base..base + len * inner],
                        );
                    }
                });
            }
            Op::Reshape { a } => acc(*a, &mut |da| axpy(T::one(), g, da)),
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, &node.shape, &inv);
                acc(*a, &mut |da| axpy(T::one(), &back, da));
            }
            Op::Mse { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let scale = g[0] * T::from_f64(2.0 / av.len() as f64);
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += scale * (av[i] - bv[i]);
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..db.len() {
                        db[i] -= scale * (av[i] - bv[i]);
                    }
                });
            }
            Op::Sum { a } => acc(*a, &mut |da| {
                for v in da.iter_mut() {
                    *v += g[0];
                }
            }),
        }
    }
}

/// Gradients from one [`Graph::backward`] sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` is untracked or
    /// does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Gradient of `v`, zeros if it was not reached.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_and_linear_gradient() {
        let mut g = Graph::<f64>::new();
        let eye = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), true);
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let s = g.sum(y);
        let grads = g.backward(s);
        // d sum(A B) / dA[i,p] = sum_j B[p,j]
        assert_eq!(grads.get(eye).unwrap(), &[6.0, 15.0, 6.0, 15.0]);
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[3]));
        let y = g.softmax(x);
        for &v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
        assert!(g.add(a, b).is_err());
        assert!(g.mse(a, b).is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[10], 2.0));
        assert_eq!(g.dropout(x, 0.3, false, 1), x);
        let y = g.dropout(x, 0.5, true, 1);
        assert!(g.value(y).iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn permute_round_trip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let p = permute_data(&data, &[2, 3, 4], &[1, 2, 0]);
        // out[j,k,i] = in[i,j,k]
        assert_eq!(p[0], 0.0);
        assert_eq!(p[1], 12.0);
        assert_eq!(p[2], 1.0);
        let back = permute_data(&p, &[3, 4, 2], &[2, 0, 1]);
        assert_eq!(back, data);
    }

    #[test]
    fn layer_norm_is_finite_for_constant_rows() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[2, 4], 1e6));
        let gamma = g.input(Tensor::full(&[4], 1.0));
        let beta = g.input(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|v| v.is_finite()));
        let big = g.input(Tensor::new(&[3], vec![1e30, -1e30, 0.0]).unwrap());
        let s = g.softmax(big);
        assert!(g.value(s).iter().all(|v| v.is_finite()));
    }
}
