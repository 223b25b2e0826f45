use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::kernels::{gelu, gelu_grad, mm_nn, mm_nt, mm_tn, permute_into};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    /// Every op output is rounded to the nearest `f32`.
    F32,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
        trans_b: bool,
    },
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
        x: Var,
        c: f64,
    },
    Abs {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        in_width: usize,
        start: usize,
        width: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        row: usize,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    CrossEntropySoft {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
        rows: usize,
        q: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

struct Node {
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of executed operations.
///
/// Nodes are appended in execution order, so every node comes after the
/// producers of its inputs and [`Tape::backward`] simply walks the list in
/// reverse. A tape is rebuilt for every forward pass.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
    precision: Precision,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    pub fn new() -> Self {
        Tape {
            params: None,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            precision: Precision::F64,
        }
    }
}

impl<'p> Tape<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            precision: Precision::F64,
        }
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("parameter node without a parameter store").get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The tape node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        assert!(self.params.is_some(), "Tape::param on a tape without parameters");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(self.shape_err(op, a, b));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let b_batched = sb.len() > 2;
        if kb != k || (b_batched && sb[..sb.len() - 2] != sa[..sa.len() - 2]) {
            return Err(self.shape_err(op, a, b));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for t in 0..batch {
                let a_t = &ad[t * m * k..(t + 1) * m * k];
                let b_t = if b_batched { &bd[t * k * n..(t + 1) * k * n] } else { bd };
                let c_t = &mut out[t * m * n..(t + 1) * m * n];
                if trans_b {
                    mm_nt(a_t, b_t, c_t, m, k, n);
                } else {
                    mm_nn(a_t, b_t, c_t, m, k, n);
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
                trans_b,
            },
            rg,
        ))
    }

    /// Matrix product over the last two axes. `a` is `[.., m, k]`; `b` is
    /// either `[k, n]` (shared across the batch) or `[.., k, n]` with the
    /// same leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`Tape::matmul`] with `b` given as `[n, k]` (or `[.., n, k]`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// `b`'s shape must equal `a`'s shape or a suffix of it.
    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(self.shape_err(op, a, b));
        }
        Ok(())
    }

    /// Elementwise sum; `b` is broadcast over `a`'s leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let av = self.value(a);
        let bd = self.value(b).data();
        let nb = bd.len();
        let data = av.data().iter().enumerate().map(|(i, x)| x + bd[i % nb]).collect();
        let shape = av.shape().to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("sub", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Sub { a, b }, rg))
    }

    /// Elementwise product; `b` is broadcast over `a`'s leading axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let av = self.value(a);
        let bd = self.value(b).data();
        let nb = bd.len();
        let data = av.data().iter().enumerate().map(|(i, x)| x * bd[i % nb]).collect();
        let shape = av.shape().to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|y| y * c).collect();
        let shape = v.shape().to_vec();
        let rg = self.requires_grad(x);
        self.push(Tensor::from_parts(shape, data), Op::Scale { x, c }, rg)
    }

    /// `|x|`, with derivative `+1` at zero.
    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|y| y.abs()).collect();
        let shape = v.shape().to_vec();
        let rg = self.requires_grad(x);
        self.push(Tensor::from_parts(shape, data), Op::Abs { x }, rg)
    }

    /// Exact (error-function) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&y| gelu(y)).collect();
        let shape = v.shape().to_vec();
        let rg = self.requires_grad(x);
        self.push(Tensor::from_parts(shape, data), Op::Gelu { x }, rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "softmax",
                index: axis,
                size: shape.len(),
            });
        }
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = v.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(xd[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = libm::exp(xd[base + l * inner] - max);
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= sum;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Softmax over the last axis of `x: [G, Tq, Tk]` in which keys with
    /// `key_mask[g * Tk + j] == false` get probability exactly zero.
    ///
    /// Every group must keep at least one key.
    pub fn masked_softmax(&mut self, x: Var, key_mask: &[bool]) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if shape.len() != 3 || key_mask.len() != shape[0] * shape[2] {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: shape,
                rhs: vec![key_mask.len()],
            });
        }
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "masked_softmax" });
        }
        let (g, tq, tk) = (shape[0], shape[1], shape[2]);
        let xd = v.data();
        let mut out = vec![0.0; xd.len()];
        for gi in 0..g {
            let keep = &key_mask[gi * tk..(gi + 1) * tk];
            if !keep.iter().any(|&k| k) {
                return Err(Error::Length("attention row with every key masked".into()));
            }
            for i in 0..tq {
                let base = (gi * tq + i) * tk;
                let row = &xd[base..base + tk];
                let mut max = f64::NEG_INFINITY;
                for (val, _) in row.iter().zip(keep).filter(|(_, &k)| k) {
                    max = max.max(*val);
                }
                let mut sum = 0.0;
                for j in 0..tk {
                    if keep[j] {
                        let e = libm::exp(row[j] - max);
                        out[base + j] = e;
                        sum += e;
                    }
                }
                for j in 0..tk {
                    if keep[j] {
                        out[base + j] /= sum;
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax {
                x,
                outer: g * tq,
                len: tk,
                inner: 1,
            },
            rg,
        ))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let d = *shape.last().ok_or(Error::Shape {
            op: "layer_norm",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(self.shape_err("layer_norm", x, gamma));
        }
        let xd = v.data();
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for (o, y) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (y - mean) * rs;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = xhat.iter().enumerate().map(|(i, h)| h * g[i % d] + b[i % d]).collect();
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        let mut seen = vec![false; perm.len()];
        if perm.len() != src_shape.len()
            || perm
                .iter()
                .any(|&p| p >= perm.len() || core::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape {
                op: "permute",
                lhs: src_shape,
                rhs: perm.to_vec(),
            });
        }
        let mut out = vec![0.0; self.value(x).numel()];
        permute_into(self.value(x).data(), &src_shape, perm, &mut out);
        let shape = perm.iter().map(|&p| src_shape[p]).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Permute { x, perm: perm.to_vec() },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Index {
                op: "concat",
                index: axis,
                size: base.len(),
            });
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total_axis = 0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(self.shape_err("concat", first, p));
            }
            total_axis += s[axis];
            widths.push(s[axis] * inner);
        }
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: s,
                rhs: vec![axis, start, len],
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let in_width = s[axis] * inner;
        let width = len * inner;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let from = o * in_width + start * inner;
            out.extend_from_slice(&xd[from..from + width]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Slice {
                x,
                outer,
                in_width,
                start: start * inner,
                width,
            },
            rg,
        ))
    }

    /// Rows `ids` of `table: [V, ...]`, giving `[ids.len(), ...]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.is_empty() {
            return Err(Error::Shape {
                op: "gather",
                lhs: s,
                rhs: vec![],
            });
        }
        if ids.is_empty() {
            return Err(Error::Empty("gather"));
        }
        let v = s[0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                op: "gather",
                index: bad,
                size: v,
            });
        }
        let row: usize = s[1..].iter().product();
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * row);
        for &i in ids {
            out.extend_from_slice(&td[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = ids.len();
        let rg = self.requires_grad(table);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
                row,
            },
            rg,
        ))
    }

    /// Embedding lookup; identical to [`Tape::gather`].
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather(table, ids)
    }

    /// Inverted dropout. Identity (the same node) when not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng, training: bool) -> Var {
        if !training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).numel();
        let scale: Vec<f64> = (0..n)
            .map(|_| {
                if keep > 0.0 && rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&scale).map(|(a, s)| a * s).collect();
        let shape = v.shape().to_vec();
        let rg = self.requires_grad(x);
        self.push(Tensor::from_parts(shape, data), Op::Dropout { x, scale }, rg)
    }

    /// Mean over rows of `-Σ_l targets[b,l] · log_softmax(logits)[b,l]`.
    ///
    /// `targets` must have the shape of `logits: [B, q]` (q ≥ 2) with every
    /// row a probability distribution (non-negative, summing to 1 within 1e-9).
    pub fn cross_entropy_soft(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.shape() != s.as_slice() {
            return Err(Error::Shape {
                op: "cross_entropy_soft",
                lhs: s,
                rhs: targets.shape().to_vec(),
            });
        }
        let (rows, q) = (s[0], s[1]);
        if q < 2 {
            return Err(Error::Distribution("need at least two classes".into()));
        }
        let td = targets.data();
        for r in 0..rows {
            let row = &td[r * q..(r + 1) * q];
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Distribution(alloc::format!("row {r} sums to {sum}")));
            }
        }
        let ld = self.value(logits).data();
        if ld.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "cross_entropy_soft",
            });
        }
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &ld[r * q..(r + 1) * q];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (l, &z) in row.iter().enumerate() {
                let e = libm::exp(z - max);
                probs[r * q + l] = e;
                sum += e;
            }
            let log_sum = libm::log(sum);
            let mut loss = 0.0;
            for l in 0..q {
                probs[r * q + l] /= sum;
                let t = td[r * q + l];
                if t != 0.0 {
                    loss += t * ((max - row[l]) + log_sum);
                }
            }
            total += loss;
        }
        let value = total / rows as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: "cross_entropy_soft",
            });
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropySoft {
                logits,
                targets: td.to_vec(),
                probs,
                rows,
                q,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Reverse pass from a one-element `loss`.
    ///
    /// Fails if the loss is not finite.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![1],
            });
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(Var(i), &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            params: self.param_vars.clone(),
        })
    }

    fn backward_node(&self, out: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[out.0];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
                trans_b,
            } => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                if self.requires_grad(a) {
                    let da = self.grad_buf(a, grads);
                    for t in 0..batch {
                        let g_t = &g[t * m * n..(t + 1) * m * n];
                        let b_t = if b_batched { &bd[t * k * n..(t + 1) * k * n] } else { bd };
                        let da_t = &mut da[t * m * k..(t + 1) * m * k];
                        if trans_b {
                            // b_t is [n, k]: dA = dC · B
                            mm_nn(g_t, b_t, da_t, m, n, k);
                        } else {
                            mm_nt(g_t, b_t, da_t, m, n, k);
                        }
                    }
                }
                if self.requires_grad(b) {
                    let db = self.grad_buf(b, grads);
                    for t in 0..batch {
                        let g_t = &g[t * m * n..(t + 1) * m * n];
                        let a_t = &ad[t * m * k..(t + 1) * m * k];
                        let db_t = if b_batched {
                            &mut db[t * k * n..(t + 1) * k * n]
                        } else {
                            &mut db[..]
                        };
                        if trans_b {
                            // dB[n, k] = dCᵀ · A
                            mm_tn(g_t, a_t, db_t, m, n, k);
                        } else {
                            mm_tn(a_t, g_t, db_t, m, k, n);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if self.requires_grad(a) {
                    let da = self.grad_buf(a, grads);
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if self.requires_grad(b) {
                    let db = self.grad_buf(b, grads);
                    let nb = db.len();
                    for (i, x) in g.iter().enumerate() {
                        db[i % nb] += x;
                    }
                }
            }
            &Op::Sub { a, b } => {
                if self.requires_grad(a) {
                    let da = self.grad_buf(a, grads);
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if self.requires_grad(b) {
                    let db = self.grad_buf(b, grads);
                    for (d, x) in db.iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            &Op::Mul { a, b } => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                let nb = bd.len();
                if self.requires_grad(a) {
                    let da = self.grad_buf(a, grads);
                    for (i, (d, x)) in da.iter_mut().zip(g).enumerate() {
                        *d += x * bd[i % nb];
                    }
                }
                if self.requires_grad(b) {
                    let db = self.grad_buf(b, grads);
                    for (i, x) in g.iter().enumerate() {
                        db[i % nb] += x * ad[i];
                    }
                }
            }
            &Op::Scale { x, c } => {
                let dx = self.grad_buf(x, grads);
                for (d, v) in dx.iter_mut().zip(g) {
                    *d += v * c;
                }
            }
            &Op::Abs { x } => {
                let xd = self.value(x).data();
                let dx = self.grad_buf(x, grads);
                for ((d, v), &xv) in dx.iter_mut().zip(g).zip(xd) {
                    *d += if xv >= 0.0 { *v } else { -*v };
                }
            }
            &Op::Gelu { x } => {
                let xd = self.value(x).data();
                let dx = self.grad_buf(x, grads);
                for ((d, v), &xv) in dx.iter_mut().zip(g).zip(xd) {
                    *d += v * gelu_grad(xv);
                }
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = self.value(out).data();
                let dx = self.grad_buf(x, grads);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for l in 0..len {
                            dot += g[base + l * inner] * y[base + l * inner];
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            dx[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.shape(gamma)[0];
                let rows = xhat.len() / d;
                if self.requires_grad(gamma) {
                    let dg = self.grad_buf(gamma, grads);
                    for (i, v) in g.iter().enumerate() {
                        dg[i % d] += v * xhat[i];
                    }
                }
                if self.requires_grad(beta) {
                    let dbt = self.grad_buf(beta, grads);
                    for (i, v) in g.iter().enumerate() {
                        dbt[i % d] += v;
                    }
                }
                if self.requires_grad(x) {
                    let gd = self.value(gamma).data();
                    let dx = self.grad_buf(x, grads);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..d {
                            let v = g[r * d + c] * gd[c];
                            dxhat[c] = v;
                            mean_d += v;
                            mean_dx += v * xhat[r * d + c];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for c in 0..d {
                            dx[r * d + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
                        }
                    }
                }
            }
            &Op::Reshape { x } => {
                let dx = self.grad_buf(x, grads);
                for (d, v) in dx.iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::Permute { x, perm } => {
                let x = *x;
                let out_shape = self.shape(out).to_vec();
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let mut back = vec![0.0; g.len()];
                permute_into(g, &out_shape, &inverse, &mut back);
                let dx = self.grad_buf(x, grads);
                for (d, v) in dx.iter_mut().zip(&back) {
                    *d += v;
                }
            }
            Op::Concat { parts, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.requires_grad(p) {
                        let dp = self.grad_buf(p, grads);
                        for o in 0..*outer {
                            let src = &g[o * row + offset..o * row + offset + w];
                            for (d, v) in dp[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            &Op::Slice {
                x,
                outer,
                in_width,
                start,
                width,
            } => {
                let dx = self.grad_buf(x, grads);
                for o in 0..outer {
                    let dst = &mut dx[o * in_width + start..o * in_width + start + width];
                    for (d, v) in dst.iter_mut().zip(&g[o * width..(o + 1) * width]) {
                        *d += v;
                    }
                }
            }
            Op::Gather { table, ids, row } => {
                let row = *row;
                let dt = self.grad_buf(*table, grads);
                for (j, &i) in ids.iter().enumerate() {
                    for (d, v) in dt[i * row..(i + 1) * row].iter_mut().zip(&g[j * row..(j + 1) * row]) {
                        *d += v;
                    }
                }
            }
            Op::Dropout { x, scale } => {
                let dx = self.grad_buf(*x, grads);
                for ((d, v), s) in dx.iter_mut().zip(g).zip(scale) {
                    *d += v * s;
                }
            }
            Op::CrossEntropySoft {
                logits,
                targets,
                probs,
                rows,
                q,
            } => {
                let c = g[0] / *rows as f64;
                let dl = self.grad_buf(*logits, grads);
                for r in 0..*rows {
                    let tsum: f64 = targets[r * q..(r + 1) * q].iter().sum();
                    for l in 0..*q {
                        let i = r * q + l;
                        dl[i] += c * (tsum * probs[i] - targets[i]);
                    }
                }
            }
            &Op::Sum { x } => {
                let dx = self.grad_buf(x, grads);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
            &Op::Mean { x } => {
                let dx = self.grad_buf(x, grads);
                let c = g[0] / dx.len() as f64;
                for d in dx.iter_mut() {
                    *d += c;
                }
            }
        }
    }

    fn grad_buf<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> &'g mut Vec<f64> {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Tape::input`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to a parameter; `None` if it did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Drops the gradients of parameters not selected by `keep`.
    pub fn retain_params(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        self.params.retain(|id, _| keep(*id));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[0.0, libm::log(3.0)]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_parts(vec![2], vec![0.0, f64::INFINITY]));
        assert!(matches!(tape.softmax(x, 0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape.value(y).data().iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::full(&[3], 4.2));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, g, b, 1e-14).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_primitives() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1], &[0.0]));
        let g = tape.gelu(z);
        assert_eq!(tape.value(g).data(), &[0.0]);

        let x = tape.constant(t(&[3], &[1.0, -2.0, 3.5]));
        let mut rng = crate::rng::seeded(0);
        let y = tape.dropout(x, 0.0, &mut rng, true);
        assert_eq!(tape.value(y), tape.value(x));

        let table = tape.constant(t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let rows = tape.embedding_gather(table, &[2, 0]).unwrap();
        assert_eq!(tape.value(rows).data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(matches!(
            tape.embedding_gather(table, &[3]),
            Err(Error::Index { index: 3, size: 3, .. })
        ));
    }

    #[test]
    fn dropout_scales_kept_units() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1000], 1.0));
        let mut rng = crate::rng::seeded(3);
        let y = tape.dropout(x, 0.25, &mut rng, true);
        let d = tape.value(y).data();
        assert!(d.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
        let kept = d.iter().filter(|&&v| v != 0.0).count();
        assert!((650..850).contains(&kept));
        let z = tape.dropout(x, 0.25, &mut rng, false);
        assert_eq!(z, x);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 4]));
        let target = t(&[1, 4], &[0.1, 0.2, 0.3, 0.4]);
        let l = tape.cross_entropy_soft(logits, &target).unwrap();
        assert!((tape.value(l).item() - libm::log(4.0)).abs() < 1e-12);

        let logits = tape.constant(t(&[1, 2], &[10.0, -10.0]));
        let l = tape.cross_entropy_soft(logits, &t(&[1, 2], &[1.0, 0.0])).unwrap();
        let v = tape.value(l).item();
        // log(1 + e^-20)
        assert!((v - 2.061_153_620_314_381e-9).abs() < 1e-16, "{v}");

        let bad = t(&[1, 2], &[0.6, 0.6]);
        assert!(matches!(
            tape.cross_entropy_soft(logits, &bad),
            Err(Error::Distribution(_))
        ));
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t(&[2, 1], &[7.0, 8.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 7.0, 4.0, 5.0, 6.0, 8.0]);
        let a2 = tape.slice(c, 1, 0, 3).unwrap();
        let b2 = tape.slice(c, 1, 3, 1).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
    }

    #[test]
    fn permute_transposes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.transpose(a).unwrap();
        assert_eq!(tape.shape(b), &[3, 2]);
        assert_eq!(tape.value(b).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 3], &[1.0, 2.0, 50.0, 0.5, 0.5, -3.0]));
        let y = tape.masked_softmax(x, &[true, true, false]).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[2], 0.0);
        assert_eq!(d[5], 0.0);
        assert!((d[0] + d[1] - 1.0).abs() < 1e-15);
        assert!(tape.masked_softmax(x, &[false, false, false]).is_err());
    }

    #[test]
    fn quadratic_grad_check_is_exact() {
        let x = t(&[2], &[1.0, 2.0]);
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");

        let mut tape = Tape::new();
        let v = tape.input(x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(v).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn abs_at_zero_fails_grad_check() {
        let x = t(&[1], &[0.0]);
        let err = grad_check(
            |tape, x| {
                let a = tape.abs(x);
                Ok(tape.sum(a))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-5, "non-smooth point should be reported, got {err}");
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let mut rng = crate::rng::seeded(5);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let av = tape.input(a.clone());
            let bv = tape.input(b.clone());
            let c = tape.matmul(av, bv).unwrap();
            let s = tape.softmax(c, 1).unwrap();
            let g = tape.gelu(s);
            let l = tape.sum(g);
            let grads = tape.backward(l).unwrap();
            (grads.wrt(av).unwrap().to_vec(), grads.wrt(bv).unwrap().to_vec())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(
            a1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            a2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            b1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn f32_precision_rounds_outputs() {
        let mut tape = Tape::new();
        tape.set_precision(Precision::F32);
        let x = tape.constant(t(&[1], &[0.1]));
        let y = tape.scale(x, 3.0);
        assert_eq!(tape.value(y).data()[0], (0.1f64 * 3.0) as f32 as f64);
    }
}
