//! Reverse-mode differentiation tape.
//!
//! Every op appends one node holding its output value and whatever the
//! backward rule needs. Inputs always precede outputs, so backward is a single
//! reverse sweep over the append order.

use crate::engine::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Multiply-accumulate counters collected while recording.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounters {
    /// Dense matrix products (projections, MLPs, reducers, head).
    pub matmul: u64,
    /// Point-to-center cosine similarity dot products.
    pub similarity: u64,
    /// Per-row weighting used by aggregation and dispatch.
    pub weighting: u64,
}

impl MacCounters {
    pub fn total(&self) -> u64 {
        self.matmul + self.similarity + self.weighting
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    AddConst {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Reduce {
        kind: ReduceKind,
        a: Var,
        split: (usize, usize, usize),
    },
    Max {
        a: Var,
        split: (usize, usize, usize),
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Slice {
        a: Var,
        split: (usize, usize, usize),
        start: usize,
        len: usize,
    },
    Reshape {
        a: Var,
    },
    Transpose {
        a: Var,
    },
    GatherRows {
        a: Var,
        index: Vec<usize>,
    },
    ScatterRows {
        a: Var,
        index: Vec<usize>,
    },
    ScaleRows {
        a: Var,
        w: Var,
    },
    ColAffine {
        a: Var,
        scale: Var,
        shift: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GroupedCosine {
        x: Var,
        centers: Var,
        group: Vec<usize>,
        c: usize,
        xnorm: Vec<T>,
        cnorm: Vec<T>,
        eps: T,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only differentiation graph.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    counters: MacCounters,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let rows = shape.first().copied().unwrap_or(1);
    let cols = shape.iter().skip(1).product();
    (rows, cols)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            counters: MacCounters::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counters(&self) -> MacCounters {
        self.counters
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Index(format!("unknown variable {}", v.0)));
        }
        Ok(())
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.counters.matmul += (m * k * n) as u64;
        let value = Tensor::new(&[m, n], out)?;
        self.push("matmul", value, &[a, b], Op::MatMul { a, b })
    }

    /// `x·w + b` with `b` added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.value(x).dims2()?;
        let (k2, n) = self.value(w).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "linear input width {k} does not match weight {k2}x{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != n {
                return Err(Error::Dimension(format!(
                    "bias has {} elements, expected {n}",
                    bias.numel()
                )));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias.data());
            }
        }
        T::gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, b.is_some());
        self.counters.matmul += (m * k * n) as u64;
        let value = Tensor::new(&[m, n], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", value, &inputs, Op::Linear { x, w, b })
    }

    // ----- elementwise ----------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(Error::Dimension(format!(
                "{kind:?} needs equal shapes or a scalar operand, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let ia = |i: usize| if da.len() == 1 { da[0] } else { da[i] };
        let ib = |i: usize| if db.len() == 1 { db[0] } else { db[i] };
        let f = match kind {
            BinaryKind::Add => |x: T, y: T| x + y,
            BinaryKind::Sub => |x: T, y: T| x - y,
            BinaryKind::Mul => |x: T, y: T| x * y,
            BinaryKind::Div => |x: T, y: T| x / y,
        };
        let out = (0..n).map(|i| f(ia(i), ib(i))).collect();
        let value = Tensor::new(&shape, out)?;
        self.push("binary", value, &[a, b], Op::Binary { kind, a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).map(|v| v * factor);
        self.push("scale", value, &[a], Op::Scale { a, factor })
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|v| v + c);
        self.push("add_scalar", value, &[a], Op::AddConst { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push("sigmoid", value, &[a], Op::Sigmoid { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu);
        self.push("gelu", value, &[a], Op::Gelu { a })
    }

    // ----- reductions -----------------------------------------------------

    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(a);
        let (split, shape) = match axis {
            Some(ax) => (split_axis(t.shape(), ax)?, without_axis(t.shape(), ax)),
            None => ((1, t.numel(), 1), vec![1]),
        };
        let (outer, len, inner) = split;
        if len == 0 {
            return Err(Error::Domain("reduction over an empty axis".into()));
        }
        let d = t.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        if kind == ReduceKind::Mean {
            let inv = T::one() / T::of(len as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(&shape, out)?;
        self.push("reduce", value, &[a], Op::Reduce { kind, a, split })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, None)
    }

    /// Maximum along `axis` plus the arg-max; ties resolve to the lowest index.
    pub fn max_with_argmax(&mut self, a: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let t = self.value(a);
        let split = split_axis(t.shape(), axis)?;
        let (outer, len, inner) = split;
        if len == 0 {
            return Err(Error::Domain("max over an empty axis".into()));
        }
        let d = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = d[o * len * inner + i];
                for l in 1..len {
                    let v = d[(o * len + l) * inner + i];
                    if v > best_v {
                        best = l;
                        best_v = v;
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
        let value = Tensor::new(&without_axis(t.shape(), axis), out)?;
        let var = self.push(
            "max_with_argmax",
            value,
            &[a],
            Op::Max {
                a,
                split,
                argmax: argmax.clone(),
            },
        )?;
        Ok((var, argmax))
    }

    // ----- restructuring --------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut lens = Vec::with_capacity(inputs.len());
        for &v in inputs {
            self.check_var(v)?;
            let s = self.value(v).shape();
            let same_rank = s.len() == base.len();
            let others_match = same_rank
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !others_match {
                return Err(Error::Dimension(format!(
                    "concat along {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&lens) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        self.push(
            "concat",
            value,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner,
                lens,
            },
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let split = split_axis(t.shape(), axis)?;
        let (outer, alen, inner) = split;
        if start + len > alen {
            return Err(Error::Index(format!(
                "slice {start}..{} exceeds axis length {alen}",
                start + len
            )));
        }
        let d = t.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        self.push("slice", value, &[a], Op::Slice { a, split, start, len })
    }

    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        let alen = self.value(a).shape().get(axis).copied().unwrap_or(0);
        if start != alen {
            return Err(Error::Dimension(format!(
                "split sizes sum to {start}, axis has {alen}"
            )));
        }
        Ok(parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, &[a], Op::Reshape { a })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let d = t.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        self.push("transpose", value, &[a], Op::Transpose { a })
    }

    /// Rows `index[0], index[1], …` of `a` (first axis).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = rows_cols(t.shape());
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::Index(format!("row {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        let value = Tensor::new(&shape, out)?;
        self.push(
            "gather_rows",
            value,
            &[a],
            Op::GatherRows {
                a,
                index: index.to_vec(),
            },
        )
    }

    /// Adds row `r` of `a` into output row `index[r]`; the output has `rows` rows.
    pub fn scatter_rows(&mut self, a: Var, index: &[usize], rows: usize) -> Result<Var> {
        let t = self.value(a);
        let (arows, cols) = rows_cols(t.shape());
        if index.len() != arows {
            return Err(Error::Dimension(format!(
                "scatter index has {} entries for {arows} rows",
                index.len()
            )));
        }
        let mut out = vec![T::zero(); rows * cols];
        for (r, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(Error::Index(format!("target row {i} out of range for {rows} rows")));
            }
            let src = &t.data()[r * cols..(r + 1) * cols];
            for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                *o += v;
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows;
        let value = Tensor::new(&shape, out)?;
        self.push(
            "scatter_rows",
            value,
            &[a],
            Op::ScatterRows {
                a,
                index: index.to_vec(),
            },
        )
    }

    /// Multiplies row `r` of `a` by `w[r]`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        let (rows, cols) = rows_cols(ta.shape());
        if tw.numel() != rows {
            return Err(Error::Dimension(format!(
                "row weights have {} entries for {rows} rows",
                tw.numel()
            )));
        }
        let mut out = ta.data().to_vec();
        for (row, &s) in out.chunks_mut(cols.max(1)).zip(tw.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::new(ta.shape(), out)?;
        self.counters.weighting += (rows * cols) as u64;
        self.push("scale_rows", value, &[a, w], Op::ScaleRows { a, w })
    }

    /// `a[r, j] * scale[j] + shift[j]` for a matrix `a`.
    pub fn col_affine(&mut self, a: Var, scale: Var, shift: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        let (ts, tt) = (self.value(scale), self.value(shift));
        if ts.numel() != cols || tt.numel() != cols {
            return Err(Error::Dimension(format!(
                "column affine needs {cols} scales/shifts, got {} and {}",
                ts.numel(),
                tt.numel()
            )));
        }
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(cols) {
            for ((v, &s), &t) in row.iter_mut().zip(ts.data()).zip(tt.data()) {
                *v = *v * s + t;
            }
        }
        let value = Tensor::new(&[rows, cols], out)?;
        self.push("col_affine", value, &[a, scale, shift], Op::ColAffine { a, scale, shift })
    }

    // ----- fused layers ---------------------------------------------------

    /// Normalizes each row (last axis) per channel group, then applies the affine map.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let t = self.value(x);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| Error::Dimension("group_norm on a rank-0 tensor".into()))?;
        if groups == 0 || d % groups != 0 {
            return Err(Error::Config(format!(
                "{d} channels are not divisible into {groups} groups"
            )));
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::Dimension(format!("group_norm affine params must have {d} entries")));
        }
        let gsize = d / groups;
        let rows = t.numel() / d.max(1);
        let mut xhat = vec![T::zero(); t.numel()];
        let mut rstd = vec![T::zero(); rows * groups];
        let inv = T::one() / T::of(gsize as f64);
        for r in 0..rows {
            for g in 0..groups {
                let off = r * d + g * gsize;
                let src = &t.data()[off..off + gsize];
                let mean = src.iter().copied().sum::<T>() * inv;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r * groups + g] = rs;
                for (o, &v) in xhat[off..off + gsize].iter_mut().zip(src) {
                    *o = (v - mean) * rs;
                }
            }
        }
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(gm).zip(bt).map(|((&v, &g), &b)| v * g + b))
            .collect();
        let value = Tensor::new(t.shape(), out)?;
        self.push(
            "group_norm",
            value,
            &[x, gamma, beta],
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
        )
    }

    /// Cosine similarity of every row of `x` against the `c` center rows of its group.
    ///
    /// Row `q` of `x` belongs to group `group[q]`, whose centers are rows
    /// `group[q]*c .. group[q]*c + c` of `centers`. Output is `rows(x) × c`.
    pub fn grouped_cosine(&mut self, x: Var, centers: Var, group: &[usize], c: usize, eps: T) -> Result<Var> {
        let (q, e) = self.value(x).dims2()?;
        let (nc, e2) = self.value(centers).dims2()?;
        if e != e2 {
            return Err(Error::Dimension(format!(
                "point width {e} differs from center width {e2}"
            )));
        }
        if group.len() != q || c == 0 || nc % c != 0 {
            return Err(Error::Dimension(format!(
                "grouping of {} rows with {c} centers per group over {nc} centers is inconsistent",
                group.len()
            )));
        }
        let groups = nc / c;
        let (xd, cd) = (self.value(x).data(), self.value(centers).data());
        let row_norm = |row: &[T]| row.iter().map(|&v| v * v).sum::<T>().sqrt();
        let xnorm: Vec<T> = xd.chunks(e).map(row_norm).collect();
        let cnorm: Vec<T> = cd.chunks(e).map(row_norm).collect();
        let mut out = vec![T::zero(); q * c];
        for (i, &g) in group.iter().enumerate() {
            if g >= groups {
                return Err(Error::Index(format!("group {g} out of range for {groups} groups")));
            }
            let xi = &xd[i * e..(i + 1) * e];
            let nx = xnorm[i].max(eps);
            for j in 0..c {
                let cj = g * c + j;
                let crow = &cd[cj * e..(cj + 1) * e];
                let dot: T = xi.iter().zip(crow).map(|(&a, &b)| a * b).sum();
                let s = dot / (nx * cnorm[cj].max(eps));
                out[i * c + j] = s.max(-T::one()).min(T::one());
            }
        }
        self.counters.similarity += (q * c * e) as u64;
        let value = Tensor::new(&[q, c], out)?;
        self.push(
            "grouped_cosine",
            value,
            &[x, centers],
            Op::GroupedCosine {
                x,
                centers,
                group: group.to_vec(),
                c,
                xnorm,
                cnorm,
                eps,
            },
        )
    }

    /// Mean softmax cross-entropy of `logits` (batch × classes) against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(Error::Dimension(format!("{} labels for batch of {b}", labels.len())));
        }
        let d = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Index(format!("label {y} out of range for {k} classes")));
            }
            let row = &d[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - mx).exp() / z;
            }
            loss += z.ln() + mx - row[y];
        }
        let value = Tensor::scalar(loss / T::of(b as f64));
        self.push(
            "cross_entropy",
            value,
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check_var(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) if self.nodes[i].requires_grad => Some(g),
                _ => None,
            })
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:block) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let mut buf = grads[v.0]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); nodes[v.0].value.numel()]);
                    {
                        let $g: &mut Vec<T> = &mut buf;
                        $body
                    }
                    grads[v.0] = Some(buf);
                }
            }};
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                with_grad!(*a, |g| { T::gemm(m, n, k, dy, false, val(*b), true, g, true); });
                with_grad!(*b, |g| { T::gemm(k, m, n, val(*a), true, dy, false, g, true); });
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let n = nodes[w.0].value.shape()[1];
                with_grad!(*x, |g| { T::gemm(m, n, k, dy, false, val(*w), true, g, true); });
                with_grad!(*w, |g| { T::gemm(k, m, n, val(*x), true, dy, false, g, true); });
                if let Some(b) = b {
                    with_grad!(*b, |g| {
                        for row in dy.chunks(n) {
                            for (gv, &d) in g.iter_mut().zip(row) {
                                *gv += d;
                            }
                        }
                    });
                }
            }
            Op::Binary { kind, a, b } => {
                let (da, db) = (val(*a), val(*b));
                let ia = |i: usize| if da.len() == 1 { da[0] } else { da[i] };
                let ib = |i: usize| if db.len() == 1 { db[0] } else { db[i] };
                let acc = |g: &mut Vec<T>, i: usize, v: T| {
                    if g.len() == 1 {
                        g[0] += v;
                    } else {
                        g[i] += v;
                    }
                };
                with_grad!(*a, |g| {
                    for (i, &d) in dy.iter().enumerate() {
                        let v = match kind {
                            BinaryKind::Add | BinaryKind::Sub => d,
                            BinaryKind::Mul => d * ib(i),
                            BinaryKind::Div => d / ib(i),
                        };
                        acc(g, i, v);
                    }
                });
                with_grad!(*b, |g| {
                    for (i, &d) in dy.iter().enumerate() {
                        let v = match kind {
                            BinaryKind::Add => d,
                            BinaryKind::Sub => -d,
                            BinaryKind::Mul => d * ia(i),
                            BinaryKind::Div => -d * ia(i) / (ib(i) * ib(i)),
                        };
                        acc(g, i, v);
                    }
                });
            }
            Op::Scale { a, factor } => {
                with_grad!(*a, |g| {
                    for (gv, &d) in g.iter_mut().zip(dy) {
                        *gv += d * *factor;
                    }
                });
            }
            Op::AddConst { a } | Op::Reshape { a } => {
                with_grad!(*a, |g| {
                    for (gv, &d) in g.iter_mut().zip(dy) {
                        *gv += d;
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                with_grad!(*a, |g| {
                    for ((gv, &d), &s) in g.iter_mut().zip(dy).zip(y) {
                        *gv += d * s * (T::one() - s);
                    }
                });
            }
            Op::Gelu { a } => {
                let x = val(*a);
                with_grad!(*a, |g| {
                    for ((gv, &d), &xv) in g.iter_mut().zip(dy).zip(x) {
                        *gv += d * gelu_grad(xv);
                    }
                });
            }
            Op::Reduce { kind, a, split } => {
                let (outer, len, inner) = *split;
                let f = match kind {
                    ReduceKind::Sum => T::one(),
                    ReduceKind::Mean => T::one() / T::of(len as f64),
                };
                with_grad!(*a, |g| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut g[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (gv, &d) in dst.iter_mut().zip(&dy[o * inner..(o + 1) * inner]) {
                                *gv += d * f;
                            }
                        }
                    }
                });
            }
            Op::Max { a, split, argmax } => {
                let (_, len, inner) = *split;
                with_grad!(*a, |g| {
                    for (j, (&d, &l)) in dy.iter().zip(argmax).enumerate() {
                        let (o, i) = (j / inner, j % inner);
                        g[(o * len + l) * inner + i] += d;
                    }
                });
            }
            Op::Concat {
                inputs,
                outer,
                inner,
                lens,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&v, &len) in inputs.iter().zip(lens) {
                    with_grad!(v, |g| {
                        for o in 0..*outer {
                            let src = &dy[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (gv, &d) in g[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *gv += d;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { a, split, start, len } => {
                let (outer, alen, inner) = *split;
                with_grad!(*a, |g| {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        let src = &dy[o * len * inner..(o + 1) * len * inner];
                        for (gv, &d) in g[base..base + len * inner].iter_mut().zip(src) {
                            *gv += d;
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                with_grad!(*a, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[j * r + i];
                        }
                    }
                });
            }
            Op::GatherRows { a, index } => {
                let cols = rows_cols(nodes[a.0].value.shape()).1;
                with_grad!(*a, |g| {
                    for (r, &i) in index.iter().enumerate() {
                        let src = &dy[r * cols..(r + 1) * cols];
                        for (gv, &d) in g[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                            *gv += d;
                        }
                    }
                });
            }
            Op::ScatterRows { a, index } => {
                let cols = rows_cols(nodes[a.0].value.shape()).1;
                with_grad!(*a, |g| {
                    for (r, &i) in index.iter().enumerate() {
                        let src = &dy[i * cols..(i + 1) * cols];
                        for (gv, &d) in g[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                            *gv += d;
                        }
                    }
                });
            }
            Op::ScaleRows { a, w } => {
                let (rows, cols) = rows_cols(nodes[a.0].value.shape());
                let (ad, wd) = (val(*a), val(*w));
                with_grad!(*a, |g| {
                    for r in 0..rows {
                        let s = wd[r];
                        for (gv, &d) in g[r * cols..(r + 1) * cols].iter_mut().zip(&dy[r * cols..(r + 1) * cols]) {
                            *gv += d * s;
                        }
                    }
                });
                with_grad!(*w, |g| {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        g[r] += dy[span.clone()].iter().zip(&ad[span]).map(|(&d, &x)| d * x).sum::<T>();
                    }
                });
            }
            Op::ColAffine { a, scale, shift } => {
                let cols = nodes[a.0].value.shape()[1];
                let (ad, sd) = (val(*a), val(*scale));
                with_grad!(*a, |g| {
                    for (i, (gv, &d)) in g.iter_mut().zip(dy).enumerate() {
                        *gv += d * sd[i % cols];
                    }
                });
                with_grad!(*scale, |g| {
                    for (i, (&d, &x)) in dy.iter().zip(ad).enumerate() {
                        g[i % cols] += d * x;
                    }
                });
                with_grad!(*shift, |g| {
                    for (i, &d) in dy.iter().enumerate() {
                        g[i % cols] += d;
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let d = *nodes[x.0].value.shape().last().unwrap_or(&1);
                let gsize = d / groups;
                let gm = val(*gamma);
                with_grad!(*gamma, |g| {
                    for (i, (&dv, &xh)) in dy.iter().zip(xhat).enumerate() {
                        g[i % d] += dv * xh;
                    }
                });
                with_grad!(*beta, |g| {
                    for (i, &dv) in dy.iter().enumerate() {
                        g[i % d] += dv;
                    }
                });
                with_grad!(*x, |g| {
                    let inv = T::one() / T::of(gsize as f64);
                    let rows = dy.len() / d.max(1);
                    let mut dxhat = vec![T::zero(); gsize];
                    for r in 0..rows {
                        for grp in 0..*groups {
                            let off = r * d + grp * gsize;
                            for k in 0..gsize {
                                dxhat[k] = dy[off + k] * gm[grp * gsize + k];
                            }
                            let xh = &xhat[off..off + gsize];
                            let m1 = dxhat.iter().copied().sum::<T>() * inv;
                            let m2 = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv;
                            let rs = rstd[r * groups + grp];
                            for k in 0..gsize {
                                g[off + k] += rs * (dxhat[k] - m1 - xh[k] * m2);
                            }
                        }
                    }
                });
            }
            Op::GroupedCosine {
                x,
                centers,
                group,
                c,
                xnorm,
                cnorm,
                eps,
            } => {
                let e = nodes[x.0].value.shape()[1];
                let (xd, cd) = (val(*x), val(*centers));
                // Unclamped similarity; clamping only absorbs rounding.
                let raw = |i: usize, cj: usize| -> T {
                    let dot: T = xd[i * e..(i + 1) * e]
                        .iter()
                        .zip(&cd[cj * e..(cj + 1) * e])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    dot / (xnorm[i].max(*eps) * cnorm[cj].max(*eps))
                };
                with_grad!(*x, |g| {
                    for (i, &grp) in group.iter().enumerate() {
                        let nx = xnorm[i].max(*eps);
                        let x_active = xnorm[i] > *eps;
                        for j in 0..*c {
                            let cj = grp * c + j;
                            let d = dy[i * c + j];
                            if d == T::zero() {
                                continue;
                            }
                            let nc = cnorm[cj].max(*eps);
                            let s = raw(i, cj);
                            for k in 0..e {
                                let mut v = cd[cj * e + k] / (nx * nc);
                                if x_active {
                                    v -= s * xd[i * e + k] / (nx * nx);
                                }
                                g[i * e + k] += d * v;
                            }
                        }
                    }
                });
                with_grad!(*centers, |g| {
                    for (i, &grp) in group.iter().enumerate() {
                        let nx = xnorm[i].max(*eps);
                        for j in 0..*c {
                            let cj = grp * c + j;
                            let d = dy[i * c + j];
                            if d == T::zero() {
                                continue;
                            }
                            let nc = cnorm[cj].max(*eps);
                            let c_active = cnorm[cj] > *eps;
                            let s = raw(i, cj);
                            for k in 0..e {
                                let mut v = xd[i * e + k] / (nx * nc);
                                if c_active {
                                    v -= s * cd[cj * e + k] / (nc * nc);
                                }
                                g[cj * e + k] += d * v;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = nodes[logits.0].value.shape()[1];
                let b = labels.len();
                let f = dy[0] / T::of(b as f64);
                with_grad!(*logits, |g| {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            g[i * k + j] += f * (probs[i * k + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// Gradients of a scalar loss with respect to trainable leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; leaves the loss does not depend on get zeros.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches its node shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
