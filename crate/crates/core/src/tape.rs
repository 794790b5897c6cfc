//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass in order. Each
//! recorded op keeps the identities of its inputs and enough context to run
//! its backward rule. [`Tape::backward`] walks the records once, in reverse,
//! and accumulates gradients for every named parameter leaf into a
//! [`GradientSet`].
//!
//! The op set is exactly what a small transformer encoder with attentive
//! pooling and the distillation losses needs. Backward rules are written as
//! plain loops so each one can be audited against its math.
//!
//! Gradient accumulation is explicit: leaf gradients persist across repeated
//! `backward` calls on the same tape and are only cleared with a new tape.
//! That is what lets a joint training step run one backward pass per loss and
//! read off the summed gradient on shared parameters.

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

/// Named map from parameter identity to gradient tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<String, Tensor>,
}

impl GradientSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.grads.keys()
    }

    /// Subset of entries whose name starts with `prefix`.
    pub fn restrict(&self, prefix: &str) -> GradientSet {
        let grads = self
            .grads
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        GradientSet { grads }
    }

    /// Keep entries whose name matches the predicate.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> GradientSet {
        let grads = self
            .grads
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        GradientSet { grads }
    }

    /// Elementwise sum; both sets must agree on the shapes of shared names.
    pub fn add(&self, other: &GradientSet) -> Result<GradientSet> {
        let mut out = self.clone();
        for (name, grad) in other.iter() {
            match out.grads.get_mut(name) {
                None => {
                    out.grads.insert(name.clone(), grad.clone());
                }
                Some(existing) => {
                    if existing.shape() != grad.shape() {
                        return Err(CoreError::ShapeMismatch {
                            op: "gradient_set_add",
                            lhs: existing.shape().to_vec(),
                            rhs: grad.shape().to_vec(),
                        });
                    }
                    for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                        *a += b;
                    }
                }
            }
        }
        Ok(out)
    }

    /// L2 norm over all entries whose name starts with `prefix`.
    pub fn norm(&self, prefix: &str) -> f64 {
        let ss: f64 = self
            .grads
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v * v)
            .sum();
        libm::sqrt(ss)
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }
}

impl FromIterator<(String, Tensor)> for GradientSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        GradientSet {
            grads: iter.into_iter().collect(),
        }
    }
}

enum Op {
    Leaf,
    Add { a: Var, b: Var },
    AddScalar { a: Var },
    Scale { a: Var, c: f64 },
    Mul { a: Var, b: Var },
    SumVars { inputs: Vec<Var> },
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    MatVec { m: Var, v: Var },
    VecMat { v: Var, m: Var },
    Dot { a: Var, b: Var },
    AddRow { m: Var, row: Var },
    WeightedSumRows { w: Var, m: Var },
    StackRows { rows: Vec<Var> },
    StackScalars { xs: Vec<Var> },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    Softmax { x: Var, axis: usize },
    MaskedSoftmax { x: Var, mask: Vec<bool> },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f64, f64)> },
    Gelu { x: Var },
    Tanh { x: Var },
    Gather { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Sum { x: Var },
    Mean { x: Var },
    Mse { a: Var, b: Var },
    CeLogits { logits: Var, target: Var },
    BceLogit { score: Var, label: f64 },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Ordered record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    accum: BTreeMap<String, Vec<f64>>,
}

fn gelu_tanh(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + libm::tanh(u))
}

fn gelu_tanh_deriv(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = libm::tanh(u);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_CUBIC: f64 = 0.044715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over the strided run `base + k*stride`.
fn softmax_run(data: &[f64], out: &mut [f64], base: usize, stride: usize, n: usize) {
    let mut max = f64::NEG_INFINITY;
    for k in 0..n {
        max = max.max(data[base + k * stride]);
    }
    let mut sum = 0.0;
    for k in 0..n {
        let e = libm::exp(data[base + k * stride] - max);
        out[base + k * stride] = e;
        sum += e;
    }
    for k in 0..n {
        out[base + k * stride] /= sum;
    }
}

/// Log-softmax of a contiguous vector, max-subtracted.
fn log_softmax_vec(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = libm::log(x.iter().map(|v| libm::exp(v - max)).sum::<f64>());
    x.iter().map(|v| v - max - lse).collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value recorded on tape");
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Register a differentiable leaf under a unique name.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(CoreError::Contract(format!(
                "parameter `{name}` registered twice on one tape"
            )));
        }
        let var = self.push(value.clone(), true, Op::Leaf);
        self.params.insert(name.to_string(), var);
        Ok(var)
    }

    /// Record a non-differentiable leaf.
    pub fn input(&mut self, value: &Tensor) -> Var {
        self.push(value.clone(), false, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Copy of `v`'s value that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Plain tensor copy of the recorded value.
    pub fn materialize(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(CoreError::ShapeMismatch {
                op: op_name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Add { a, b }))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].value.data().iter().map(|x| x + c).collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(value, needs, Op::AddScalar { a })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].value.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(value, needs, Op::Scale { a, c })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Mul { a, b }))
    }

    /// Elementwise sum of same-shaped vars.
    pub fn sum_vars(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| {
            CoreError::Contract("sum_vars needs at least one input".to_string())
        })?;
        let shape = self.nodes[first.0].value.shape().to_vec();
        let mut data = vec![0.0; self.nodes[first.0].value.len()];
        let mut needs = false;
        for &v in inputs {
            if self.nodes[v.0].value.shape() != shape.as_slice() {
                return Err(CoreError::ShapeMismatch {
                    op: "sum_vars",
                    lhs: shape,
                    rhs: self.nodes[v.0].value.shape().to_vec(),
                });
            }
            for (acc, x) in data.iter_mut().zip(self.nodes[v.0].value.data()) {
                *acc += x;
            }
            needs |= self.needs(v);
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            needs,
            Op::SumVars {
                inputs: inputs.to_vec(),
            },
        ))
    }

    fn matmul_dims(&self, op: &'static str, a: Var, b: Var, bt: bool) -> Result<(usize, usize, usize)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(CoreError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k) = (ta.rows(), ta.cols());
        let (bk, n) = if bt {
            (tb.cols(), tb.rows())
        } else {
            (tb.rows(), tb.cols())
        };
        if k != bk {
            return Err(CoreError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok((m, k, n))
    }

    /// `a[m,k] * b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = self.matmul_dims("matmul", a, b, false)?;
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += aip * db[p * n + j];
                }
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::MatMul { a, b }))
    }

    /// `a[m,k] * transpose(b[n,k])`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = self.matmul_dims("matmul_nt", a, b, true)?;
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += da[i * k + p] * db[j * k + p];
                }
                out[i * n + j] = s;
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::MatMulNT { a, b }))
    }

    /// `m[r,c] * v[c]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        if tm.rank() != 2 || tv.rank() != 1 || tm.cols() != tv.len() {
            return Err(CoreError::ShapeMismatch {
                op: "matvec",
                lhs: tm.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let (r, c) = (tm.rows(), tm.cols());
        let out = (0..r)
            .map(|i| {
                (0..c)
                    .map(|j| tm.data()[i * c + j] * tv.data()[j])
                    .sum::<f64>()
            })
            .collect();
        let value = Tensor::vector(out);
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push(value, needs, Op::MatVec { m, v }))
    }

    /// `v[c] * m[c,n]`.
    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var> {
        let (tv, tm) = (&self.nodes[v.0].value, &self.nodes[m.0].value);
        if tv.rank() != 1 || tm.rank() != 2 || tv.len() != tm.rows() {
            return Err(CoreError::ShapeMismatch {
                op: "vecmat",
                lhs: tv.shape().to_vec(),
                rhs: tm.shape().to_vec(),
            });
        }
        let (c, n) = (tm.rows(), tm.cols());
        let mut out = vec![0.0; n];
        for i in 0..c {
            let vi = tv.data()[i];
            if vi == 0.0 {
                continue;
            }
            for j in 0..n {
                out[j] += vi * tm.data()[i * n + j];
            }
        }
        let value = Tensor::vector(out);
        let needs = self.needs(v) || self.needs(m);
        Ok(self.push(value, needs, Op::VecMat { v, m }))
    }

    /// Inner product of two equal-length vectors; scalar output.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 1 || tb.rank() != 1 || ta.len() != tb.len() {
            return Err(CoreError::ShapeMismatch {
                op: "dot",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s), needs, Op::Dot { a, b }))
    }

    /// Matrix plus a row vector broadcast over every row.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (tm, tr) = (&self.nodes[m.0].value, &self.nodes[row.0].value);
        if tm.rank() != 2 || tr.rank() != 1 || tm.cols() != tr.len() {
            return Err(CoreError::ShapeMismatch {
                op: "add_row",
                lhs: tm.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let (r, c) = (tm.rows(), tm.cols());
        let mut data = tm.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += tr.data()[j];
            }
        }
        let value = Tensor::matrix(r, c, data)?;
        let needs = self.needs(m) || self.needs(row);
        Ok(self.push(value, needs, Op::AddRow { m, row }))
    }

    /// Weighted sum of matrix rows: `sum_i w[i] * m[i, :]`.
    pub fn weighted_sum_rows(&mut self, w: Var, m: Var) -> Result<Var> {
        let (tw, tm) = (&self.nodes[w.0].value, &self.nodes[m.0].value);
        if tw.rank() != 1 || tm.rank() != 2 || tw.len() != tm.rows() {
            return Err(CoreError::ShapeMismatch {
                op: "weighted_sum_rows",
                lhs: tw.shape().to_vec(),
                rhs: tm.shape().to_vec(),
            });
        }
        let (r, c) = (tm.rows(), tm.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            let wi = tw.data()[i];
            for j in 0..c {
                out[j] += wi * tm.data()[i * c + j];
            }
        }
        let value = Tensor::vector(out);
        let needs = self.needs(w) || self.needs(m);
        Ok(self.push(value, needs, Op::WeightedSumRows { w, m }))
    }

    /// Stack equal-length vectors as matrix rows.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or_else(|| {
            CoreError::Contract("stack_rows needs at least one row".to_string())
        })?;
        let c = self.nodes[first.0].value.len();
        let mut data = Vec::with_capacity(rows.len() * c);
        let mut needs = false;
        for &v in rows {
            let t = &self.nodes[v.0].value;
            if t.rank() != 1 || t.len() != c {
                return Err(CoreError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![c],
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
            needs |= self.needs(v);
        }
        let value = Tensor::matrix(rows.len(), c, data)?;
        Ok(self.push(value, needs, Op::StackRows { rows: rows.to_vec() }))
    }

    /// Collect scalars into a vector.
    pub fn stack_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(xs.len());
        let mut needs = false;
        for &v in xs {
            let t = &self.nodes[v.0].value;
            if !t.is_scalar() {
                return Err(CoreError::Contract(
                    "stack_scalars expects scalar inputs".to_string(),
                ));
            }
            data.push(t.item());
            needs |= self.needs(v);
        }
        let value = Tensor::vector(data);
        Ok(self.push(value, needs, Op::StackScalars { xs: xs.to_vec() }))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 || end > t.cols() || start >= end {
            return Err(CoreError::Contract(format!(
                "slice_cols [{start}, {end}) out of bounds for shape {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.rows(), t.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + end]);
        }
        let value = Tensor::matrix(r, w, data)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::SliceCols { x, start }))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| {
            CoreError::Contract("concat_cols needs at least one part".to_string())
        })?;
        let r = self.nodes[first.0].value.rows();
        let total: usize = parts.iter().map(|v| self.nodes[v.0].value.cols()).sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        let mut needs = false;
        for &v in parts {
            let t = &self.nodes[v.0].value;
            if t.rank() != 2 || t.rows() != r {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![r],
                    rhs: t.shape().to_vec(),
                });
            }
            let c = t.cols();
            for i in 0..r {
                data[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            offset += c;
            needs |= self.needs(v);
        }
        let value = Tensor::matrix(r, total, data)?;
        Ok(self.push(
            value,
            needs,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Softmax along `axis`, max-subtracted for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() > 2 {
            return Err(CoreError::Contract(format!(
                "softmax supports rank 0..=2, got {}",
                t.rank()
            )));
        }
        if axis >= t.rank().max(1) {
            return Err(CoreError::Contract(format!(
                "softmax axis {axis} out of range for rank {}",
                t.rank()
            )));
        }
        let mut out = vec![0.0; t.len()];
        for (base, stride, n) in softmax_runs(t.shape(), axis) {
            softmax_run(t.data(), &mut out, base, stride, n);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::Softmax { x, axis }))
    }

    /// Softmax along the last axis where only unmasked entries participate;
    /// masked entries get probability exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let width = *t.shape().last().unwrap_or(&1);
        if mask.len() != width {
            return Err(CoreError::ShapeMismatch {
                op: "masked_softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(CoreError::Input(
                "masked_softmax: all positions masked".to_string(),
            ));
        }
        let runs = t.len() / width;
        let mut out = vec![0.0; t.len()];
        for r in 0..runs {
            let base = r * width;
            let mut max = f64::NEG_INFINITY;
            for (j, &keep) in mask.iter().enumerate() {
                if keep {
                    max = max.max(t.data()[base + j]);
                }
            }
            let mut sum = 0.0;
            for (j, &keep) in mask.iter().enumerate() {
                if keep {
                    let e = libm::exp(t.data()[base + j] - max);
                    out[base + j] = e;
                    sum += e;
                }
            }
            for (j, &keep) in mask.iter().enumerate() {
                if keep {
                    out[base + j] /= sum;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            needs,
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Per-row normalization to zero mean and unit variance, then affine
    /// scale and shift. Rank-1 input is treated as a single row.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let width = *t.shape().last().unwrap_or(&0);
        let (tg, tb) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if tg.len() != width || tb.len() != width || width == 0 {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = t.len() / width;
        let mut out = vec![0.0; t.len()];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let sigma = libm::sqrt(var + eps);
            for j in 0..width {
                let xhat = if sigma == 0.0 { 0.0 } else { (row[j] - mean) / sigma };
                out[r * width + j] = tg.data()[j] * xhat + tb.data()[j];
            }
            stats.push((mean, sigma));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            needs,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| gelu_tanh(v))
            .collect();
        let value = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(value, needs, Op::Gelu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| libm::tanh(v))
            .collect();
        let value = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(value, needs, Op::Tanh { x })
    }

    /// Gather rows of `table` by index; the embedding lookup.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.rank() != 2 {
            return Err(CoreError::Contract("gather expects a matrix table".to_string()));
        }
        let (rows, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= rows {
                return Err(CoreError::Input(format!(
                    "gather index {id} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::matrix(ids.len(), c, data)?;
        let needs = self.needs(table);
        Ok(self.push(
            value,
            needs,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout at rate `p`; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.uniform() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let data = self.nodes[x.0]
            .value
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(value, needs, Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), needs, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len() as f64;
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s / n), needs, Op::Mean { x })
    }

    /// Mean over all elements of the squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mse", a, b)?;
        let n = self.nodes[a.0].value.len() as f64;
        let s: f64 = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s / n), needs, Op::Mse { a, b }))
    }

    /// `-sum_i target[i] * log_softmax(logits)[i]`. The target need not be
    /// normalized; for hard labels pass a one-hot constant.
    pub fn ce_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (tl, tt) = (&self.nodes[logits.0].value, &self.nodes[target.0].value);
        if tl.rank() != 1 || tt.rank() != 1 || tl.len() != tt.len() {
            return Err(CoreError::ShapeMismatch {
                op: "ce_logits",
                lhs: tl.shape().to_vec(),
                rhs: tt.shape().to_vec(),
            });
        }
        let lsm = log_softmax_vec(tl.data());
        let loss: f64 = -tt.data().iter().zip(&lsm).map(|(t, l)| t * l).sum::<f64>();
        let needs = self.needs(logits) || self.needs(target);
        Ok(self.push(Tensor::scalar(loss), needs, Op::CeLogits { logits, target }))
    }

    /// Cross-entropy against a hard class label.
    pub fn ce_one_hot(&mut self, logits: Var, class: usize) -> Result<Var> {
        let n = self.nodes[logits.0].value.len();
        if class >= n {
            return Err(CoreError::Input(format!(
                "class {class} out of range for {n} logits"
            )));
        }
        let mut one_hot = vec![0.0; n];
        one_hot[class] = 1.0;
        let target = self.constant(Tensor::vector(one_hot));
        self.ce_logits(logits, target)
    }

    /// Binary cross-entropy on the sigmoid of a scalar score, computed in
    /// the numerically stable log-sum-exp form.
    pub fn bce_logit(&mut self, score: Var, label: f64) -> Result<Var> {
        let t = &self.nodes[score.0].value;
        if !t.is_scalar() {
            return Err(CoreError::Contract(
                "bce_logit expects a scalar score".to_string(),
            ));
        }
        let x = t.item();
        let loss = x.max(0.0) - x * label + libm::log(1.0 + libm::exp(-libm::fabs(x)));
        let needs = self.needs(score);
        Ok(self.push(Tensor::scalar(loss), needs, Op::BceLogit { score, label }))
    }

    /// Reverse sweep from `loss`, which must be scalar. Gradients of every
    /// named parameter accumulate on the tape across calls; the returned set
    /// reflects the accumulated totals (zero for parameters the loss does
    /// not reach).
    pub fn backward(&mut self, loss: Var) -> Result<GradientSet> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(CoreError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(out_adj) = adj[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                adj[i] = Some(out_adj);
                continue;
            }
            self.propagate(i, &out_adj, &mut adj);
        }

        for (name, var) in &self.params {
            if let Some(g) = adj[var.0].take() {
                let slot = self
                    .accum
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (acc, d) in slot.iter_mut().zip(&g) {
                    *acc += d;
                }
            }
        }
        Ok(self.gradients())
    }

    /// Accumulated gradients of all named parameters; zeros where no
    /// backward pass reached them.
    pub fn gradients(&self) -> GradientSet {
        self.params
            .iter()
            .map(|(name, var)| {
                let shape = self.nodes[var.0].value.shape().to_vec();
                let data = match self.accum.get(name) {
                    Some(g) => g.clone(),
                    None => vec![0.0; self.nodes[var.0].value.len()],
                };
                (name.clone(), Tensor::new(shape, data).unwrap())
            })
            .collect()
    }

    fn propagate(&self, i: usize, out_adj: &[f64], adj: &mut [Option<Vec<f64>>]) {
        // Adds this op's contribution to each differentiable input's adjoint.
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf { .. } => unreachable!("leaves are kept, not propagated"),
            Op::Add { a, b } => {
                self.acc(adj, *a, |g| {
                    for (gi, d) in g.iter_mut().zip(out_adj) {
                        *gi += d;
                    }
                });
                self.acc(adj, *b, |g| {
                    for (gi, d) in g.iter_mut().zip(out_adj) {
                        *gi += d;
                    }
                });
            }
            Op::AddScalar { a } => {
                self.acc(adj, *a, |g| {
                    for (gi, d) in g.iter_mut().zip(out_adj) {
                        *gi += d;
                    }
                });
            }
            Op::Scale { a, c } => {
                self.acc(adj, *a, |g| {
                    for (gi, d) in g.iter_mut().zip(out_adj) {
                        *gi += c * d;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                self.acc(adj, *a, |g| {
                    for ((gi, d), y) in g.iter_mut().zip(out_adj).zip(vb) {
                        *gi += d * y;
                    }
                });
                self.acc(adj, *b, |g| {
                    for ((gi, d), x) in g.iter_mut().zip(out_adj).zip(va) {
                        *gi += d * x;
                    }
                });
            }
            Op::SumVars { inputs } => {
                for &v in inputs {
                    self.acc(adj, v, |g| {
                        for (gi, d) in g.iter_mut().zip(out_adj) {
                            *gi += d;
                        }
                    });
                }
            }
            Op::MatMul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                // dA = dY * B^T
                self.acc(adj, *a, |g| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += out_adj[i * n + j] * vb[p * n + j];
                            }
                            g[i * k + p] += s;
                        }
                    }
                });
                // dB = A^T * dY
                self.acc(adj, *b, |g| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += va[i * k + p] * out_adj[i * n + j];
                            }
                            g[p * n + j] += s;
                        }
                    }
                });
            }
            Op::MatMulNT { a, b } => {
                // y = A * B^T with A [m,k], B [n,k]
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.rows();
                // dA = dY * B
                self.acc(adj, *a, |g| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += out_adj[i * n + j] * vb[j * k + p];
                            }
                            g[i * k + p] += s;
                        }
                    }
                });
                // dB = dY^T * A
                self.acc(adj, *b, |g| {
                    for j in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += out_adj[i * n + j] * va[i * k + p];
                            }
                            g[j * k + p] += s;
                        }
                    }
                });
            }
            Op::MatVec { m, v } => {
                let (vm, vv) = (val(*m), val(*v));
                let (r, c) = (self.nodes[m.0].value.rows(), self.nodes[m.0].value.cols());
                self.acc(adj, *m, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += out_adj[i] * vv[j];
                        }
                    }
                });
                self.acc(adj, *v, |g| {
                    for j in 0..c {
                        let mut s = 0.0;
                        for i in 0..r {
                            s += vm[i * c + j] * out_adj[i];
                        }
                        g[j] += s;
                    }
                });
            }
            Op::VecMat { v, m } => {
                let (vv, vm) = (val(*v), val(*m));
                let (c, n) = (self.nodes[m.0].value.rows(), self.nodes[m.0].value.cols());
                self.acc(adj, *v, |g| {
                    for i in 0..c {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += vm[i * n + j] * out_adj[j];
                        }
                        g[i] += s;
                    }
                });
                self.acc(adj, *m, |g| {
                    for i in 0..c {
                        for j in 0..n {
                            g[i * n + j] += vv[i] * out_adj[j];
                        }
                    }
                });
            }
            Op::Dot { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let d = out_adj[0];
                self.acc(adj, *a, |g| {
                    for (gi, y) in g.iter_mut().zip(vb) {
                        *gi += d * y;
                    }
                });
                self.acc(adj, *b, |g| {
                    for (gi, x) in g.iter_mut().zip(va) {
                        *gi += d * x;
                    }
                });
            }
            Op::AddRow { m, row } => {
                let (r, c) = (self.nodes[m.0].value.rows(), self.nodes[m.0].value.cols());
                self.acc(adj, *m, |g| {
                    for (gi, d) in g.iter_mut().zip(out_adj) {
                        *gi += d;
                    }
                });
                self.acc(adj, *row, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += out_adj[i * c + j];
                        }
                    }
                });
            }
            Op::WeightedSumRows { w, m } => {
                let (vw, vm) = (val(*w), val(*m));
                let (r, c) = (self.nodes[m.0].value.rows(), self.nodes[m.0].value.cols());
                self.acc(adj, *w, |g| {
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += out_adj[j] * vm[i * c + j];
                        }
                        g[i] += s;
                    }
                });
                self.acc(adj, *m, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += vw[i] * out_adj[j];
                        }
                    }
                });
            }
            Op::StackRows { rows } => {
                let c = self.nodes[rows[0].0].value.len();
                for (i, &v) in rows.iter().enumerate() {
                    self.acc(adj, v, |g| {
                        for j in 0..c {
                            g[j] += out_adj[i * c + j];
                        }
                    });
                }
            }
            Op::StackScalars { xs } => {
                for (i, &v) in xs.iter().enumerate() {
                    self.acc(adj, v, |g| {
                        g[0] += out_adj[i];
                    });
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.nodes[x.0].value.cols();
                let r = self.nodes[x.0].value.rows();
                let w = out_adj.len() / r;
                self.acc(adj, *x, |g| {
                    for i in 0..r {
                        for j in 0..w {
                            g[i * c + start + j] += out_adj[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|v| self.nodes[v.0].value.cols()).sum();
                let r = self.nodes[parts[0].0].value.rows();
                let mut offset = 0;
                for &v in parts {
                    let c = self.nodes[v.0].value.cols();
                    self.acc(adj, v, |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[i * c + j] += out_adj[i * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.data();
                let shape = self.nodes[i].value.shape();
                self.acc(adj, *x, |g| {
                    for (base, stride, n) in softmax_runs(shape, *axis) {
                        let mut s = 0.0;
                        for k in 0..n {
                            let idx = base + k * stride;
                            s += out_adj[idx] * y[idx];
                        }
                        for k in 0..n {
                            let idx = base + k * stride;
                            g[idx] += y[idx] * (out_adj[idx] - s);
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x, mask } => {
                let y = self.nodes[i].value.data();
                let width = mask.len();
                let runs = y.len() / width;
                self.acc(adj, *x, |g| {
                    for r in 0..runs {
                        let base = r * width;
                        let mut s = 0.0;
                        for (j, &keep) in mask.iter().enumerate() {
                            if keep {
                                s += out_adj[base + j] * y[base + j];
                            }
                        }
                        for (j, &keep) in mask.iter().enumerate() {
                            if keep {
                                g[base + j] += y[base + j] * (out_adj[base + j] - s);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let vx = val(*x);
                let vg = val(*gamma);
                let width = vg.len();
                let rows = vx.len() / width;
                self.acc(adj, *x, |g| {
                    for r in 0..rows {
                        let (mean, sigma) = stats[r];
                        if sigma == 0.0 {
                            continue;
                        }
                        let base = r * width;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..width {
                            let xhat = (vx[base + j] - mean) / sigma;
                            let gj = out_adj[base + j] * vg[j];
                            m1 += gj;
                            m2 += gj * xhat;
                        }
                        m1 /= width as f64;
                        m2 /= width as f64;
                        for j in 0..width {
                            let xhat = (vx[base + j] - mean) / sigma;
                            let gj = out_adj[base + j] * vg[j];
                            g[base + j] += (gj - m1 - xhat * m2) / sigma;
                        }
                    }
                });
                self.acc(adj, *gamma, |g| {
                    for r in 0..rows {
                        let (mean, sigma) = stats[r];
                        let base = r * width;
                        for j in 0..width {
                            let xhat = if sigma == 0.0 {
                                0.0
                            } else {
                                (vx[base + j] - mean) / sigma
                            };
                            g[j] += out_adj[base + j] * xhat;
                        }
                    }
                });
                self.acc(adj, *beta, |g| {
                    for r in 0..rows {
                        for j in 0..width {
                            g[j] += out_adj[r * width + j];
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let vx = val(*x);
                self.acc(adj, *x, |g| {
                    for ((gi, d), &v) in g.iter_mut().zip(out_adj).zip(vx) {
                        *gi += d * gelu_tanh_deriv(v);
                    }
                });
            }
            Op::Tanh { x } => {
                let y = self.nodes[i].value.data();
                self.acc(adj, *x, |g| {
                    for ((gi, d), &t) in g.iter_mut().zip(out_adj).zip(y) {
                        *gi += d * (1.0 - t * t);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let c = self.nodes[table.0].value.cols();
                self.acc(adj, *table, |g| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            g[id * c + j] += out_adj[row * c + j];
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.acc(adj, *x, |g| {
                    for ((gi, d), m) in g.iter_mut().zip(out_adj).zip(mask) {
                        *gi += d * m;
                    }
                });
            }
            Op::Sum { x } => {
                let d = out_adj[0];
                self.acc(adj, *x, |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.len() as f64;
                let d = out_adj[0] / n;
                self.acc(adj, *x, |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::Mse { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let n = va.len() as f64;
                let d = out_adj[0] * 2.0 / n;
                self.acc(adj, *a, |g| {
                    for ((gi, &x), &y) in g.iter_mut().zip(va).zip(vb) {
                        *gi += d * (x - y);
                    }
                });
                self.acc(adj, *b, |g| {
                    for ((gi, &x), &y) in g.iter_mut().zip(va).zip(vb) {
                        *gi -= d * (x - y);
                    }
                });
            }
            Op::CeLogits { logits, target } => {
                let (vl, vt) = (val(*logits), val(*target));
                let d = out_adj[0];
                let lsm = log_softmax_vec(vl);
                let target_sum: f64 = vt.iter().sum();
                self.acc(adj, *logits, |g| {
                    for (j, gi) in g.iter_mut().enumerate() {
                        let p = libm::exp(lsm[j]);
                        *gi += d * (p * target_sum - vt[j]);
                    }
                });
                self.acc(adj, *target, |g| {
                    for (j, gi) in g.iter_mut().enumerate() {
                        *gi += d * (-lsm[j]);
                    }
                });
            }
            Op::BceLogit { score, label } => {
                let x = val(*score)[0];
                let d = out_adj[0];
                self.acc(adj, *score, |g| {
                    g[0] += d * (sigmoid(x) - label);
                });
            }
        }
    }

    /// Run `f` on the adjoint buffer of `v` if `v` is differentiable,
    /// allocating a zeroed buffer on first touch.
    fn acc(&self, adj: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let buf = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }
}

/// Iterator over (base, stride, length) runs for a softmax along `axis`.
fn softmax_runs(shape: &[usize], axis: usize) -> Vec<(usize, usize, usize)> {
    match shape.len() {
        0 => vec![(0, 1, 1)],
        1 => vec![(0, 1, shape[0])],
        2 => {
            let (r, c) = (shape[0], shape[1]);
            if axis == 1 {
                (0..r).map(|i| (i * c, 1, c)).collect()
            } else {
                (0..c).map(|j| (j, c, r)).collect()
            }
        }
        _ => unreachable!("tensors are rank 0..=2"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.input(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_selector() {
        let mut tape = Tape::new();
        let sel = tape.input(&t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let m = tape.input(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = tape.matmul(sel, m).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(&t(&[2, 3], &[0.0; 6]));
        let b = tape.input(&t(&[2, 2], &[0.0; 4]));
        match tape.matmul(a, b) {
            Err(CoreError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_example() {
        // d sum(A*B) / dA at A=[[1,2]], B=[[3],[4]] is [[3,4]]
        let mut tape = Tape::new();
        let a = tape
            .param("a", &t(&[1, 2], &[1.0, 2.0]).with_grad())
            .unwrap();
        let b = tape.input(&t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let ga = grads.get("a").unwrap();
        assert!((ga.data()[0] - 3.0).abs() < 1e-12);
        assert!((ga.data()[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_symmetry_and_values() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::vector(vec![0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x2 = tape.input(&Tensor::vector(vec![2.0, 0.0]));
        let y2 = tape.softmax(x2, 0).unwrap();
        // exp(2)/(exp(2)+1), 1/(exp(2)+1)
        assert!((tape.value(y2).data()[0] - 0.8807970779778823).abs() < 1e-12);
        assert!((tape.value(y2).data()[1] - 0.11920292202211755).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::vector(vec![1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn softmax_sums_to_one_along_each_axis() {
        let data = [0.3, -1.2, 2.0, 0.7, 0.0, -0.5];
        let mut tape = Tape::new();
        let x = tape.input(&t(&[2, 3], &data));
        let rows = tape.softmax(x, 1).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(rows).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let cols = tape.softmax(x, 0).unwrap();
        for c in 0..3 {
            let s: f64 = (0..2).map(|r| tape.value(cols).at(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_positions() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::vector(vec![5.0, 1.0, -3.0, 9.0]));
        let y = tape
            .masked_softmax(x, &[true, true, false, false])
            .unwrap();
        let v = tape.value(y).data().to_vec();
        assert_eq!(v[2], 0.0);
        assert_eq!(v[3], 0.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_rejects_fully_masked() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.masked_softmax(x, &[false, false]),
            Err(CoreError::Input(_))
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::vector(vec![1.0, 1.0, 1.0]));
        let g = tape.input(&Tensor::vector(vec![1.0, 1.0, 1.0]));
        let b = tape.input(&Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for v in tape.value(y).data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::vector(vec![1.0, 3.0]));
        let g = tape.input(&Tensor::vector(vec![1.0, 1.0]));
        let b = tape.input(&Tensor::vector(vec![0.0, 0.0]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert!((tape.value(y).data()[0] + 1.0).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape
            .param("x", &t(&[2, 3], &[0.5; 6]).with_grad())
            .unwrap();
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_self_mse_is_zero() {
        let mut tape = Tape::new();
        let x = tape
            .param("x", &Tensor::vector(vec![1.0, -2.0, 3.0]).with_grad())
            .unwrap();
        let loss = tape.mse(x, x).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape
            .param("x", &Tensor::vector(vec![1.0, 2.0]).with_grad())
            .unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape
            .param("x", &Tensor::vector(vec![1.0, 2.0]).with_grad())
            .unwrap();
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape
            .param("x", &Tensor::vector(vec![1.0]).with_grad())
            .unwrap();
        let _unused = tape
            .param("unused", &Tensor::vector(vec![5.0]).with_grad())
            .unwrap();
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0]);
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut tape = Tape::new();
        let x = tape
            .param("x", &Tensor::vector(vec![1.0, 2.0]).with_grad())
            .unwrap();
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        // d(sum(x * const_x))/dx = const_x, not 2x
        assert_eq!(grads.get("x").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn duplicate_param_name_rejected() {
        let mut tape = Tape::new();
        let v = Tensor::vector(vec![1.0]).with_grad();
        tape.param("p", &v).unwrap();
        assert!(tape.param("p", &v).is_err());
    }

    #[test]
    fn gather_accumulates_repeated_ids() {
        let mut tape = Tape::new();
        let table = tape
            .param("table", &t(&[3, 2], &[0.0; 6]).with_grad())
            .unwrap();
        let y = tape.gather(table, &[1, 1]).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("table").unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn ce_logits_matches_entropy_for_identical_distributions() {
        let mut tape = Tape::new();
        let logits = tape.input(&Tensor::vector(vec![2.0, 0.0]));
        let probs = tape.softmax(logits, 0).unwrap();
        let target = tape.detach(probs);
        let loss = tape.ce_logits(logits, target).unwrap();
        // entropy of softmax([2, 0])
        let p = 0.8807970779778823;
        let expected = -(p * libm::log(p) + (1.0 - p) * libm::log(1.0 - p));
        assert!((tape.scalar_value(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn bce_logit_values() {
        let mut tape = Tape::new();
        let zero = tape.input(&Tensor::scalar(0.0));
        let l = tape.bce_logit(zero, 1.0).unwrap();
        assert!((tape.scalar_value(l) - core::f64::consts::LN_2).abs() < 1e-12);
        let big = tape.input(&Tensor::scalar(50.0));
        let l2 = tape.bce_logit(big, 1.0).unwrap();
        assert!(tape.scalar_value(l2) < 1e-12);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || -> Vec<f64> {
            let mut rng = Rng::new(99);
            let mut tape = Tape::new();
            let x = tape
                .param("x", &Tensor::randn(&[4, 4], 1.0, &mut rng).with_grad())
                .unwrap();
            let w = tape
                .param("w", &Tensor::randn(&[4, 4], 1.0, &mut rng).with_grad())
                .unwrap();
            let y = tape.matmul(x, w).unwrap();
            let z = tape.gelu(y);
            let loss = tape.mean(z);
            let grads = tape.backward(loss).unwrap();
            let mut out = grads.get("x").unwrap().data().to_vec();
            out.extend_from_slice(grads.get("w").unwrap().data());
            out
        };
        assert_eq!(run(), run());
    }

    // Finite-difference audits of every differentiable primitive, random
    // inputs in [-1, 1], step 1e-5, relative error < 1e-4.

    fn fd_audit<F>(shapes: &[&[usize]], build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut rng = Rng::new(2024);
        let tensors: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|_| rng.range(-1.0, 1.0)).collect();
                Tensor::new(s.to_vec(), data).unwrap().with_grad()
            })
            .collect();

        let eval = |tensors: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = tensors
                .iter()
                .enumerate()
                .map(|(i, t)| tape.param(&format!("in{i}"), t).unwrap())
                .collect();
            let out = build(&mut tape, &vars);
            let loss = tape.sum(out);
            let grads = tape.backward(loss).unwrap();
            let gs = (0..tensors.len())
                .map(|i| grads.get(&format!("in{i}")).unwrap().data().to_vec())
                .collect();
            (tape.scalar_value(loss), gs)
        };

        let (_, analytic) = eval(&tensors);
        let h = 1e-5;
        for (ti, t) in tensors.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = tensors.clone();
                plus[ti].data_mut()[j] += h;
                let mut minus = tensors.clone();
                minus[ti].data_mut()[j] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let err = check::rel_err(analytic[ti][j], fd);
                assert!(
                    err < 1e-4,
                    "input {ti} coord {j}: analytic {} vs fd {fd}, rel err {err}",
                    analytic[ti][j]
                );
            }
        }
    }

    #[test]
    fn fd_matmul() {
        fd_audit(&[&[3, 4], &[4, 2]], |tape, v| tape.matmul(v[0], v[1]).unwrap());
    }

    #[test]
    fn fd_matmul_nt() {
        fd_audit(&[&[3, 4], &[2, 4]], |tape, v| {
            tape.matmul_nt(v[0], v[1]).unwrap()
        });
    }

    #[test]
    fn fd_add_and_mul() {
        fd_audit(&[&[2, 3], &[2, 3]], |tape, v| {
            let s = tape.add(v[0], v[1]).unwrap();
            tape.mul(s, v[0]).unwrap()
        });
    }

    #[test]
    fn fd_softmax() {
        fd_audit(&[&[2, 5]], |tape, v| {
            let y = tape.softmax(v[0], 1).unwrap();
            // weight the outputs so every Jacobian entry matters
            let w = tape.constant(
                Tensor::new(vec![2, 5], (0..10).map(|i| 0.3 + 0.17 * i as f64).collect()).unwrap(),
            );
            tape.mul(y, w).unwrap()
        });
    }

    #[test]
    fn fd_masked_softmax() {
        fd_audit(&[&[2, 4]], |tape, v| {
            let y = tape
                .masked_softmax(v[0], &[true, true, true, false])
                .unwrap();
            let w = tape.constant(
                Tensor::new(vec![2, 4], (0..8).map(|i| 1.0 + 0.31 * i as f64).collect()).unwrap(),
            );
            tape.mul(y, w).unwrap()
        });
    }

    #[test]
    fn fd_layer_norm() {
        fd_audit(&[&[2, 4], &[4], &[4]], |tape, v| {
            let y = tape.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let w = tape.constant(
                Tensor::new(vec![2, 4], (0..8).map(|i| 0.5 + 0.2 * i as f64).collect()).unwrap(),
            );
            tape.mul(y, w).unwrap()
        });
    }

    #[test]
    fn fd_gelu() {
        fd_audit(&[&[3, 3]], |tape, v| tape.gelu(v[0]));
    }

    #[test]
    fn fd_gather() {
        fd_audit(&[&[4, 3]], |tape, v| {
            let y = tape.gather(v[0], &[0, 2, 2, 1]).unwrap();
            let w = tape.constant(
                Tensor::new(vec![4, 3], (0..12).map(|i| 0.1 * i as f64 - 0.4).collect()).unwrap(),
            );
            tape.mul(y, w).unwrap()
        });
    }

    #[test]
    fn fd_attentive_pool_composite() {
        // scores = tanh(H W + b) q, alpha = softmax, out = alpha^T H
        fd_audit(&[&[3, 4], &[4, 2], &[2], &[2]], |tape, v| {
            let proj = tape.matmul(v[0], v[1]).unwrap();
            let proj = tape.add_row(proj, v[2]).unwrap();
            let act = tape.tanh(proj);
            let scores = tape.matvec(act, v[3]).unwrap();
            let alpha = tape.masked_softmax(scores, &[true, true, true]).unwrap();
            let pooled = tape.weighted_sum_rows(alpha, v[0]).unwrap();
            let w = tape.constant(Tensor::vector(vec![0.7, -0.3, 0.9, 0.2]));
            tape.mul(pooled, w).unwrap()
        });
    }

    #[test]
    fn fd_ce_logits_and_mse() {
        fd_audit(&[&[5], &[5], &[5]], |tape, v| {
            let ce = tape.ce_logits(v[0], v[1]).unwrap();
            let m = tape.mse(v[0], v[2]).unwrap();
            let both = tape.stack_scalars(&[ce, m]).unwrap();
            tape.sum(both)
        });
    }

    #[test]
    fn fd_slice_concat_stack() {
        fd_audit(&[&[2, 6], &[6], &[6]], |tape, v| {
            let left = tape.slice_cols(v[0], 0, 3).unwrap();
            let right = tape.slice_cols(v[0], 3, 6).unwrap();
            let swapped = tape.concat_cols(&[right, left]).unwrap();
            let stacked = tape.stack_rows(&[v[1], v[2]]).unwrap();
            tape.add(swapped, stacked).unwrap()
        });
    }

    #[test]
    fn fd_bce_logit() {
        fd_audit(&[&[1]], |tape, v| {
            // route the single coordinate into a scalar score
            let w = tape.constant(Tensor::vector(vec![1.0]));
            let s = tape.dot(v[0], w).unwrap();
            let pos = tape.bce_logit(s, 1.0).unwrap();
            let neg = tape.bce_logit(s, 0.0).unwrap();
            tape.stack_scalars(&[pos, neg]).unwrap()
        });
    }
}
