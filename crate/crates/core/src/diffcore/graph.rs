//! Tape of recorded tensor operations with a single reverse sweep.
//!
//! Every operation appends one node whose inputs are already on the tape, so
//! node order is a topological order and [`Graph::backward`] can walk it in
//! reverse without sorting.

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::{Error, Result};

/// Smallest Euclidean norm accepted by normalization.
pub const NORM_EPSILON: f64 = 1e-12;
/// Variance floor used by layer and batch normalization.
pub const NORM_VARIANCE_EPSILON: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    Sum(Var),
    MeanRows(Var),
    Softmax {
        x: Var,
        temperature: f64,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    StandardizeCols {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    WeightedSum {
        weights: Var,
        inputs: Vec<Var>,
    },
    StopGradient,
    StraightThrough {
        soft: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient record: the ordered list of primitive operations of one forward
/// pass together with the forward values each backward rule needs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. `None` for detached nodes
    /// and for nodes the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise `softmax(x / temperature)` on a raw buffer with `cols` columns.
pub(crate) fn softmax_rows_raw(x: &[f64], cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = ((v - max) / temperature).exp();
            total += *o;
        }
        for o in or.iter_mut() {
            *o /= total;
        }
    }
    out
}

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Detached leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(dim_err("matmul", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.cols(), bv.cols());
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::Parameter("transpose expects a matrix".into()));
        }
        let t = xv.transpose();
        let rg = self.needs(x);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    fn zip_same(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(op_name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&mut self, op_name: &'static str, x: Var, r: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (xv, rv) = (self.value(x), self.value(r));
        let c = xv.cols();
        if rv.len() != c {
            return Err(dim_err(op_name, xv, rv));
        }
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(rv.data()).map(|(&a, &b)| f(a, b)))
            .collect();
        Tensor::new(xv.shape().to_vec(), data)
    }

    /// `x + b` with `b` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let t = self.row_broadcast("add_row", x, b, |a, b| a + b)?;
        let rg = self.needs(x) || self.needs(b);
        Ok(self.push(t, Op::AddRow(x, b), rg))
    }

    /// `x ⊙ g` with `g` broadcast over every row of `x`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let t = self.row_broadcast("mul_row", x, g, |a, b| a * b)?;
        let rg = self.needs(x) || self.needs(g);
        Ok(self.push(t, Op::MulRow(x, g), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// `s · x` for a single-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(dim_err("scale_by", self.value(x), sv));
        }
        let sc = sv.item();
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * sc).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs(x) || self.needs(s);
        Ok(self.push(t, Op::ScaleBy(x, s), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.exp()).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(x);
        self.push(t, Op::Exp(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean over rows, producing a `1×d` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for row in xv.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        let rg = self.needs(x);
        self.push(Tensor::new(vec![1, c], out).expect("shape"), Op::MeanRows(x), rg)
    }

    /// `softmax(x / temperature)` along the trailing axis, stabilized by
    /// subtracting the row maximum.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let xv = self.value(x);
        let out = softmax_rows_raw(xv.data(), xv.cols(), temperature);
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.needs(x);
        Ok(self.push(t, Op::Softmax { x, temperature }, rg))
    }

    /// Scales each row (trailing axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > NORM_EPSILON) {
                return Err(Error::DegenerateVector {
                    op: "l2_normalize",
                    norm,
                    epsilon: NORM_EPSILON,
                });
            }
            out.extend(row.iter().map(|v| v / norm));
            norms.push(norm);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.needs(x);
        Ok(self.push(t, Op::NormalizeRows { x, norms }, rg))
    }

    /// All-pairs cosine similarity between the rows of `a[m×d]` and `b[n×d]`.
    pub fn cosine_similarity_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).cols() != self.value(b).cols() {
            return Err(dim_err("cosine_similarity_matrix", self.value(a), self.value(b)));
        }
        let an = self.l2_normalize(a)?;
        let bn = self.l2_normalize(b)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy_rows",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                op: "cross_entropy_rows",
                index: bad,
                extent: c,
            });
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for (row, &t) in lv.data().chunks(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += -(row[t] - max - lse);
            probs.extend(row.iter().map(|v| (v - max - lse).exp()));
        }
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Per-row normalization to zero mean and unit population variance over
    /// the trailing axis, followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d < 2 {
            return Err(Error::Parameter("layer_norm needs at least two features".into()));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != d || bv.len() != d {
            return Err(dim_err("layer_norm", xv, gv));
        }
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + NORM_VARIANCE_EPSILON).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Column-wise standardization of `x[n×d]` by its own batch mean and
    /// population variance.
    pub fn standardize_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if n < 2 {
            return Err(Error::BatchTooSmall {
                op: "standardize_cols",
                required: 2,
                actual: n,
            });
        }
        let (mean, var) = column_moments(xv);
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + NORM_VARIANCE_EPSILON).sqrt())
            .collect();
        let mut xhat = Vec::with_capacity(n * d);
        for row in xv.data().chunks(d) {
            for j in 0..d {
                xhat.push((row[j] - mean[j]) * inv_std[j]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), xhat.clone())?;
        let rg = self.needs(x);
        Ok(self.push(t, Op::StandardizeCols { x, xhat, inv_std }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Parameter("concat_rows needs at least one input".into()))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(dim_err("concat_rows", self.value(first), pv));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Parameter("concat_cols needs at least one input".into()))?;
        let r = self.value(first).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != r {
                return Err(dim_err("concat_cols", self.value(first), pv));
            }
            let c = pv.cols();
            for i in 0..r {
                data[i * total + offset..i * total + offset + c].copy_from_slice(pv.row(i));
            }
            offset += c;
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![r, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.rows() {
            return Err(Error::Index {
                op: "slice_rows",
                index: start + len,
                extent: xv.rows(),
            });
        }
        let c = xv.cols();
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(vec![len, c], data)?, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if len == 0 || start + len > c {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                extent: c,
            });
        }
        let r = xv.rows();
        let mut data = Vec::with_capacity(r * len);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols { x, start }, rg))
    }

    /// `Σ_l weights[l] · inputs[l]` over equally shaped inputs.
    pub fn weighted_sum(&mut self, weights: Var, inputs: &[Var]) -> Result<Var> {
        let wv = self.value(weights);
        if wv.len() != inputs.len() || inputs.is_empty() {
            return Err(Error::Dimension {
                op: "weighted_sum",
                left: wv.shape().to_vec(),
                right: vec![inputs.len()],
            });
        }
        let w = wv.data().to_vec();
        let shape = self.value(inputs[0]).shape().to_vec();
        let mut out = vec![0.0; self.value(inputs[0]).len()];
        for (&wl, &inp) in w.iter().zip(inputs) {
            let iv = self.value(inp);
            if iv.shape() != shape.as_slice() {
                return Err(dim_err("weighted_sum", self.value(inputs[0]), iv));
            }
            for (o, v) in out.iter_mut().zip(iv.data()) {
                *o += wl * v;
            }
        }
        let rg = self.needs(weights) || inputs.iter().any(|&i| self.needs(i));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::WeightedSum {
                weights,
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Identity forward, zero derivative.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::StopGradient, false)
    }

    /// Forward value is `hard` exactly; the backward sweep routes the
    /// incoming gradient to `soft` unchanged. Equals
    /// `hard + soft - stop_gradient(soft)` without the rounding of the sum.
    pub fn straight_through(&mut self, hard: Var, soft: Var) -> Result<Var> {
        let (hv, sv) = (self.value(hard), self.value(soft));
        if hv.shape() != sv.shape() {
            return Err(dim_err("straight_through", hv, sv));
        }
        let t = hv.clone();
        let rg = self.needs(soft);
        Ok(self.push(t, Op::StraightThrough { soft }, rg))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Parameter(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.cols(), bv.cols());
                if self.needs(*a) {
                    self.accumulate(grads, *a, matmul_nt_raw(g, bv.data(), m, n, k));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, matmul_tn_raw(av.data(), g, m, k, n));
                }
            }
            Op::Transpose(x) => {
                let gt = Tensor::new(y.shape().to_vec(), g.to_vec()).expect("shape").transpose();
                self.accumulate(grads, *x, gt.into_data());
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv.data()).map(|(x, y)| x * y).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av.data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(x, b) => {
                let c = y.cols();
                if self.needs(*x) {
                    self.accumulate(grads, *x, g.to_vec());
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MulRow(x, r) => {
                let c = y.cols();
                let (xv, rv) = (self.value(*x), self.value(*r));
                if self.needs(*x) {
                    let gx = g
                        .chunks(c)
                        .flat_map(|row| row.iter().zip(rv.data()).map(|(a, b)| a * b))
                        .collect();
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*r) {
                    let mut gr = vec![0.0; c];
                    for (grow, xrow) in g.chunks(c).zip(xv.data().chunks(c)) {
                        for j in 0..c {
                            gr[j] += grow[j] * xrow[j];
                        }
                    }
                    self.accumulate(grads, *r, gr);
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::ScaleBy(x, s) => {
                let sc = self.value(*s).item();
                if self.needs(*x) {
                    self.accumulate(grads, *x, g.iter().map(|v| v * sc).collect());
                }
                if self.needs(*s) {
                    let xv = self.value(*x);
                    let gs = g.iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    self.accumulate(grads, *s, vec![gs]);
                }
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, g.iter().zip(y.data()).map(|(a, b)| a * b).collect());
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = g.iter().zip(xv.data()).map(|(a, &v)| a * gelu_grad(v)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let n = xv.rows() as f64;
                let gx = (0..xv.rows()).flat_map(|_| g.iter().map(|v| v / n)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax { x, temperature } => {
                let c = y.cols();
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(y.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(a, b)| b * (a - dot) / temperature));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::NormalizeRows { x, norms } => {
                let c = y.cols();
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), n) in g.chunks(c).zip(y.data().chunks(c)).zip(norms) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(a, b)| (a - b * dot) / n));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let (n, c) = (lv.rows(), lv.cols());
                let scale = g[0] / n as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * c + t] -= scale;
                }
                self.accumulate(grads, *logits, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = y.cols();
                let gv = self.value(*gain).data();
                if self.needs(*x) {
                    let mut gx = Vec::with_capacity(g.len());
                    for ((gr, hr), is) in g.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        gx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(a, h)| is / df * (df * a - sum_dh - h * sum_dh_h)),
                        );
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*gain) {
                    let mut gg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                }
                if self.needs(*bias) {
                    let mut gb = vec![0.0; d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::StandardizeCols { x, xhat, inv_std } => {
                let d = y.cols();
                let n = y.rows();
                let nf = n as f64;
                let mut sum_g = vec![0.0; d];
                let mut sum_gh = vec![0.0; d];
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        sum_g[j] += gr[j];
                        sum_gh[j] += gr[j] * hr[j];
                    }
                }
                let mut gx = Vec::with_capacity(g.len());
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gx.push(inv_std[j] / nf * (nf * gr[j] - sum_g[j] - hr[j] * sum_gh[j]));
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        self.accumulate(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let gp = g
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + c].iter().copied())
                            .collect();
                        self.accumulate(grads, p, gp);
                    }
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = vec![0.0; xv.len()];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (c, len) = (xv.cols(), y.cols());
                let mut gx = vec![0.0; xv.len()];
                for (r, gr) in g.chunks(len).enumerate() {
                    gx[r * c + start..r * c + start + len].copy_from_slice(gr);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::WeightedSum { weights, inputs } => {
                let w = self.value(*weights).data();
                if self.needs(*weights) {
                    let gw = inputs
                        .iter()
                        .map(|&inp| g.iter().zip(self.value(inp).data()).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *weights, gw);
                }
                for (&wl, &inp) in w.iter().zip(inputs) {
                    if self.needs(inp) {
                        self.accumulate(grads, inp, g.iter().map(|v| v * wl).collect());
                    }
                }
            }
            Op::StraightThrough { soft } => {
                self.accumulate(grads, *soft, g.to_vec());
            }
        }
    }
}

/// Per-column mean and population variance of a matrix.
pub fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        for j in 0..d {
            mean[j] += row[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for j in 0..d {
            let c = row[j] - mean[j];
            var[j] += c * c;
        }
    }
    for v in var.iter_mut() {
        *v /= n as f64;
    }
    (mean, var)
}
