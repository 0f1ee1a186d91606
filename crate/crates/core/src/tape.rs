//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the
//! information its backward rule needs. Nodes are created in topological
//! order, so `backward` walks the tape once in reverse.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Output position `i` reads input element `map[i]`, or zero for [`PAD`].
pub const PAD: usize = usize::MAX;

const NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Arc<Vec<T>>),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    CrossEntropy(Var, usize, Vec<T>),
    Gelu(Var),
    Relu(Var),
    Sqrt(Var),
    NormalizeRows(Var, Vec<T>),
    Conv(Var, Var, ConvGeom),
    AvgPool2(Var, usize, [usize; 3]),
    Gather(Var, Arc<Vec<usize>>),
    Concat(Vec<Var>),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// The tape. One graph per forward pass; [`Graph::clear`] releases all
/// recorded intermediates.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / n, n)
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn out(&self, shape: &[usize], data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape.to_vec(), data).expect("op produced consistent shape")
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn as_matrix(&self, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            _ => Err(shape_err("matrix", self.shape(v), &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.as_matrix(a)?;
        let (k2, n) = self.as_matrix(b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = self.out(&[m, n], data);
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.as_matrix(a)?;
        let (n, k2) = self.as_matrix(b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = self.out(&[m, n], data);
        Ok(self.push(t, Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip_with(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.out(self.shape(a), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let t = self.out(&self.shape(a).to_vec(), data);
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// Element-wise product with a constant mask (dropout, fixed weights).
    pub fn mul_const(&mut self, a: Var, mask: Arc<Vec<T>>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(shape_err("mul_const", self.shape(a), &[mask.len()]));
        }
        let data = self.value(a).data().iter().zip(mask.iter()).map(|(&x, &m)| x * m).collect();
        let t = self.out(&self.shape(a).to_vec(), data);
        Ok(self.push(t, Op::MulConst(a, mask), &[a]))
    }

    fn row_bcast(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (_, n) = rows_cols(self.shape(a));
        if self.value(b).len() != n {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(self.out(self.shape(a), data))
    }

    fn col_bcast(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T + Copy) -> Result<Tensor<T>> {
        let m = self.value(b).len();
        let len = self.value(a).len();
        if len % m != 0 || self.shape(a)[0] != m {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let n = len / m;
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .zip(bv)
            .flat_map(|(row, &y)| row.iter().map(move |&x| f(x, y)))
            .collect();
        Ok(self.out(self.shape(a), data))
    }

    /// `a[.., n] + b[n]` broadcast over leading axes.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.row_bcast(a, b, "add_row", |x, y| x + y)?;
        Ok(self.push(t, Op::AddRow(a, b), &[a, b]))
    }

    /// `a[.., n] ⊙ b[n]` broadcast over leading axes.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.row_bcast(a, b, "mul_row", |x, y| x * y)?;
        Ok(self.push(t, Op::MulRow(a, b), &[a, b]))
    }

    /// `a[m, ..] + b[m]` broadcast over trailing axes.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.col_bcast(a, b, "add_col", |x, y| x + y)?;
        Ok(self.push(t, Op::AddCol(a, b), &[a, b]))
    }

    /// `a[m, ..] ⊙ b[m]` broadcast over trailing axes.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.col_bcast(a, b, "mul_col", |x, y| x * y)?;
        Ok(self.push(t, Op::MulCol(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, n) = rows_cols(self.shape(a));
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = self.out(&self.shape(a).to_vec(), data);
        self.push(t, Op::SoftmaxRows(a), &[a])
    }

    /// `-log softmax(logits)[target]` for a flat logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.value(logits).len();
        if target >= n {
            return Err(Error::Labels(format!("target {target} out of range for {n} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_in_place(&mut probs);
        let x = self.value(logits).data();
        let m = x.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        let loss = lse - x[target];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, target, probs), &[logits]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu_parts(x).0).collect();
        let t = self.out(&self.shape(a).to_vec(), data);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.max(T::zero())).collect();
        let t = self.out(&self.shape(a).to_vec(), data);
        self.push(t, Op::Relu(a), &[a])
    }

    /// Element-wise square root; inputs must be non-negative.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.sqrt()).collect();
        let t = self.out(&self.shape(a).to_vec(), data);
        self.push(t, Op::Sqrt(a), &[a])
    }

    /// Zero-mean, unit-variance along the last axis (epsilon 1e-5 added to
    /// the variance).
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(a));
        if n < 2 {
            return Err(shape_err("normalize_rows", self.shape(a), &[2]));
        }
        let eps = T::lit(NORM_EPS);
        let nf = T::lit(n as f64);
        let mut data = self.value(a).data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / n);
        for row in data.chunks_mut(n) {
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mu) * is;
            }
            inv_std.push(is);
        }
        let t = self.out(&self.shape(a).to_vec(), data);
        Ok(self.push(t, Op::NormalizeRows(a, inv_std), &[a]))
    }

    /// Layer normalization over the last axis with per-feature affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.normalize_rows(x)?;
        let s = self.mul_row(n, gain)?;
        self.add_row(s, bias)
    }

    fn conv(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let data = kernels::conv_forward(self.value(x).data(), self.value(w).data(), &geom);
        let mut shape = vec![geom.c_out];
        let extra = self.value(x).rank() - 1;
        shape.extend_from_slice(&geom.dims[3 - extra..]);
        let t = self.out(&shape, data);
        self.push(t, Op::Conv(x, w, geom), &[x, w])
    }

    /// Same-padded 2D cross-correlation: `x[C_in×H×W]`,
    /// `kernels[C_out×C_in×kh×kw]` with odd kernel extents.
    pub fn conv2d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernels).to_vec());
        let (&[ci, h, w], &[co, ci2, kh, kw]) = (xs.as_slice(), ks.as_slice()) else {
            return Err(shape_err("conv2d", &xs, &ks));
        };
        if ci != ci2 {
            return Err(shape_err("conv2d", &xs, &ks));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel extents must be odd, got {kh}×{kw}")));
        }
        Ok(self.conv(
            x,
            kernels,
            ConvGeom {
                c_in: ci,
                c_out: co,
                dims: [1, h, w],
                kernel: [1, kh, kw],
            },
        ))
    }

    /// Same-padded 3D cross-correlation: `x[C_in×D×H×W]`,
    /// `kernels[C_out×C_in×kd×kh×kw]` with odd kernel extents.
    pub fn conv3d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernels).to_vec());
        let (&[ci, d, h, w], &[co, ci2, kd, kh, kw]) = (xs.as_slice(), ks.as_slice()) else {
            return Err(shape_err("conv3d", &xs, &ks));
        };
        if ci != ci2 {
            return Err(shape_err("conv3d", &xs, &ks));
        }
        if kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("conv3d kernel extents must be odd, got {kd}×{kh}×{kw}")));
        }
        Ok(self.conv(
            x,
            kernels,
            ConvGeom {
                c_in: ci,
                c_out: co,
                dims: [d, h, w],
                kernel: [kd, kh, kw],
            },
        ))
    }

    /// 2×2×2 average pooling of `x[C×D×H×W]`; spatial extents must be even.
    pub fn avg_pool3d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let &[c, d, h, w] = s.as_slice() else {
            return Err(shape_err("avg_pool3d", &s, &[0, 0, 0, 0]));
        };
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("avg_pool3d", &s, &[c, d / 2 * 2, h / 2 * 2, w / 2 * 2]));
        }
        let data = kernels::avg_pool2_forward(self.value(x).data(), c, [d, h, w]);
        let t = self.out(&[c, d / 2, h / 2, w / 2], data);
        Ok(self.push(t, Op::AvgPool2(x, c, [d, h, w]), &[x]))
    }

    /// Generic index-map copy: `out[i] = x[map[i]]`, zero where `map[i] == PAD`.
    /// Covers padding, folding, transposes and slicing.
    pub fn gather(&mut self, x: Var, map: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != map.len() || map.iter().any(|&i| i != PAD && i >= n) {
            return Err(shape_err("gather", self.shape(x), shape));
        }
        let src = self.value(x).data();
        let data = map.iter().map(|&i| if i == PAD { T::zero() } else { src[i] }).collect();
        let t = self.out(shape, data);
        Ok(self.push(t, Op::Gather(x, map), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.as_matrix(x)?;
        let map: Vec<usize> = (0..n * m).map(|i| (i % m) * n + i / m).collect();
        self.gather(x, Arc::new(map), &[n, m])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.as_matrix(x)?;
        if start >= end || end > n {
            return Err(shape_err("slice_cols", &[m, n], &[start, end]));
        }
        let w = end - start;
        let map: Vec<usize> = (0..m * w).map(|i| (i / w) * n + start + i % w).collect();
        self.gather(x, Arc::new(map), &[m, w])
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.as_matrix(x)?;
        if start >= end || end > m {
            return Err(shape_err("slice_rows", &[m, n], &[start, end]));
        }
        let map: Vec<usize> = (start * n..end * n).collect();
        self.gather(x, Arc::new(map), &[end - start, n])
    }

    /// Concatenation along axis 0; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err("concat", self.shape(*first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = self.out(&shape, data);
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Mean over rows of a matrix, returning `[1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, _) = self.as_matrix(x)?;
        let w = self.constant(Tensor::full(&[1, m], T::one() / T::lit(m as f64)));
        self.matmul(w, x)
    }

    /// Back-propagates from a scalar loss, populating gradients for every
    /// node that requires them. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.backward_rule(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dg) in contribs {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, b)| *a += *b),
                    None => node.grad = Some(dg),
                }
            }
        }
        for node in &mut self.nodes[..=loss.0] {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(())
    }

    fn backward_rule(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul(a, b) => {
                let (m, k) = rows_cols(self.shape(a));
                let n = self.shape(b)[1];
                let mut out = vec![];
                if needs(a) {
                    out.push((a, kernels::matmul_nt(g, val(b), m, n, k)));
                }
                if needs(b) {
                    out.push((b, kernels::matmul_tn(val(a), g, m, k, n)));
                }
                out
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = rows_cols(self.shape(a));
                let n = self.shape(b)[0];
                let mut out = vec![];
                if needs(a) {
                    out.push((a, kernels::matmul(g, val(b), m, n, k)));
                }
                if needs(b) {
                    out.push((b, kernels::matmul_tn(g, val(a), m, n, k)));
                }
                out
            }
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|&x| -x).collect())],
            &Op::Mul(a, b) => vec![
                (a, g.iter().zip(val(b)).map(|(&x, &y)| x * y).collect()),
                (b, g.iter().zip(val(a)).map(|(&x, &y)| x * y).collect()),
            ],
            &Op::Scale(a, c) => vec![(a, g.iter().map(|&x| x * c).collect())],
            Op::MulConst(a, mask) => vec![(*a, g.iter().zip(mask.iter()).map(|(&x, &m)| x * m).collect())],
            &Op::AddRow(a, b) => {
                let n = self.value(b).len();
                let mut db = vec![T::zero(); n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                }
                vec![(a, g.to_vec()), (b, db)]
            }
            &Op::MulRow(a, b) => {
                let n = self.value(b).len();
                let bv = val(b);
                let mut db = vec![T::zero(); n];
                let mut da = Vec::with_capacity(g.len());
                for (grow, arow) in g.chunks(n).zip(val(a).chunks(n)) {
                    for j in 0..n {
                        db[j] += grow[j] * arow[j];
                        da.push(grow[j] * bv[j]);
                    }
                }
                vec![(a, da), (b, db)]
            }
            &Op::AddCol(a, b) => {
                let m = self.value(b).len();
                let n = g.len() / m;
                let db = g.chunks(n).map(|row| row.iter().copied().sum()).collect();
                vec![(a, g.to_vec()), (b, db)]
            }
            &Op::MulCol(a, b) => {
                let m = self.value(b).len();
                let n = g.len() / m;
                let bv = val(b);
                let mut db = Vec::with_capacity(m);
                let mut da = Vec::with_capacity(g.len());
                for (r, (grow, arow)) in g.chunks(n).zip(val(a).chunks(n)).enumerate() {
                    db.push(grow.iter().zip(arow).map(|(&x, &y)| x * y).sum());
                    da.extend(grow.iter().map(|&x| x * bv[r]));
                }
                vec![(a, da), (b, db)]
            }
            &Op::Sum(a) => vec![(a, vec![g[0]; self.value(a).len()])],
            &Op::Mean(a) => {
                let n = self.value(a).len();
                vec![(a, vec![g[0] / T::lit(n as f64); n])]
            }
            &Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut da = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(n).zip(y.chunks(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&x, &p)| x * p).sum();
                    da.extend(grow.iter().zip(yrow).map(|(&x, &p)| p * (x - dot)));
                }
                vec![(a, da)]
            }
            Op::CrossEntropy(a, target, probs) => {
                let mut d: Vec<T> = probs.iter().map(|&p| p * g[0]).collect();
                d[*target] -= g[0];
                vec![(*a, d)]
            }
            &Op::Gelu(a) => vec![(a, g.iter().zip(val(a)).map(|(&x, &v)| x * gelu_parts(v).1).collect())],
            &Op::Relu(a) => vec![(
                a,
                g.iter().zip(val(a)).map(|(&x, &v)| if v > T::zero() { x } else { T::zero() }).collect(),
            )],
            &Op::Sqrt(a) => vec![(
                a,
                g.iter()
                    .zip(node.value.data())
                    .map(|(&x, &y)| if y > T::zero() { x / (T::lit(2.0) * y) } else { T::zero() })
                    .collect(),
            )],
            Op::NormalizeRows(a, inv_std) => {
                let n = node.value.last_dim();
                let nf = T::lit(n as f64);
                let mut da = Vec::with_capacity(g.len());
                for ((grow, xhat), &is) in g.chunks(n).zip(node.value.data().chunks(n)).zip(inv_std) {
                    let mg = grow.iter().copied().sum::<T>() / nf;
                    let mgx = grow.iter().zip(xhat).map(|(&x, &h)| x * h).sum::<T>() / nf;
                    da.extend(grow.iter().zip(xhat).map(|(&x, &h)| is * (x - mg - h * mgx)));
                }
                vec![(*a, da)]
            }
            Op::Conv(x, w, geom) => {
                let (dx, dw) = kernels::conv_backward(val(*x), val(*w), g, geom);
                vec![(*x, dx), (*w, dw)]
            }
            Op::AvgPool2(x, c, dims) => vec![(*x, kernels::avg_pool2_backward(g, *c, *dims))],
            Op::Gather(x, map) => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&i, &gv) in map.iter().zip(g) {
                    if i != PAD {
                        dx[i] += gv;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Concat(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).len();
                        let piece = g[off..off + n].to_vec();
                        off += n;
                        (p, piece)
                    })
                    .collect()
            }
            &Op::Reshape(x) => vec![(x, g.to_vec())],
        }
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

/// Softmax of a plain slice (no tape).
pub fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let mut v = x.to_vec();
    softmax_in_place(&mut v);
    v
}
