//! Dense tensors on a reverse-mode autodiff tape.
//!
//! A [`Tape`] is an append-only arena of nodes; every operation pushes one
//! node and returns a [`Var`] handle. Nodes are created in topological
//! order, so the backward pass is a single reverse sweep over the arena.
//! Parameters live outside the tape as [`TensorData`] and are bound as
//! leaves at the start of every forward pass.

pub mod shape;

use crate::error::shape_err;
use crate::float::Float;
use crate::{Error, Result};
use shape::{broadcast_shapes, broadcast_strides, for_each_broadcast2, for_each_reduce, numel, reduced_shape};

/// Plain tensor storage: row-major flat buffer plus shape.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Float> TensorData<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(shape_err(format!(
                "shape {:?} does not match buffer length {}",
                shape,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel(shape)],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn map_to<G: Float>(&self) -> TensorData<G> {
        TensorData {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwOp {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Sqrt,
    Reciprocal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
    Gem,
}

enum Op<F> {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Pow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Recip(Var),
    Scale(Var, F),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    ReduceMean {
        x: Var,
        axes: Vec<usize>,
    },
    ReduceSum {
        x: Var,
        axes: Vec<usize>,
    },
    ReduceVar {
        x: Var,
        axes: Vec<usize>,
        means: Vec<F>,
    },
    ReduceMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        smoothing: F,
    },
    Detach,
}

struct Node<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Append-only autodiff graph.
pub struct Tape<F: Float> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool, op: Op<F>) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_data(&self, v: Var) -> TensorData<F> {
        TensorData {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.clone(),
        }
    }

    /// Leaf that participates in gradient accumulation.
    pub fn leaf(&mut self, t: &TensorData<F>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), true, Op::Leaf)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: &TensorData<F>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), false, Op::Const)
    }

    pub fn scalar(&mut self, v: F) -> Var {
        self.push(vec![1], vec![v], false, Op::Const)
    }

    /// Checks that every node on the tape holds only finite values.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Autodiff(format!(
                    "non-finite value in node {} (shape {:?})",
                    i, n.shape
                )));
            }
            if let Some(g) = &n.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Autodiff(format!(
                        "non-finite gradient in node {} (shape {:?})",
                        i, n.shape
                    )));
                }
            }
        }
        Ok(())
    }

    // ---- elementwise ----

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: impl Fn(Var, Var) -> Op<F>) -> Result<Var> {
        let out_shape = broadcast_shapes(self.shape(a), self.shape(b))?;
        let sa = broadcast_strides(self.shape(a), &out_shape);
        let sb = broadcast_strides(self.shape(b), &out_shape);
        let mut data = vec![F::zero(); numel(&out_shape)];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for_each_broadcast2(&out_shape, &sa, &sb, |o, ia, ib| {
                data[o] = f(da[ia], db[ib]);
            });
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, data, rg, op(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise `a^b` with broadcasting. Exponent exactly 1 degenerates
    /// to a copy so `x^1 == x` holds bitwise.
    pub fn pow(&mut self, a: Var, b: Var) -> Result<Var> {
        let one = F::one();
        self.binary(
            a,
            b,
            |x, y| if y == one { x } else { x.powf(y) },
            Op::Pow,
        )
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let data: Vec<F> = self.nodes[a.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(shape, data, rg, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| if v > F::zero() { v } else { F::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.sqrt(), Op::Sqrt(a))
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.recip(), Op::Recip(a))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        self.unary(a, |v| v + c, Op::AddScalar(a))
    }

    /// Dispatcher over the elementwise operation set.
    pub fn ew(&mut self, op: EwOp, args: &[Var]) -> Result<Var> {
        let need = match op {
            EwOp::Add | EwOp::Sub | EwOp::Mul => 2,
            _ => 1,
        };
        if args.len() != need {
            return Err(shape_err(format!(
                "{:?} expects {} argument(s), got {}",
                op,
                need,
                args.len()
            )));
        }
        Ok(match op {
            EwOp::Add => self.add(args[0], args[1])?,
            EwOp::Sub => self.sub(args[0], args[1])?,
            EwOp::Mul => self.mul(args[0], args[1])?,
            EwOp::Relu => self.relu(args[0]),
            EwOp::Sigmoid => self.sigmoid(args[0]),
            EwOp::Sqrt => self.sqrt(args[0]),
            EwOp::Reciprocal => self.reciprocal(args[0]),
        })
    }

    /// Identity forward; blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.clone();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, false, Op::Detach)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err(format!("matmul expects 2-d operands, got {:?} and {:?}", sa, sb)));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(shape_err(format!("matmul inner extents differ: {} vs {}", k, k2)));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_nn(m, k, n, &self.nodes[a.0].data, &self.nodes[b.0].data, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    // ---- convolution ----

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 {
            return Err(shape_err(format!("conv2d expects 4-d operands, got {:?} and {:?}", sx, sk)));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oc, kc, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if c != kc {
            return Err(shape_err(format!("conv2d channels differ: input {} vs kernel {}", c, kc)));
        }
        if stride == 0 {
            return Err(shape_err("conv2d stride must be positive".to_string()));
        }
        let (oh, ow) = conv_out_extents(h, w, kh, kw, stride, pad)?;
        let ckk = c * kh * kw;
        let rows = n * oh * ow;
        let cols = im2col(&self.nodes[x.0].data, n, c, h, w, kh, kw, stride, pad, oh, ow);
        // out_mat[rows, oc] = cols · Wᵀ
        let mut out_mat = vec![F::zero(); rows * oc];
        gemm_nt(rows, ckk, oc, &cols, &self.nodes[k.0].data, &mut out_mat);
        // rearrange to [n, oc, oh, ow]
        let mut out = vec![F::zero(); n * oc * oh * ow];
        for ni in 0..n {
            for spatial in 0..oh * ow {
                let r = ni * oh * ow + spatial;
                for o in 0..oc {
                    out[(ni * oc + o) * oh * ow + spatial] = out_mat[r * oc + o];
                }
            }
        }
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(vec![n, oc, oh, ow], out, rg, Op::Conv2d { x, k, stride, pad }))
    }

    // ---- reductions ----

    fn check_axes(&self, v: Var, axes: &[usize]) -> Result<()> {
        if axes.is_empty() {
            return Err(shape_err("empty reduction axis set".to_string()));
        }
        let nd = self.shape(v).len();
        for &a in axes {
            if a >= nd {
                return Err(shape_err(format!("axis {} out of range for rank {}", a, nd)));
            }
        }
        Ok(())
    }

    pub fn reduce_sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes(x, axes)?;
        let shape = self.shape(x).to_vec();
        let out_shape = reduced_shape(&shape, axes);
        let mut out = vec![F::zero(); numel(&out_shape)];
        {
            let d = &self.nodes[x.0].data;
            for_each_reduce(&shape, axes, |flat, off| out[off] += d[flat]);
        }
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, rg, Op::ReduceSum { x, axes: axes.to_vec() }))
    }

    pub fn reduce_mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes(x, axes)?;
        let shape = self.shape(x).to_vec();
        let out_shape = reduced_shape(&shape, axes);
        let m = F::from_f64((numel(&shape) / numel(&out_shape)) as f64);
        let mut out = vec![F::zero(); numel(&out_shape)];
        {
            let d = &self.nodes[x.0].data;
            for_each_reduce(&shape, axes, |flat, off| out[off] += d[flat]);
        }
        for v in &mut out {
            *v /= m;
        }
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, rg, Op::ReduceMean { x, axes: axes.to_vec() }))
    }

    /// Biased (population) variance over `axes`, keepdims.
    pub fn reduce_var(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes(x, axes)?;
        let shape = self.shape(x).to_vec();
        let out_shape = reduced_shape(&shape, axes);
        let m = F::from_f64((numel(&shape) / numel(&out_shape)) as f64);
        let mut means = vec![F::zero(); numel(&out_shape)];
        {
            let d = &self.nodes[x.0].data;
            for_each_reduce(&shape, axes, |flat, off| means[off] += d[flat]);
        }
        for v in &mut means {
            *v /= m;
        }
        let mut out = vec![F::zero(); numel(&out_shape)];
        {
            let d = &self.nodes[x.0].data;
            for_each_reduce(&shape, axes, |flat, off| {
                let dv = d[flat] - means[off];
                out[off] += dv * dv;
            });
        }
        for v in &mut out {
            *v /= m;
        }
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, rg, Op::ReduceVar { x, axes: axes.to_vec(), means }))
    }

    /// Mean and biased variance over `axes`, keepdims.
    pub fn reduce_stats(&mut self, x: Var, axes: &[usize]) -> Result<(Var, Var)> {
        Ok((self.reduce_mean(x, axes)?, self.reduce_var(x, axes)?))
    }

    /// Max over `axes`, keepdims. Gradient is routed to the first (lowest
    /// flat index) maximal element of each reduction group.
    pub fn reduce_max(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes(x, axes)?;
        let shape = self.shape(x).to_vec();
        let out_shape = reduced_shape(&shape, axes);
        let mut out = vec![F::neg_infinity(); numel(&out_shape)];
        let mut argmax = vec![usize::MAX; numel(&out_shape)];
        {
            let d = &self.nodes[x.0].data;
            for_each_reduce(&shape, axes, |flat, off| {
                if argmax[off] == usize::MAX || d[flat] > out[off] {
                    out[off] = d[flat];
                    argmax[off] = flat;
                }
            });
        }
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, rg, Op::ReduceMax { x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        if numel(new_shape) != self.nodes[x.0].data.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} to {:?}",
                self.shape(x),
                new_shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.rg(x);
        Ok(self.push(new_shape.to_vec(), data, rg, Op::Reshape(x)))
    }

    // ---- row selection ----

    /// Selects rows (axis 0) of `x` in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(shape_err("gather_rows needs rank >= 1".to_string()));
        }
        let stride: usize = shape[1..].iter().product();
        for &r in rows {
            if r >= shape[0] {
                return Err(shape_err(format!("row {} out of range 0..{}", r, shape[0])));
            }
        }
        let mut out = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            out.extend_from_slice(&self.nodes[x.0].data[r * stride..(r + 1) * stride]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = rows.len();
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, rg, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Places the rows of `x` at the given indices of an otherwise-zero
    /// tensor with `n` rows (accumulating on duplicate indices).
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != rows.len() {
            return Err(shape_err(format!(
                "scatter_rows: {} rows given for input shape {:?}",
                rows.len(),
                shape
            )));
        }
        let stride: usize = shape[1..].iter().product();
        for &r in rows {
            if r >= n {
                return Err(shape_err(format!("row {} out of range 0..{}", r, n)));
            }
        }
        let mut out_shape = shape.clone();
        out_shape[0] = n;
        let mut out = vec![F::zero(); n * stride];
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..stride {
                out[r * stride + j] += self.nodes[x.0].data[i * stride + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, rg, Op::ScatterRows { x, rows: rows.to_vec() }))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(shape_err(format!("concat rank/axis mismatch: {:?} {:?} axis {}", sa, sb, axis)));
        }
        for d in 0..sa.len() {
            if d != axis && sa[d] != sb[d] {
                return Err(shape_err(format!("concat extents differ off-axis: {:?} vs {:?}", sa, sb)));
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let ia: usize = sa[axis..].iter().product();
        let ib: usize = sb[axis..].iter().product();
        let mut out_shape = sa.clone();
        out_shape[axis] += sb[axis];
        let mut out = Vec::with_capacity(outer * (ia + ib));
        for o in 0..outer {
            out.extend_from_slice(&self.nodes[a.0].data[o * ia..(o + 1) * ia]);
            out.extend_from_slice(&self.nodes[b.0].data[o * ib..(o + 1) * ib]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, out, rg, Op::Concat { a, b, axis }))
    }

    // ---- losses ----

    /// Mean cross-entropy over rows of `logits` with a stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_smoothed(logits, labels, 0.0)
    }

    /// Cross-entropy against label-smoothed targets
    /// `t = (1-s)·onehot + s/C`.
    pub fn cross_entropy_smoothed(
        &mut self,
        logits: Var,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(shape_err(format!(
                "label smoothing must be in [0,1), got {smoothing}"
            )));
        }
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err(format!(
                "cross_entropy: logits {:?} vs {} labels",
                shape,
                labels.len()
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        for &l in labels {
            if l >= c {
                return Err(shape_err(format!("label {} out of range 0..{}", l, c)));
            }
        }
        let s = F::from_f64(smoothing);
        let d = &self.nodes[logits.0].data;
        let inv_c = F::from_f64(1.0 / c as f64);
        let mut total = F::zero();
        for i in 0..n {
            let row = &d[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln();
            // Σ_j t_ij·(lse − z_ij) with t = (1−s)·onehot + s/C
            let row_mean = row.iter().cloned().sum::<F>() * inv_c;
            total += lse - ((F::one() - s) * row[labels[i]] + s * row_mean);
        }
        total /= F::from_f64(n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![total],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                smoothing: s,
            },
        ))
    }

    // ---- pooling ----

    /// Global spatial pooling of an `n×c×h×w` map down to `n×c`.
    ///
    /// `gem_p` is only consulted for [`PoolKind::Gem`]; GeM rejects
    /// negative inputs.
    pub fn pool(&mut self, x: Var, kind: PoolKind, gem_p: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err(format!("pool expects 4-d input, got {:?}", shape)));
        }
        let (n, c) = (shape[0], shape[1]);
        let pooled = match kind {
            PoolKind::Avg => self.reduce_mean(x, &[2, 3])?,
            PoolKind::Max => self.reduce_max(x, &[2, 3])?,
            PoolKind::Gem => {
                if gem_p <= 0.0 {
                    return Err(shape_err("gem exponent must be positive".to_string()));
                }
                let p = self.scalar(F::from_f64(gem_p));
                return self.gem_pool(x, p);
            }
        };
        self.reshape(pooled, &[n, c])
    }

    /// GeM pooling `(mean(x^p))^(1/p)` with a (possibly learnable) scalar
    /// exponent node. Inputs must be nonnegative.
    pub fn gem_pool(&mut self, x: Var, p: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err(format!("gem_pool expects 4-d input, got {:?}", shape)));
        }
        if self.value(x).iter().any(|v| *v < F::zero()) {
            return Err(shape_err("gem pooling requires nonnegative inputs".to_string()));
        }
        if self.value(p).len() != 1 {
            return Err(shape_err("gem exponent must be a scalar".to_string()));
        }
        let (n, c) = (shape[0], shape[1]);
        let xp = self.pow(x, p)?;
        let m = self.reduce_mean(xp, &[2, 3])?;
        let pinv = self.reciprocal(p);
        let y = self.pow(m, pinv)?;
        self.reshape(y, &[n, c])
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. A tape accepts exactly one
    /// backward pass; repeated calls are rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff("backward already run on this tape".to_string()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Autodiff(
                "loss is detached from every gradient-tracked leaf".to_string(),
            ));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.backprop_node(i)?;
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Var) {
        if self.nodes[v.0].requires_grad && self.nodes[v.0].grad.is_none() {
            let n = self.nodes[v.0].data.len();
            self.nodes[v.0].grad = Some(vec![F::zero(); n]);
        }
    }

    fn add_grad(&mut self, v: Var, g: Vec<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        self.ensure_grad(v);
        let gr = self.nodes[v.0].grad.as_mut().unwrap();
        for (d, s) in gr.iter_mut().zip(g.iter()) {
            *d += *s;
        }
    }

    /// Gradient of a broadcast binary op w.r.t. each operand, given the
    /// per-element partials.
    fn binary_grads(
        &self,
        i: usize,
        a: Var,
        b: Var,
        fa: impl Fn(F, F, F) -> F,
        fb: impl Fn(F, F, F) -> F,
    ) -> (Vec<F>, Vec<F>) {
        let out_shape = self.nodes[i].shape.clone();
        let sa = broadcast_strides(&self.nodes[a.0].shape, &out_shape);
        let sb = broadcast_strides(&self.nodes[b.0].shape, &out_shape);
        let g = self.nodes[i].grad.as_ref().unwrap();
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut ga = vec![F::zero(); da.len()];
        let mut gb = vec![F::zero(); db.len()];
        for_each_broadcast2(&out_shape, &sa, &sb, |o, ia, ib| {
            ga[ia] += fa(g[o], da[ia], db[ib]);
            gb[ib] += fb(g[o], da[ia], db[ib]);
        });
        (ga, gb)
    }

    fn backprop_node(&mut self, i: usize) -> Result<()> {
        // Ops are matched by cloning only the cheap metadata they need.
        match &self.nodes[i].op {
            Op::Leaf | Op::Const | Op::Detach => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                let (ga, gb) = self.binary_grads(i, a, b, |g, _, _| g, |g, _, _| g);
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                let (ga, gb) = self.binary_grads(i, a, b, |g, _, _| g, |g, _, _| -g);
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (ga, gb) = self.binary_grads(i, a, b, |g, _, bv| g * bv, |g, av, _| g * av);
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Op::Pow(a, b) => {
                let (a, b) = (*a, *b);
                // d/da a^b = b·a^(b-1); d/db a^b = a^b·ln a (0 in the a→0⁺ limit)
                let one = F::one();
                let (ga, gb) = self.binary_grads(
                    i,
                    a,
                    b,
                    |g, av, bv| {
                        if bv == one {
                            g
                        } else if av == F::zero() && bv < one {
                            // a^(b-1) blows up at a = 0 for b < 1; take the
                            // zero subgradient at the boundary instead
                            F::zero()
                        } else {
                            g * bv * av.powf(bv - one)
                        }
                    },
                    |g, av, bv| {
                        if av > F::zero() {
                            let y = if bv == one { av } else { av.powf(bv) };
                            g * y * av.ln()
                        } else {
                            F::zero()
                        }
                    },
                );
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Op::Relu(a) => {
                let a = *a;
                let g = self.nodes[i].grad.as_ref().unwrap();
                let ga: Vec<F> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(&x, &gv)| if x > F::zero() { gv } else { F::zero() })
                    .collect();
                self.add_grad(a, ga);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let g = self.nodes[i].grad.as_ref().unwrap();
                let ga: Vec<F> = self.nodes[i]
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(&y, &gv)| gv * y * (F::one() - y))
                    .collect();
                self.add_grad(a, ga);
            }
            Op::Sqrt(a) => {
                let a = *a;
                let g = self.nodes[i].grad.as_ref().unwrap();
                let half = F::from_f64(0.5);
                let ga: Vec<F> = self.nodes[i]
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(&y, &gv)| gv * half / y)
                    .collect();
                self.add_grad(a, ga);
            }
            Op::Recip(a) => {
                let a = *a;
                let g = self.nodes[i].grad.as_ref().unwrap();
                let ga: Vec<F> = self.nodes[i]
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(&y, &gv)| -gv * y * y)
                    .collect();
                self.add_grad(a, ga);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let g = self.nodes[i].grad.as_ref().unwrap();
                let ga: Vec<F> = g.iter().map(|&gv| gv * c).collect();
                self.add_grad(a, ga);
            }
            Op::AddScalar(a) => {
                let a = *a;
                let ga = self.nodes[i].grad.as_ref().unwrap().clone();
                self.add_grad(a, ga);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let g = self.nodes[i].grad.as_ref().unwrap();
                // dA = dC·Bᵀ ; dB = Aᵀ·dC
                let mut ga = vec![F::zero(); m * k];
                gemm_nt(m, n, k, g, &self.nodes[b.0].data, &mut ga);
                let mut gb = vec![F::zero(); k * n];
                gemm_tn(m, k, n, &self.nodes[a.0].data, g, &mut gb);
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (x, k, stride, pad) = (*x, *k, *stride, *pad);
                self.conv2d_backward(i, x, k, stride, pad)?;
            }
            Op::ReduceMean { x, axes } => {
                let (x, axes) = (*x, axes.clone());
                let shape = self.nodes[x.0].shape.clone();
                let g = self.nodes[i].grad.as_ref().unwrap().clone();
                let m = F::from_f64((self.nodes[x.0].data.len() / g.len()) as f64);
                let mut ga = vec![F::zero(); self.nodes[x.0].data.len()];
                for_each_reduce(&shape, &axes, |flat, off| ga[flat] += g[off] / m);
                self.add_grad(x, ga);
            }
            Op::ReduceSum { x, axes } => {
                let (x, axes) = (*x, axes.clone());
                let shape = self.nodes[x.0].shape.clone();
                let g = self.nodes[i].grad.as_ref().unwrap().clone();
                let mut ga = vec![F::zero(); self.nodes[x.0].data.len()];
                for_each_reduce(&shape, &axes, |flat, off| ga[flat] += g[off]);
                self.add_grad(x, ga);
            }
            Op::ReduceVar { x, axes, means } => {
                let (x, axes, means) = (*x, axes.clone(), means.clone());
                let shape = self.nodes[x.0].shape.clone();
                let g = self.nodes[i].grad.as_ref().unwrap().clone();
                let m = F::from_f64((self.nodes[x.0].data.len() / g.len()) as f64);
                let two = F::from_f64(2.0);
                let mut ga = vec![F::zero(); self.nodes[x.0].data.len()];
                {
                    let d = &self.nodes[x.0].data;
                    for_each_reduce(&shape, &axes, |flat, off| {
                        ga[flat] += g[off] * two * (d[flat] - means[off]) / m;
                    });
                }
                self.add_grad(x, ga);
            }
            Op::ReduceMax { x, argmax } => {
                let (x, argmax) = (*x, argmax.clone());
                let g = self.nodes[i].grad.as_ref().unwrap().clone();
                let mut ga = vec![F::zero(); self.nodes[x.0].data.len()];
                for (off, &flat) in argmax.iter().enumerate() {
                    ga[flat] += g[off];
                }
                self.add_grad(x, ga);
            }
            Op::Reshape(a) => {
                let a = *a;
                let ga = self.nodes[i].grad.as_ref().unwrap().clone();
                self.add_grad(a, ga);
            }
            Op::GatherRows { x, rows } => {
                let (x, rows) = (*x, rows.clone());
                let stride = self.nodes[x.0].data.len() / self.nodes[x.0].shape[0];
                let g = self.nodes[i].grad.as_ref().unwrap().clone();
                let mut ga = vec![F::zero(); self.nodes[x.0].data.len()];
                for (ri, &r) in rows.iter().enumerate() {
                    for j in 0..stride {
                        ga[r * stride + j] += g[ri * stride + j];
                    }
                }
                self.add_grad(x, ga);
            }
            Op::ScatterRows { x, rows } => {
                let (x, rows) = (*x, rows.clone());
                let stride = self.nodes[x.0].data.len() / self.nodes[x.0].shape[0];
                let g = self.nodes[i].grad.as_ref().unwrap().clone();
                let mut ga = vec![F::zero(); self.nodes[x.0].data.len()];
                for (ri, &r) in rows.iter().enumerate() {
                    for j in 0..stride {
                        ga[ri * stride + j] += g[r * stride + j];
                    }
                }
                self.add_grad(x, ga);
            }
            Op::Concat { a, b, axis } => {
                let (a, b, axis) = (*a, *b, *axis);
                let sa = self.nodes[a.0].shape.clone();
                let sb = self.nodes[b.0].shape.clone();
                let outer: usize = sa[..axis].iter().product();
                let ia: usize = sa[axis..].iter().product();
                let ib: usize = sb[axis..].iter().product();
                let g = self.nodes[i].grad.as_ref().unwrap().clone();
                let mut ga = vec![F::zero(); self.nodes[a.0].data.len()];
                let mut gb = vec![F::zero(); self.nodes[b.0].data.len()];
                for o in 0..outer {
                    let base = o * (ia + ib);
                    ga[o * ia..(o + 1) * ia].copy_from_slice(&g[base..base + ia]);
                    gb[o * ib..(o + 1) * ib].copy_from_slice(&g[base + ia..base + ia + ib]);
                }
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Op::CrossEntropy {
                logits,
                labels,
                smoothing,
            } => {
                let (logits, labels, s) = (*logits, labels.clone(), *smoothing);
                let (n, c) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                let g = self.nodes[i].grad.as_ref().unwrap()[0];
                let inv_n = F::from_f64(1.0 / n as f64);
                let uniform = s * F::from_f64(1.0 / c as f64);
                let mut ga = vec![F::zero(); n * c];
                {
                    let d = &self.nodes[logits.0].data;
                    for r in 0..n {
                        let row = &d[r * c..(r + 1) * c];
                        let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
                        let denom: F = row.iter().map(|&v| (v - mx).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - mx).exp() / denom;
                            let y = if j == labels[r] {
                                F::one() - s + uniform
                            } else {
                                uniform
                            };
                            ga[r * c + j] = g * (p - y) * inv_n;
                        }
                    }
                }
                self.add_grad(logits, ga);
            }
        }
        Ok(())
    }

    fn conv2d_backward(&mut self, i: usize, x: Var, k: Var, stride: usize, pad: usize) -> Result<()> {
        let sx = self.nodes[x.0].shape.clone();
        let sk = self.nodes[k.0].shape.clone();
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oc, _, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        let so = self.nodes[i].shape.clone();
        let (oh, ow) = (so[2], so[3]);
        let ckk = c * kh * kw;
        let rows = n * oh * ow;
        // g as [rows, oc]
        let g = self.nodes[i].grad.as_ref().unwrap();
        let mut g_mat = vec![F::zero(); rows * oc];
        for ni in 0..n {
            for o in 0..oc {
                for spatial in 0..oh * ow {
                    g_mat[(ni * oh * ow + spatial) * oc + o] = g[(ni * oc + o) * oh * ow + spatial];
                }
            }
        }
        let cols = im2col(&self.nodes[x.0].data, n, c, h, w, kh, kw, stride, pad, oh, ow);
        if self.rg(k) {
            // dW[oc, ckk] = g_matᵀ · cols
            let mut gk = vec![F::zero(); oc * ckk];
            gemm_tn(rows, oc, ckk, &g_mat, &cols, &mut gk);
            self.add_grad(k, gk);
        }
        if self.rg(x) {
            // dcols = g_mat · W, then fold back into the input layout
            let mut dcols = vec![F::zero(); rows * ckk];
            gemm_nn(rows, oc, ckk, &g_mat, &self.nodes[k.0].data, &mut dcols);
            let mut gx = vec![F::zero(); n * c * h * w];
            col2im_add(&dcols, &mut gx, n, c, h, w, kh, kw, stride, pad, oh, ow);
            self.add_grad(x, gx);
        }
        Ok(())
    }
}

fn sigmoid_scalar<F: Float>(v: F) -> F {
    // split on sign for stability
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub fn conv_out_extents(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    let eh = (h + 2 * pad).checked_sub(kh);
    let ew = (w + 2 * pad).checked_sub(kw);
    match (eh, ew) {
        (Some(eh), Some(ew)) => Ok((eh / stride + 1, ew / stride + 1)),
        _ => Err(shape_err(format!(
            "conv2d output extent not positive: input {}x{}, kernel {}x{}, stride {}, pad {}",
            h, w, kh, kw, stride, pad
        ))),
    }
}

// C[m,n] += A[m,k]·B[k,n]
fn gemm_nn<F: Float>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

// C[m,n] += A[m,k]·B[n,k]ᵀ
fn gemm_nt<F: Float>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] += acc;
        }
    }
}

// C[k,n] += A[m,k]ᵀ·B[m,n]
fn gemm_tn<F: Float>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Float>(
    x: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let ckk = c * kh * kw;
    let mut cols = vec![F::zero(); n * oh * ow * ckk];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * ckk;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[row + (ci * kh + ky) * kw + kx] =
                                x[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<F: Float>(
    cols: &[F],
    x: &mut [F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let ckk = c * kh * kw;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * ckk;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[((ni * c + ci) * h + iy as usize) * w + ix as usize] +=
                                cols[row + (ci * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
}
