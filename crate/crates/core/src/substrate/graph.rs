//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order; `backward` walks it once in reverse.

use std::fmt;

use super::gemm::{gemm, MatRef};
use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f32 = 1e-5;

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_K: f32 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside the substrate (rope, packed
/// attention, pooling, normality statistics).
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one entry per input, `None` for inputs that
    /// receive no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>>;
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Gelu { x: Var },
    Softmax { x: Var },
    Reshape { x: Var },
    Transpose { x: Var },
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    SumAll { x: Var },
    MeanAll { x: Var },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Square { x: Var },
    Sqrt { x: Var },
    Exp { x: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

/// Accumulated gradients after [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros if the node received no gradient.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an externally computed op. `output` must already hold the
    /// forward value.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            output,
            inputs,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    // ----- forward ops -------------------------------------------------

    /// `a[..., k] @ b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            0.0,
            &mut out,
            n,
            1,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, &[a, b], Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, &[a, b], Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * c).collect())
            .expect("same shape");
        self.push(t, &[x], Op::Scale { x, c })
    }

    /// Normalizes over the last dimension with population variance, then
    /// applies the optional affine `gamma`, `beta` (each `[d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine {:?} for input {shape:?}", self.shape(p)),
                ));
            }
        }
        let xs = self.value(x).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gv = self.value(g).data();
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(gv).for_each(|(o, g)| *o *= g);
            }
        }
        if let Some(b) = beta {
            let bv = self.value(b).data();
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            &inputs,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, gelu);
        self.push(t, &[x], Op::Gelu { x })
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(t, &[x], Op::Softmax { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, &[x], Op::Reshape { x }))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", format!("rank-1 input {shape:?}")));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let out = transpose_last2(v.data(), r, c);
        let mut s = shape;
        let n = s.len();
        s.swap(n - 2, n - 1);
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, &[x], Op::Transpose { x }))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, &[x], Op::Slice { x, axis, start }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{first:?} with {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut s = first;
        s[axis] = total;
        let t = Tensor::new(s, out)?;
        Ok(self.push(
            t,
            xs,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], Op::SumAll { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f32>() / v.numel() as f32;
        self.push(Tensor::scalar(s), &[x], Op::MeanAll { x })
    }

    /// Sums over `axis`, keeping it as an extent-1 dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.reduce_axis(x, axis, 1.0)?;
        Ok(self.push(t, &[x], Op::SumAxis { x, axis }))
    }

    /// Means over `axis`, keeping it as an extent-1 dimension.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis}")))?;
        let t = self.reduce_axis(x, axis, 1.0 / n as f32)?;
        Ok(self.push(t, &[x], Op::MeanAxis { x, axis }))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v * v);
        self.push(t, &[x], Op::Square { x })
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let t = self.map(x, f32::sqrt);
        self.push(t, &[x], Op::Sqrt { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, f32::exp);
        self.push(t, &[x], Op::Exp { x })
    }

    // ----- helpers -----------------------------------------------------

    fn map(&self, x: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
            .expect("same shape")
    }

    fn reduce_axis(&self, x: Var, axis: usize, factor: f32) -> Result<Tensor> {
        let v = self.value(x);
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(Error::shape("reduce", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &v.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        out.iter_mut().for_each(|e| *e *= factor);
        let mut s = shape.to_vec();
        s[axis] = 1;
        Tensor::new(s, out)
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(va.shape(), vb.shape())
            .ok_or_else(|| Error::shape(op, format!("{:?} vs {:?}", va.shape(), vb.shape())))?;
        let n: usize = out_shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let out: Vec<f32> = if va.shape() == vb.shape() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if is_suffix(vb.shape(), &out_shape) && va.numel() == n {
            let m = db.len();
            da.iter().enumerate().map(|(i, &x)| f(x, db[i % m])).collect()
        } else if is_suffix(va.shape(), &out_shape) && vb.numel() == n {
            let m = da.len();
            db.iter().enumerate().map(|(i, &y)| f(da[i % m], y)).collect()
        } else {
            let ia = broadcast_indices(&out_shape, va.shape());
            let ib = broadcast_indices(&out_shape, vb.shape());
            ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Tensor::new(out_shape, out)
    }

    // ----- backward ----------------------------------------------------

    /// Reverse pass from a scalar `loss`. Every node that requires grad and
    /// feeds `loss` gets an accumulated gradient; intermediate gradients are
    /// dropped once propagated, leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.nodes[v.0].value.numel());
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn reduce_to(&self, g: &[f32], out_shape: &[usize], v: Var) -> Vec<f32> {
        let in_shape = self.shape(v);
        if in_shape == out_shape {
            return g.to_vec();
        }
        let n_in: usize = in_shape.iter().product();
        let mut acc = vec![0.0; n_in];
        if is_suffix(in_shape, out_shape) {
            for (i, gi) in g.iter().enumerate() {
                acc[i % n_in] += gi;
            }
        } else {
            let idx = broadcast_indices(out_shape, in_shape);
            for (gi, &j) in g.iter().zip(&idx) {
                acc[j] += gi;
            }
        }
        acc
    }

    fn backward_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.numel() / k;
                let gm = MatRef::new(g, m, n);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(1.0, gm, MatRef::new(vb.data(), k, n).t(), 0.0, &mut da, k, 1);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(1.0, MatRef::new(va.data(), m, k).t(), gm, 0.0, &mut db, n, 1);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                let ga = self.reduce_to(g, out.shape(), *a);
                self.accumulate(grads, *a, ga);
                let gb = self.reduce_to(g, out.shape(), *b);
                self.accumulate(grads, *b, gb);
            }
            Op::Sub { a, b } => {
                let ga = self.reduce_to(g, out.shape(), *a);
                self.accumulate(grads, *a, ga);
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                let gb = self.reduce_to(&neg, out.shape(), *b);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul { a, b } => {
                let shape = out.shape();
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.requires_grad(this) {
                        continue;
                    }
                    let ov = self.value(other);
                    let full: Vec<f32> = if ov.shape() == shape {
                        g.iter().zip(ov.data()).map(|(x, y)| x * y).collect()
                    } else {
                        let idx = broadcast_indices(shape, ov.shape());
                        g.iter().zip(&idx).map(|(x, &j)| x * ov.data()[j]).collect()
                    };
                    let r = self.reduce_to(&full, shape, this);
                    self.accumulate(grads, this, r);
                }
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *out.shape().last().unwrap();
                if let Some(b) = beta {
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    self.accumulate(grads, *b, db);
                }
                if let Some(gm) = gamma {
                    let mut dg = vec![0.0; d];
                    for (row, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row[j] * xr[j];
                        }
                    }
                    self.accumulate(grads, *gm, dg);
                }
                if self.requires_grad(*x) {
                    let gv = gamma.map(|gm| self.value(gm).data());
                    let mut dx = vec![0.0; g.len()];
                    let mut dxhat = vec![0.0; d];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv.map_or(1.0, |w| w[j]);
                        }
                        let m1 = dxhat.iter().sum::<f32>() / d as f32;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                        for j in 0..d {
                            dx[r * d + j] = inv_std[r] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                let dx = g.iter().zip(xv).map(|(gi, &v)| gi * gelu_grad(v)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x } => {
                let d = *out.shape().last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::Transpose { x } => {
                let s = out.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                self.accumulate(grads, *x, transpose_last2(g, r, c));
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = out.shape()[*axis];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { xs, axis } => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.requires_grad(v) {
                        let mut dx = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            dx.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        self.accumulate(grads, v, dx);
                    }
                    offset += len;
                }
            }
            Op::SumAll { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n as f32; n]);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let in_shape = self.shape(*x);
                let factor = match node.op {
                    Op::MeanAxis { .. } => 1.0 / in_shape[*axis] as f32,
                    _ => 1.0,
                };
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let n = in_shape[*axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for a in 0..n {
                        let dst = &mut dx[(o * n + a) * inner..(o * n + a + 1) * inner];
                        dst.iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                            .for_each(|(d, s)| *d = s * factor);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Square { x } => {
                let xv = self.value(*x).data();
                let dx = g.iter().zip(xv).map(|(gi, v)| 2.0 * v * gi).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sqrt { x } => {
                let dx = g.iter().zip(out.data()).map(|(gi, y)| gi / (2.0 * y)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Exp { x } => {
                let dx = g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let dins = op.backward(&vals, out, g);
                for (v, d) in inputs.iter().zip(dins) {
                    if let Some(d) = d {
                        self.accumulate(grads, *v, d);
                    }
                }
            }
        }
    }
}

pub fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

fn transpose_last2(src: &[f32], r: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for (dst, s) in out.chunks_mut(r * c).zip(src.chunks(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = s[i * c + j];
            }
        }
    }
    out
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast against it.
fn broadcast_indices(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let pad = out_shape.len() - in_shape.len();
    let in_strides = strides(in_shape);
    let eff: Vec<usize> = (0..out_shape.len())
        .map(|i| {
            if i < pad || in_shape[i - pad] == 1 {
                0
            } else {
                in_strides[i - pad]
            }
        })
        .collect();
    let mut idx = vec![0usize; out_shape.len()];
    let mut out = Vec::with_capacity(n);
    let mut cur = 0usize;
    for _ in 0..n {
        out.push(cur);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            cur += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}
