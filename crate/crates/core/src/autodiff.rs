//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes one node holding
//! its forward value, so creation order is a topological order and
//! [`Graph::backward`] simply walks the tape backwards.
//!
//! Gradients accumulate: calling `backward` twice on the same loss leaves
//! twice the gradient in every node that requires one. [`Graph::zero_grads`]
//! resets them.
//!
//! ```
//! use minmax_wsl::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.param(Tensor::from_vec(vec![1.0, 2.0]));
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w), &[2.0, 4.0]);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sigmoid outputs are snapped to multiples of this step and kept at least one
/// step away from 0 and 1.
pub const SIGMOID_STEP: f64 = 1.0 / (1u64 << 40) as f64;

/// A dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                msg: format!("zero-sized dimension in {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                msg: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// One-dimensional tensor.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    GlobalAvgPool(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    Reshape(Var),
    Gate(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Computation tape.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node {
            value,
            grad,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (da, db) = (self.data(a), self.data(b));
        let value = if sa == sb {
            let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
            Tensor { shape: sa, data }
        } else if sb.is_empty() {
            let y = db[0];
            let data = da.iter().map(|&x| f(x, y)).collect();
            Tensor { shape: sa, data }
        } else if sa.is_empty() {
            let x = da[0];
            let data = db.iter().map(|&y| f(x, y)).collect();
            Tensor { shape: sb, data }
        } else {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: sa,
                rhs: sb,
            });
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    /// Elementwise sum; either side may be a rank-0 scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, a: Var, k: f64) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| x * k).collect(),
        };
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::ScalarMul(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scalar_mul(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| x + k).collect(),
        };
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::AddScalar(a))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = da[i * k + p];
                let brow = &db[p * n..(p + 1) * n];
                for (o, &y) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            rg,
            Op::MatMul(a, b),
        ))
    }

    /// Dense layer: `x [n, f]`, `w [c, f]`, `b [c]` to `[n, c]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sb != [sw[0]] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                lhs: sw.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, f, c) = (sx[0], sx[1], sw[0]);
        let (dx, dw, db) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &dx[i * f..(i + 1) * f];
            for j in 0..c {
                let wrow = &dw[j * f..(j + 1) * f];
                out[i * c + j] = db[j] + row.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Tensor {
                shape: vec![n, c],
                data: out,
            },
            rg,
            Op::Linear { x, w, b },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// 2-D cross-correlation: `x [n, c, h, w]`, `w [k, c, kh, kw]`, `b [k]`.
    ///
    /// The output extent `(h + 2 pad - kh) / stride + 1` must divide exactly.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), self.shape(b), stride, pad)?;
        let out = conv2d_forward(&geo, self.data(x), self.data(w), self.data(b));
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Tensor {
                shape: vec![geo.n, geo.k, geo.oh, geo.ow],
                data: out,
            },
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "upsample2x",
                msg: format!("expected [n, c, h, w], got {s:?}"),
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.data(a);
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for i in 0..2 * h {
                let srow = &src[(p * h + i / 2) * w..(p * h + i / 2 + 1) * w];
                let orow = &mut out[(p * 2 * h + i) * 2 * w..(p * 2 * h + i + 1) * 2 * w];
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = srow[j / 2];
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![s[0], s[1], 2 * h, 2 * w],
                data: out,
            },
            rg,
            Op::Upsample2x(a),
        ))
    }

    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "global_avg_pool",
                msg: format!("expected [n, c, h, w], got {s:?}"),
            });
        }
        let hw = s[2] * s[3];
        let out = self
            .data(a)
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![s[0], s[1]],
                data: out,
            },
            rg,
            Op::GlobalAvgPool(a),
        ))
    }

    /// Logistic function. Outputs are rounded to multiples of [`SIGMOID_STEP`]
    /// inside `[SIGMOID_STEP, 1 - SIGMOID_STEP]`, so they are never exactly 0
    /// or 1 and `1 - y` is computed without rounding.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| sigmoid_snapped(x)).collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Relu(a))
    }

    /// Natural logarithm. Non-positive inputs are rejected; clamp first.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let src = self.data(a);
        if let Some(&bad) = src.iter().find(|&&x| x.is_nan() || x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: src.iter().map(|x| x.ln()).collect(),
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, rg, Op::Log(a)))
    }

    /// `max(a, floor)`; gradient flows only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| x.max(floor)).collect(),
        };
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::ClampMin(a, floor))
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let Some(&c) = s.last() else {
            return Err(Error::InvalidShape {
                op: "softmax",
                msg: "scalar input".into(),
            });
        };
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape: s, data: out }, rg, Op::Softmax(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    /// Multiplies every `[h, w]` plane of `x [.., h, w]` by `m [h, w]`.
    pub fn gate(&mut self, x: Var, m: Var) -> Result<Var> {
        let (sx, sm) = (self.shape(x), self.shape(m));
        if sm.len() != 2 || sx.len() < 2 || sx[sx.len() - 2..] != sm[..] {
            return Err(Error::ShapeMismatch {
                op: "gate",
                lhs: sx.to_vec(),
                rhs: sm.to_vec(),
            });
        }
        let dm = self.data(m);
        let data = self
            .data(x)
            .chunks(dm.len())
            .flat_map(|plane| plane.iter().zip(dm).map(|(a, b)| a * b))
            .collect();
        let value = Tensor {
            shape: sx.to_vec(),
            data,
        };
        let rg = self.any_grad(&[x, m]);
        Ok(self.push(value, rg, Op::Gate(x, m)))
    }

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(up) = scratch[i].take() else {
                continue;
            };
            self.propagate(i, &up, &mut scratch);
            let node = &mut self.nodes[i];
            for (g, u) in node.grad.iter_mut().zip(&up) {
                *g += u;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, up: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.broadcast_acc(scratch, a, up, |u, _| u);
                self.broadcast_acc(scratch, b, up, |u, _| u);
            }
            Op::Sub(a, b) => {
                self.broadcast_acc(scratch, a, up, |u, _| u);
                self.broadcast_acc(scratch, b, up, |u, _| -u);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                let (la, lb) = (da.len(), db.len());
                self.broadcast_acc(scratch, a, up, |u, j| u * db[if lb == 1 { 0 } else { j }]);
                self.broadcast_acc(scratch, b, up, |u, j| u * da[if la == 1 { 0 } else { j }]);
            }
            Op::ScalarMul(a, k) => {
                if let Some(ga) = self.slot(scratch, a) {
                    ga.iter_mut().zip(up).for_each(|(g, u)| *g += u * k);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.slot(scratch, a) {
                    ga.iter_mut().zip(up).for_each(|(g, u)| *g += u);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = self.slot(scratch, a) {
                    let db = self.data(b);
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            ga[r * k + p] += up[r * n..(r + 1) * n]
                                .iter()
                                .zip(brow)
                                .map(|(u, y)| u * y)
                                .sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.slot(scratch, b) {
                    let da = self.data(a);
                    for r in 0..m {
                        for p in 0..k {
                            let x = da[r * k + p];
                            for (g, u) in gb[p * n..(p + 1) * n].iter_mut().zip(&up[r * n..(r + 1) * n]) {
                                *g += x * u;
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, f) = (self.shape(x)[0], self.shape(x)[1]);
                let c = self.shape(w)[0];
                if let Some(gx) = self.slot(scratch, x) {
                    let dw = self.data(w);
                    for r in 0..n {
                        for j in 0..c {
                            let u = up[r * c + j];
                            for (g, wv) in gx[r * f..(r + 1) * f].iter_mut().zip(&dw[j * f..(j + 1) * f]) {
                                *g += u * wv;
                            }
                        }
                    }
                }
                if let Some(gw) = self.slot(scratch, w) {
                    let dx = self.data(x);
                    for r in 0..n {
                        for j in 0..c {
                            let u = up[r * c + j];
                            for (g, xv) in gw[j * f..(j + 1) * f].iter_mut().zip(&dx[r * f..(r + 1) * f]) {
                                *g += u * xv;
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(scratch, b) {
                    for r in 0..n {
                        for j in 0..c {
                            gb[j] += up[r * c + j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(scratch, a) {
                    ga.iter_mut().for_each(|g| *g += up[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(scratch, a) {
                    let u = up[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|g| *g += u);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let geo = ConvGeometry::new(self.shape(x), self.shape(w), self.shape(b), stride, pad)
                    .expect("geometry validated in forward");
                if let Some(gx) = self.slot(scratch, x) {
                    conv2d_backward_input(&geo, up, self.data(w), gx);
                }
                if let Some(gw) = self.slot(scratch, w) {
                    conv2d_backward_weight(&geo, up, self.data(x), gw);
                }
                if let Some(gb) = self.slot(scratch, b) {
                    let plane = geo.oh * geo.ow;
                    for (idx, chunk) in up.chunks(plane).enumerate() {
                        gb[idx % geo.k] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Upsample2x(a) => {
                let s = self.shape(a);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                if let Some(ga) = self.slot(scratch, a) {
                    for p in 0..planes {
                        for i in 0..2 * h {
                            let urow = &up[(p * 2 * h + i) * 2 * w..(p * 2 * h + i + 1) * 2 * w];
                            let grow = &mut ga[(p * h + i / 2) * w..(p * h + i / 2 + 1) * w];
                            for (j, u) in urow.iter().enumerate() {
                                grow[j / 2] += u;
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(a);
                let hw = s[2] * s[3];
                if let Some(ga) = self.slot(scratch, a) {
                    for (plane, u) in ga.chunks_mut(hw).zip(up) {
                        let share = u / hw as f64;
                        plane.iter_mut().for_each(|g| *g += share);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(scratch, a) {
                    for ((g, u), y) in ga.iter_mut().zip(up).zip(out) {
                        *g += u * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(a) => {
                let src = self.data(a);
                if let Some(ga) = self.slot(scratch, a) {
                    for ((g, u), x) in ga.iter_mut().zip(up).zip(src) {
                        if *x > 0.0 {
                            *g += u;
                        }
                    }
                }
            }
            Op::Log(a) => {
                let src = self.data(a);
                if let Some(ga) = self.slot(scratch, a) {
                    for ((g, u), x) in ga.iter_mut().zip(up).zip(src) {
                        *g += u / x;
                    }
                }
            }
            Op::ClampMin(a, floor) => {
                let src = self.data(a);
                if let Some(ga) = self.slot(scratch, a) {
                    for ((g, u), x) in ga.iter_mut().zip(up).zip(src) {
                        if *x > floor {
                            *g += u;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let c = *self.shape(a).last().expect("softmax input has rank >= 1");
                if let Some(ga) = self.slot(scratch, a) {
                    for ((grow, urow), yrow) in ga.chunks_mut(c).zip(up.chunks(c)).zip(out.chunks(c)) {
                        let dot: f64 = urow.iter().zip(yrow).map(|(u, y)| u * y).sum();
                        for ((g, u), y) in grow.iter_mut().zip(urow).zip(yrow) {
                            *g += y * (u - dot);
                        }
                    }
                }
            }
            Op::Gate(x, m) => {
                let dm = self.data(m);
                let plane = dm.len();
                if let Some(gx) = self.slot(scratch, x) {
                    for (gp, up_p) in gx.chunks_mut(plane).zip(up.chunks(plane)) {
                        for ((g, u), mv) in gp.iter_mut().zip(up_p).zip(dm) {
                            *g += u * mv;
                        }
                    }
                }
                if let Some(gm) = self.slot(scratch, m) {
                    let dx = self.data(x);
                    for (xp, up_p) in dx.chunks(plane).zip(up.chunks(plane)) {
                        for ((g, u), xv) in gm.iter_mut().zip(up_p).zip(xp) {
                            *g += u * xv;
                        }
                    }
                }
            }
        }
    }

    fn slot<'s>(&self, scratch: &'s mut [Option<Vec<f64>>], v: Var) -> Option<&'s mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(scratch[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    /// Adds `f(up[j], j)` into `v`'s gradient, summing when `v` is a broadcast scalar.
    fn broadcast_acc(
        &self,
        scratch: &mut [Option<Vec<f64>>],
        v: Var,
        up: &[f64],
        f: impl Fn(f64, usize) -> f64,
    ) {
        let Some(g) = self.slot(scratch, v) else {
            return;
        };
        if g.len() == up.len() {
            for (j, (gj, &u)) in g.iter_mut().zip(up).enumerate() {
                *gj += f(u, j);
            }
        } else {
            g[0] += up.iter().enumerate().map(|(j, &u)| f(u, j)).sum::<f64>();
        }
    }
}

fn sigmoid_snapped(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    let steps = (y / SIGMOID_STEP).round();
    (steps * SIGMOID_STEP).clamp(SIGMOID_STEP, 1.0 - SIGMOID_STEP)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(sx: &[usize], sw: &[usize], sb: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("expected 4-d input and kernel, got {sx:?} and {sw:?}"),
            });
        }
        if sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sb != [sw[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: sw.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (h, w, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh > ph || kw > pw {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"),
            });
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!(
                    "output size not exact: ({ph} - {kh}) and ({pw} - {kw}) must be divisible by stride {stride}"
                ),
            });
        }
        Ok(Self {
            n: sx[0],
            c: sx[1],
            h,
            w,
            k: sw[0],
            kh,
            kw,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
            stride,
            pad,
        })
    }

    /// Output positions along one axis whose input tap `o * stride + tap - pad`
    /// lands inside `[0, extent)`.
    fn valid(&self, tap: usize, extent: usize, out: usize) -> std::ops::Range<usize> {
        let lo = if self.pad > tap {
            (self.pad - tap).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if extent + self.pad > tap {
            ((extent - 1 + self.pad - tap) / self.stride + 1).min(out)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

/// `dst[i] += a * src[i * stride]`.
fn axpy_strided(dst: &mut [f64], src: &[f64], stride: usize, a: f64) {
    if stride == 1 {
        let src = &src[..dst.len()];
        dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
    } else {
        dst.iter_mut().zip(src.iter().step_by(stride)).for_each(|(d, s)| *d += a * s);
    }
}

/// `dst[i * stride] += a * src[i]`.
fn scatter_strided(dst: &mut [f64], src: &[f64], stride: usize, a: f64) {
    if stride == 1 {
        dst[..src.len()].iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
    } else {
        dst.iter_mut().step_by(stride).zip(src).for_each(|(d, s)| *d += a * s);
    }
}

/// `acc + sum_i a[i] * b[i * stride]`, accumulated left to right.
fn dot_strided(acc: f64, a: &[f64], b: &[f64], stride: usize) -> f64 {
    if stride == 1 {
        a.iter().zip(&b[..a.len()]).fold(acc, |s, (x, y)| s + x * y)
    } else {
        a.iter().zip(b.iter().step_by(stride)).fold(acc, |s, (x, y)| s + x * y)
    }
}

fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.k * plane];
    for n in 0..g.n {
        for k in 0..g.k {
            let obase = (n * g.k + k) * plane;
            out[obase..obase + plane].iter_mut().for_each(|o| *o = b[k]);
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                for i in 0..g.kh {
                    let rows = g.valid(i, g.h, g.oh);
                    for j in 0..g.kw {
                        let wv = w[((k * g.c + c) * g.kh + i) * g.kw + j];
                        let cols = g.valid(j, g.w, g.ow);
                        for oh in rows.clone() {
                            let xrow = xbase + (oh * g.stride + i - g.pad) * g.w;
                            let orow = obase + oh * g.ow;
                            let src = &x[xrow + cols.start * g.stride + j - g.pad..];
                            axpy_strided(&mut out[orow + cols.start..orow + cols.end], src, g.stride, wv);
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input(g: &ConvGeometry, up: &[f64], w: &[f64], gx: &mut [f64]) {
    let plane = g.oh * g.ow;
    for n in 0..g.n {
        for k in 0..g.k {
            let obase = (n * g.k + k) * plane;
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                for i in 0..g.kh {
                    let rows = g.valid(i, g.h, g.oh);
                    for j in 0..g.kw {
                        let wv = w[((k * g.c + c) * g.kh + i) * g.kw + j];
                        let cols = g.valid(j, g.w, g.ow);
                        for oh in rows.clone() {
                            let xrow = xbase + (oh * g.stride + i - g.pad) * g.w;
                            let orow = obase + oh * g.ow;
                            let dst = &mut gx[xrow + cols.start * g.stride + j - g.pad..];
                            scatter_strided(dst, &up[orow + cols.start..orow + cols.end], g.stride, wv);
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_weight(g: &ConvGeometry, up: &[f64], x: &[f64], gw: &mut [f64]) {
    let plane = g.oh * g.ow;
    for n in 0..g.n {
        for k in 0..g.k {
            let obase = (n * g.k + k) * plane;
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                for i in 0..g.kh {
                    let rows = g.valid(i, g.h, g.oh);
                    for j in 0..g.kw {
                        let cols = g.valid(j, g.w, g.ow);
                        let mut acc = 0.0;
                        for oh in rows.clone() {
                            let xrow = xbase + (oh * g.stride + i - g.pad) * g.w;
                            let orow = obase + oh * g.ow;
                            let src = &x[xrow + cols.start * g.stride + j - g.pad..];
                            acc = dot_strided(acc, &up[orow + cols.start..orow + cols.end], src, g.stride);
                        }
                        gw[((k * g.c + c) * g.kh + i) * g.kw + j] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of a scalar function over every input entry.
    fn numeric_grads(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> Vec<Vec<f64>> {
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.scalar(out)
        };
        let h = 1e-4;
        (0..inputs.len())
            .map(|i| {
                (0..inputs[i].numel())
                    .map(|j| {
                        let mut plus = inputs.to_vec();
                        plus[i].data_mut()[j] += h;
                        let mut minus = inputs.to_vec();
                        minus[i].data_mut()[j] -= h;
                        (eval(&plus) - eval(&minus)) / (2.0 * h)
                    })
                    .collect()
            })
            .collect()
    }

    fn check_grads(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.backward(out).unwrap();
        let numeric = numeric_grads(inputs, f);
        for (v, num) in vars.iter().zip(&numeric) {
            for (a, n) in g.grad(*v).iter().zip(num) {
                let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(err < tol, "analytic {a} vs numeric {n} (rel err {err})");
            }
        }
    }

    #[test]
    fn add_vectors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn sum_of_ones() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[4, 4]));
        let s = g.sum(a);
        assert_eq!(g.scalar(s), 16.0);
        assert!(g.value(s).is_scalar());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let k = g.param(Tensor::scalar(2.0));
        let p = g.mul(k, a).unwrap();
        let q = g.sub(p, k).unwrap();
        assert_eq!(g.value(q).data(), &[0.0, 2.0, 4.0]);
        let loss = g.sum(q);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a), &[2.0, 2.0, 2.0]);
        // d/dk sum(k a - k) = sum(a) - 3
        assert_eq!(g.grad(k), &[3.0]);
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut g = Graph::new();
        let w = g.param(Tensor::full(&[2, 3, 2], 0.3));
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert!(g.grad(w).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn gradients_accumulate_until_reset() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w), &[4.0, 8.0]);
        g.zero_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w), &[2.0, 4.0]);
    }

    #[test]
    fn constants_keep_zero_grad() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let w = g.param(Tensor::from_vec(vec![3.0, 4.0]));
        let p = g.mul(c, w).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(c), &[0.0, 0.0]);
        assert_eq!(g.grad(w), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_visits_nodes_in_reverse_creation_order() {
        // Diamond: y = a*a + a. Each path contributes once.
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(3.0));
        let sq = g.mul(a, a).unwrap();
        let y = g.add(sq, a).unwrap();
        assert!(y.index() > sq.index() && sq.index() > a.index());
        g.backward(y).unwrap();
        assert_eq!(g.grad(a), &[7.0]);
    }

    #[test]
    fn conv_ones_gives_nine() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random(&mut rng, &[1, 1, 5, 6]);
        let mut kernel = Tensor::zeros(&[1, 1, 3, 3]);
        kernel.data_mut()[4] = 1.0;
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let w = g.constant(kernel);
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn conv_rejects_inexact_and_mismatched() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 2, 8, 8]));
        let w = g.constant(Tensor::ones(&[3, 2, 3, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(g.conv2d(x, w, b, 2, 1).is_err());
        assert!(g.conv2d(x, w, b, 1, 1).is_ok());
        let w1 = g.constant(Tensor::ones(&[3, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, w1, b, 1, 1), Err(Error::ShapeMismatch { .. })));
        let big = g.constant(Tensor::ones(&[3, 2, 11, 11]));
        assert!(g.conv2d(x, big, b, 1, 1).is_err());
    }

    #[test]
    fn conv_strided_output_size() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 1, 32, 32]));
        let w = g.constant(Tensor::ones(&[4, 1, 4, 4]));
        let b = g.constant(Tensor::zeros(&[4]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 16, 16]);
        // interior taps see all 16 ones, corners only 9
        assert_eq!(g.value(y).data()[0], 9.0);
        assert_eq!(g.value(y).data()[16 + 1], 16.0);
    }

    #[test]
    fn sigmoid_and_log_basics() {
        let mut g = Graph::new();
        let z = g.param(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.scalar(s), 0.5);
        g.backward(s).unwrap();
        assert_eq!(g.grad(z), &[0.25]);

        let one = g.constant(Tensor::scalar(1.0));
        let l = g.log(one).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let zero = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(g.log(zero), Err(Error::Domain { .. })));
    }

    #[test]
    fn sigmoid_never_saturates() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(vec![-800.0, -40.0, 40.0, 800.0]));
        let s = g.sigmoid(z);
        for &y in g.value(s).data() {
            assert!(y > 0.0 && y < 1.0);
            assert_eq!((1.0 - (1.0 - y)), y);
        }
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let p = g.softmax(a).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);

        let a = g.constant(Tensor::from_vec(vec![1000.0, 0.0]));
        let p = g.softmax(a).unwrap();
        let d = g.value(p).data();
        assert!(d.iter().all(|x| x.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-12);

        // exp-normalise at high precision: e^k / (e + e^2 + e^3)
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let p = g.softmax(a).unwrap();
        for (got, want) in g.value(p).data().iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random(&mut rng, &[2, 3]), random(&mut rng, &[3, 2])];
            check_grads(
                &inputs,
                &|g, v| {
                    let m = g.matmul(v[0], v[1]).unwrap();
                    let sq = g.mul(m, m).unwrap();
                    g.sum(sq)
                },
                1e-4,
            );
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let inputs = [
                random(&mut rng, &[1, 2, 5, 5]),
                random(&mut rng, &[3, 2, 3, 3]),
                random(&mut rng, &[3]),
                random(&mut rng, &[1, 3, 5, 5]),
            ];
            check_grads(
                &inputs,
                &|g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
                    let p = g.mul(y, v[3]).unwrap();
                    g.sum(p)
                },
                1e-4,
            );
        }
    }

    #[test]
    fn strided_conv_and_upsample_gradients() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let inputs = [
                random(&mut rng, &[2, 2, 8, 8]),
                random(&mut rng, &[3, 2, 4, 4]),
                random(&mut rng, &[3]),
                random(&mut rng, &[2, 3, 8, 8]),
            ];
            check_grads(
                &inputs,
                &|g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
                    let u = g.upsample2x(y).unwrap();
                    let p = g.mul(u, v[3]).unwrap();
                    g.sum(p)
                },
                1e-4,
            );
        }
    }

    #[test]
    fn pointwise_gradients() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let inputs = [random(&mut rng, &[2, 3, 4]), random(&mut rng, &[2, 3, 4])];
            check_grads(
                &inputs,
                &|g, v| {
                    let s = g.sigmoid(v[0]);
                    let r = g.relu(v[1]);
                    let shifted = g.add_scalar(s, 0.5);
                    let l = g.log(shifted).unwrap();
                    let m = g.mul(l, r).unwrap();
                    let d = g.sub(m, s).unwrap();
                    let k = g.scalar_mul(d, 1.7);
                    g.mean(k)
                },
                1e-4,
            );
        }
    }

    #[test]
    fn softmax_linear_pool_gate_gradients() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let inputs = [
                random(&mut rng, &[1, 3, 4, 4]),
                random(&mut rng, &[4, 4]),
                random(&mut rng, &[2, 3]),
                random(&mut rng, &[2]),
                random(&mut rng, &[2]),
            ];
            check_grads(
                &inputs,
                &|g, v| {
                    let gated = g.gate(v[0], v[1]).unwrap();
                    let pooled = g.global_avg_pool(gated).unwrap();
                    let logits = g.linear(pooled, v[2], v[3]).unwrap();
                    let flat = g.reshape(logits, &[2]).unwrap();
                    let p = g.softmax(flat).unwrap();
                    let w = g.mul(p, v[4]).unwrap();
                    g.sum(w)
                },
                1e-4,
            );
        }
    }

    #[test]
    fn clamp_blocks_gradient_below_floor() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_vec(vec![1e-15, 0.5]));
        let c = g.clamp_min(a, 1e-12);
        assert_eq!(g.value(c).data(), &[1e-12, 0.5]);
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a), &[0.0, 1.0]);
    }
}
