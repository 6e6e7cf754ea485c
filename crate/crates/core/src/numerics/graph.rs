//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node whose inputs already exist, so the node order is a
//! topological order and the backward sweep is a single reverse pass.
//! Parameters are registered by address: registering the same tensor twice
//! yields the same [`Var`], which makes gradient accumulation across multiple
//! uses automatic.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom, ConvTGeom, PoolGeom};
use super::{dim_err, NumericsError, Real, Result, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        output_padding: usize,
    },
    AvgPool2d {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    Unary {
        x: Var,
        act: Activation,
    },
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat(Var, Var),
    Slice {
        x: Var,
        start: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Minimum(Var, Var),
    ClampStraightThrough(Var),
    Bce {
        pred: Var,
        target: Vec<T>,
        eps: T,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::Unary {
                act: Activation::Relu, ..
            } => "relu",
            Op::Unary {
                act: Activation::Sigmoid,
                ..
            } => "sigmoid",
            Op::Unary {
                act: Activation::Tanh, ..
            } => "tanh",
            Op::Exp(_) => "exp",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Minimum(..) => "minimum",
            Op::ClampStraightThrough(_) => "clamp",
            Op::Bce { .. } => "bce",
            Op::Mse { .. } => "mse",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape for one forward/backward pass. Confined to one thread.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<usize, Var>,
    trainable: bool,
    non_finite: Option<(usize, &'static str)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            trainable: true,
            non_finite: None,
        }
    }

    /// A tape on which parameters are recorded as constants.
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.trainable = false;
        g
    }

    /// While false, [`Graph::param`] registers tensors as constants: gradients
    /// still flow *through* ops that use them, but never *into* them.
    pub fn set_params_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Which side of every piecewise boundary each element sits on: `relu`
    /// outputs above zero, and `minimum` picking its first argument. Two
    /// tapes with equal patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Unary {
                    act: Activation::Relu, ..
                } => bits.extend(node.value.data().iter().map(|&v| v > T::zero())),
                Op::Minimum(a, b) => {
                    let (a, b) = (self.value(a).data(), self.value(b).data());
                    bits.extend(a.iter().zip(b).map(|(x, y)| x <= y));
                }
                _ => {}
            }
        }
        bits
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// First op (id, name) whose forward output was not finite.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.non_finite
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((op_id, op)) => Err(NumericsError::NonFinite { op_id, op }),
            None => Ok(()),
        }
    }

    /// Input or constant leaf; gradients are not tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (e.g. an input under a gradient check).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies the current value of `v` into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Registers a parameter tensor. Repeated registration of the same tensor
    /// returns the same node.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        if !self.trainable {
            return self.constant(value);
        }
        let key = t as *const Tensor<T> as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        value.requires_grad = true;
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(key, v);
        v
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a parameter registered through [`Graph::param`].
    pub fn param_grad(&self, t: &Tensor<T>) -> Option<&[T]> {
        let key = t as *const Tensor<T> as usize;
        self.params.get(&key).and_then(|&v| self.grad(v))
    }

    // ---- ops -------------------------------------------------------------

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if ws.len() != 2 || bs != [ws[0]] || xs.is_empty() || xs.len() > 2 || *xs.last().unwrap() != ws[1] {
            return dim_err("linear", format!("x {xs:?}, w {ws:?}, b {bs:?}"));
        }
        let (n, inp, out) = (if xs.len() == 2 { xs[0] } else { 1 }, ws[1], ws[0]);
        let mut y = vec![T::zero(); n * out];
        for row in y.chunks_mut(out) {
            row.copy_from_slice(self.value(b).data());
        }
        kernels::matmul(
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut y,
            n,
            inp,
            out,
            T::one(),
        );
        let shape = if xs.len() == 2 { vec![n, out] } else { vec![out] };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(shape, y)?, Op::Linear { x, w, b }, rg))
    }

    fn image_dims(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize, usize, bool)> {
        match *self.shape(x) {
            [n, c, h, w] => Ok((n, c, h, w, true)),
            [c, h, w] => Ok((1, c, h, w, false)),
            ref s => dim_err(op, format!("expected [N,C,H,W] or [C,H,W], got {s:?}")),
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (n, c, h, wd, batched) = self.image_dims(x, "conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] || self.shape(b) != [ws[0]] {
            return dim_err(
                "conv2d",
                format!("input channels {c}, weight {ws:?}, bias {:?}", self.shape(b)),
            );
        }
        let k = ws[2];
        if stride == 0 || k > h || k > wd {
            return dim_err("conv2d", format!("kernel {k} stride {stride} on {h}x{wd}"));
        }
        let geom = ConvGeom {
            batch: n,
            c_in: c,
            c_out: ws[0],
            h,
            w: wd,
            kernel: k,
            stride,
        };
        let y = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let shape = image_shape(batched, n, ws[0], geom.out_h(), geom.out_w());
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(shape, y)?, Op::Conv2d { x, w, b, stride }, rg))
    }

    /// Transposed convolution with weight `[C_in, C_out, k, k]`. Output size
    /// is `(H-1)*stride + k + output_padding`; `output_padding < stride`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, output_padding: usize) -> Result<Var> {
        let (n, c, h, wd, batched) = self.image_dims(x, "conv_transpose2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != c || ws[2] != ws[3] || self.shape(b) != [ws[1]] {
            return dim_err(
                "conv_transpose2d",
                format!("input channels {c}, weight {ws:?}, bias {:?}", self.shape(b)),
            );
        }
        if stride == 0 || output_padding >= stride {
            return dim_err(
                "conv_transpose2d",
                format!("output_padding {output_padding} must be < stride {stride}"),
            );
        }
        let geom = ConvTGeom {
            batch: n,
            c_in: c,
            c_out: ws[1],
            h,
            w: wd,
            kernel: ws[2],
            stride,
            output_padding,
        };
        let y =
            kernels::conv_transpose2d_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let shape = image_shape(batched, n, ws[1], geom.out_h(), geom.out_w());
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                output_padding,
            },
            rg,
        ))
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w, batched) = self.image_dims(x, "avg_pool2d")?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return dim_err("avg_pool2d", format!("kernel {kernel} stride {stride} on {h}x{w}"));
        }
        let geom = PoolGeom {
            planes: n * c,
            h,
            w,
            kernel,
            stride,
        };
        let y = kernels::avg_pool_forward(&geom, self.value(x).data());
        let shape = image_shape(batched, n, c, geom.out_h(), geom.out_w());
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, y)?, Op::AvgPool2d { x, kernel, stride }, rg))
    }

    pub fn elementwise(&mut self, act: Activation, x: Var) -> Var {
        let f: fn(T) -> T = match act {
            Activation::Relu => |v| if v > T::zero() { v } else { T::zero() },
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => |v| v.tanh(),
        };
        let y = self.map(x, f);
        let rg = self.rg(x);
        self.push(y, Op::Unary { x, act }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.elementwise(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.elementwise(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.elementwise(Activation::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.map(x, |v| v.exp());
        let rg = self.rg(x);
        self.push(y, Op::Exp(x), rg)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let xv = self.value(x);
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    fn zip(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return dim_err(op, format!("{:?} vs {:?}", av.shape(), bv.shape()));
        }
        Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip(a, b, "minimum", |x, y| if x <= y { x } else { y })?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Minimum(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let y = self.map(x, |v| v * c);
        let rg = self.rg(x);
        self.push(y, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let y = self.map(x, |v| v + c);
        let rg = self.rg(x);
        self.push(y, Op::AddScalar(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: T = xv.data().iter().copied().sum::<T>() / T::from_f64(xv.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    fn rows_cols(&self, x: Var, op: &'static str) -> Result<(usize, usize, bool)> {
        match *self.shape(x) {
            [n, d] => Ok((n, d, true)),
            [d] => Ok((1, d, false)),
            ref s => dim_err(op, format!("expected [N,D] or [D], got {s:?}")),
        }
    }

    /// Concatenation along the last axis of two `[N, D]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, da, batched) = self.rows_cols(a, "concat")?;
        let (nb, db, batched_b) = self.rows_cols(b, "concat")?;
        if na != nb || batched != batched_b {
            return dim_err("concat", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(na * (da + db));
        for r in 0..na {
            y.extend_from_slice(&av[r * da..(r + 1) * da]);
            y.extend_from_slice(&bv[r * db..(r + 1) * db]);
        }
        let shape = if batched { vec![na, da + db] } else { vec![da + db] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, y)?, Op::Concat(a, b), rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d, batched) = self.rows_cols(x, "slice")?;
        if len == 0 || start + len > d {
            return dim_err("slice", format!("{start}..{} of width {d}", start + len));
        }
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(n * len);
        for r in 0..n {
            y.extend_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        let shape = if batched { vec![n, len] } else { vec![len] };
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, y)?, Op::Slice { x, start }, rg))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d, _) = self.rows_cols(x, "layer_norm")?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return dim_err("layer_norm", format!("width {d}, gamma {:?}", self.shape(gamma)));
        }
        let eps = T::from_f64(1e-5);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut y = vec![T::zero(); n * d];
        let dn = T::from_f64(d as f64);
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, y)?,
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

    /// Clamps to `[lo, hi]` in the forward pass and passes gradients through
    /// unchanged.
    pub fn clamp_straight_through(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let y = self.map(x, |v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(y, Op::ClampStraightThrough(x), rg)
    }

    /// Mean binary cross-entropy of probabilities `pred` against a constant
    /// binary target. Probabilities are clamped to `[eps, 1-eps]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return dim_err("bce", format!("{:?} vs {:?}", pv.shape(), target.shape()));
        }
        let eps = T::from_f64(eps);
        let one = T::one();
        let total: T = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &m)| {
                let p = p.max(eps).min(one - eps);
                -(m * p.ln() + (one - m) * (one - p).ln())
            })
            .sum();
        let loss = total / T::from_f64(pv.numel() as f64);
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.data().to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return dim_err("mse", format!("{:?} vs {:?}", pv.shape(), target.shape()));
        }
        let total: T = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let loss = total / T::from_f64(pv.numel() as f64);
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Populates gradients of every tracked node with respect to the scalar
    /// `loss`. Intermediate gradients are released once propagated; leaf
    /// gradients remain readable through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(NumericsError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.check_finite()?;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.node_backward(i, &gy);
            for (v, g) in contributions {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(NumericsError::NonFinite {
                        op_id: i,
                        op: self.nodes[i].op.name(),
                    });
                }
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        match &mut self.grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Input gradients of node `i` for inputs that require them.
    fn node_backward(&self, i: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (o, inp) = (ws[0], ws[1]);
                let n = gy.len() / o;
                if rg(*x) {
                    let mut dx = vec![T::zero(); n * inp];
                    kernels::matmul(gy, false, val(*w), false, &mut dx, n, o, inp, T::zero());
                    out.push((*x, dx));
                }
                if rg(*w) {
                    let mut dw = vec![T::zero(); o * inp];
                    kernels::matmul(gy, true, val(*x), false, &mut dw, o, n, inp, T::zero());
                    out.push((*w, dw));
                }
                if rg(*b) {
                    out.push((*b, column_sums(gy, o)));
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let (n, c, h, wd, _) = self.image_dims(*x, "conv2d").expect("checked in forward");
                let ws = self.shape(*w);
                let geom = ConvGeom {
                    batch: n,
                    c_in: c,
                    c_out: ws[0],
                    h,
                    w: wd,
                    kernel: ws[2],
                    stride: *stride,
                };
                let (dx, dw, db) = kernels::conv2d_backward(&geom, val(*x), val(*w), gy, rg(*x));
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if rg(*w) {
                    out.push((*w, dw));
                }
                if rg(*b) {
                    out.push((*b, db));
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                output_padding,
            } => {
                let (n, c, h, wd, _) = self.image_dims(*x, "conv_transpose2d").expect("checked in forward");
                let ws = self.shape(*w);
                let geom = ConvTGeom {
                    batch: n,
                    c_in: c,
                    c_out: ws[1],
                    h,
                    w: wd,
                    kernel: ws[2],
                    stride: *stride,
                    output_padding: *output_padding,
                };
                let (dx, dw, db) = kernels::conv_transpose2d_backward(&geom, val(*x), val(*w), gy, rg(*x));
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if rg(*w) {
                    out.push((*w, dw));
                }
                if rg(*b) {
                    out.push((*b, db));
                }
            }
            Op::AvgPool2d { x, kernel, stride } => {
                let (n, c, h, w, _) = self.image_dims(*x, "avg_pool2d").expect("checked in forward");
                let geom = PoolGeom {
                    planes: n * c,
                    h,
                    w,
                    kernel: *kernel,
                    stride: *stride,
                };
                out.push((*x, kernels::avg_pool_backward(&geom, gy)));
            }
            Op::Unary { x, act } => {
                let y = node.value.data();
                let dx: Vec<T> = match act {
                    Activation::Relu => gy
                        .iter()
                        .zip(val(*x))
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                    Activation::Sigmoid => gy.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect(),
                    Activation::Tanh => gy.iter().zip(y).map(|(&g, &t)| g * (T::one() - t * t)).collect(),
                };
                out.push((*x, dx));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                out.push((*x, gy.iter().zip(y).map(|(&g, &e)| g * e).collect()));
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    out.push((*a, gy.to_vec()));
                }
                if rg(*b) {
                    out.push((*b, gy.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    out.push((*a, gy.to_vec()));
                }
                if rg(*b) {
                    out.push((*b, gy.iter().map(|&g| -g).collect()));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    out.push((*a, gy.iter().zip(val(*b)).map(|(&g, &v)| g * v).collect()));
                }
                if rg(*b) {
                    out.push((*b, gy.iter().zip(val(*a)).map(|(&g, &v)| g * v).collect()));
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if rg(*a) {
                    let d = gy
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&g, (&x, &y))| if x <= y { g } else { T::zero() })
                        .collect();
                    out.push((*a, d));
                }
                if rg(*b) {
                    let d = gy
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&g, (&x, &y))| if x <= y { T::zero() } else { g })
                        .collect();
                    out.push((*b, d));
                }
            }
            Op::Scale(x, c) => out.push((*x, gy.iter().map(|&g| g * *c).collect())),
            Op::AddScalar(x) | Op::Reshape(x) | Op::ClampStraightThrough(x) => out.push((*x, gy.to_vec())),
            Op::Sum(x) => out.push((*x, vec![gy[0]; self.nodes[x.0].value.numel()])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                out.push((*x, vec![gy[0] / T::from_f64(n as f64); n]));
            }
            Op::Concat(a, b) => {
                let da = *self.shape(*a).last().unwrap();
                let db = *self.shape(*b).last().unwrap();
                let rows = gy.len() / (da + db);
                if rg(*a) {
                    let mut g = Vec::with_capacity(rows * da);
                    for r in 0..rows {
                        g.extend_from_slice(&gy[r * (da + db)..r * (da + db) + da]);
                    }
                    out.push((*a, g));
                }
                if rg(*b) {
                    let mut g = Vec::with_capacity(rows * db);
                    for r in 0..rows {
                        g.extend_from_slice(&gy[r * (da + db) + da..(r + 1) * (da + db)]);
                    }
                    out.push((*b, g));
                }
            }
            Op::Slice { x, start } => {
                let d = *self.shape(*x).last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let rows = gy.len() / len;
                let mut g = vec![T::zero(); rows * d];
                for r in 0..rows {
                    g[r * d + start..r * d + start + len].copy_from_slice(&gy[r * len..(r + 1) * len]);
                }
                out.push((*x, g));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).len();
                let rows = gy.len() / d;
                let gv = val(*gamma);
                if rg(*x) {
                    let dn = T::from_f64(d as f64);
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let (gr, hr) = (&gy[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let dh: Vec<T> = gr.iter().zip(gv).map(|(&g, &s)| g * s).collect();
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] / dn * (dn * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    out.push((*x, dx));
                }
                if rg(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gy[r * d + j] * xhat[r * d + j];
                        }
                    }
                    out.push((*gamma, dg));
                }
                if rg(*beta) {
                    out.push((*beta, column_sums(gy, d)));
                }
            }
            Op::Bce { pred, target, eps } => {
                let pv = val(*pred);
                let scale = gy[0] / T::from_f64(pv.len() as f64);
                let one = T::one();
                let d = pv
                    .iter()
                    .zip(target)
                    .map(|(&p, &m)| {
                        let p = p.max(*eps).min(one - *eps);
                        scale * (-m / p + (one - m) / (one - p))
                    })
                    .collect();
                out.push((*pred, d));
            }
            Op::Mse { pred, target } => {
                let pv = val(*pred);
                let scale = T::from_f64(2.0) * gy[0] / T::from_f64(pv.len() as f64);
                out.push((*pred, pv.iter().zip(target).map(|(&p, &t)| scale * (p - t)).collect()));
            }
        }
        out
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn column_sums<T: Real>(m: &[T], cols: usize) -> Vec<T> {
    let mut s = vec![T::zero(); cols];
    for row in m.chunks(cols) {
        s.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    s
}

fn image_shape(batched: bool, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if batched {
        vec![n, c, h, w]
    } else {
        vec![c, h, w]
    }
}
