use nalgebra::DMatrix;

use crate::numerics::{Graph, Real, Result, Rng, Tensor, Var};

/// Gain for layers followed by a ReLU.
pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Orthogonal matrix of shape `[rows, cols]` (flattened row-major), scaled by
/// `gain`. Rows are orthonormal when `rows <= cols`, columns otherwise.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut Rng) -> Vec<f64> {
    let tall = rows >= cols;
    let (m, n) = if tall { (rows, cols) } else { (cols, rows) };
    let a = DMatrix::<f64>::from_fn(m, n, |_, _| rng.normal());
    let qr = a.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut out = vec![0.0; rows * cols];
    for j in 0..n {
        // Sign fix makes the distribution uniform over orthogonal matrices.
        let s = if r[(j, j)] < 0.0 { -gain } else { gain };
        for i in 0..m {
            let (row, col) = if tall { (i, j) } else { (j, i) };
            out[row * cols + col] = q[(i, j)] * s;
        }
    }
    out
}

fn param<T: Real>(shape: &[usize], values: &[f64]) -> Tensor<T> {
    Tensor::from_f64(shape, values).expect("shape matches").into_param()
}

fn zeros<T: Real>(n: usize) -> Tensor<T> {
    Tensor::zeros(&[n]).into_param()
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, gain: f64, rng: &mut Rng) -> Self {
        Self {
            weight: param(&[outputs, inputs], &orthogonal(outputs, inputs, gain, rng)),
            bias: zeros(outputs),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(&self.weight), g.param(&self.bias));
        g.linear(x, w, b)
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn zero(&mut self) {
        self.weight.data_mut().fill(T::zero());
        self.bias.data_mut().fill(T::zero());
    }

    pub(crate) fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        Self {
            weight: param(&[cout, cin, k, k], &orthogonal(cout, cin * k * k, RELU_GAIN, rng)),
            bias: zeros(cout),
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(&self.weight), g.param(&self.bias));
        g.conv2d(x, w, b, self.stride)
    }

    pub(crate) fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution; weight layout `[C_in, C_out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub output_padding: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, output_padding: usize, rng: &mut Rng) -> Self {
        Self {
            weight: param(&[cin, cout, k, k], &orthogonal(cin, cout * k * k, RELU_GAIN, rng)),
            bias: zeros(cout),
            stride,
            output_padding,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(&self.weight), g.param(&self.bias));
        g.conv_transpose2d(x, w, b, self.stride, self.output_padding)
    }

    pub fn zero(&mut self) {
        self.weight.data_mut().fill(T::zero());
        self.bias.data_mut().fill(T::zero());
    }

    pub(crate) fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(&[dim], T::one()).into_param(),
            beta: zeros(dim),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(&self.gamma), g.param(&self.beta));
        g.layer_norm(x, gamma, beta)
    }

    pub(crate) fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
