//! Dense row-major matrices and a small multilayer perceptron with hand-written
//! reverse-mode gradients and an Adam optimizer.
//!
//! Parameters of an [`Mlp`] live in one flat `Vec<f32>` (per layer: weights
//! `in × out` row-major, then `out` biases), so optimizer state, Polyak
//! averaging and checkpoints all operate on plain slices.
//!
//! Every kernel accumulates in a fixed order that depends only on the
//! position of a row inside its batch, never on the batch size. Appending
//! rows whose upstream gradient is zero therefore leaves parameter gradients
//! bit-identical.

use alloc::{format, vec, vec::Vec};
use core::fmt;

use rand::Rng as _;

use crate::error::{ensure_finite, first_non_finite, Error, Result};
use crate::rng::Rng;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{} values for {rows}x{cols}", rows * cols), format!("{} values", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn ensure_finite(&self, context: &'static str) -> Result<()> {
        ensure_finite(&self.data, context)
    }

    fn shape_str(&self) -> alloc::string::String {
        format!("{}x{}", self.rows, self.cols)
    }
}

/// Activation applied after every layer except the last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// No nonlinearity; only meaningful for single-layer networks.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSlot {
    input: usize,
    output: usize,
    weights: usize,
    bias: usize,
}

/// Fully connected network: hidden layers use `activation`, the last layer is
/// linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    layers: Vec<LayerSlot>,
    params: Vec<f32>,
}

/// Intermediate activations recorded by [`Mlp::forward_tape`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Matrix>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.acts.last().expect("tape always holds the input")
    }

    pub fn input(&self) -> &Matrix {
        &self.acts[0]
    }
}

/// Gradient of a scalar loss with respect to every parameter, laid out like
/// [`Mlp::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<f32>);

impl ParamGrads {
    pub fn zeros_like(model: &Mlp) -> Self {
        ParamGrads(vec![0.0; model.param_count()])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    /// `self += other`
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += *b;
        }
    }
}

pub struct Backward {
    pub grads: ParamGrads,
    pub input_grad: Matrix,
}

fn layer_slots(sizes: &[usize]) -> Vec<LayerSlot> {
    let mut offset = 0;
    sizes
        .windows(2)
        .map(|w| {
            let slot = LayerSlot { input: w[0], output: w[1], weights: offset, bias: offset + w[0] * w[1] };
            offset += w[0] * w[1] + w[1];
            slot
        })
        .collect()
}

/// Number of parameters of a network with the given layer sizes.
pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Initializes weights and biases uniformly in `±1/sqrt(fan_in)`.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        Self::validate_sizes(sizes)?;
        let layers = layer_slots(sizes);
        let mut params = vec![0.0f32; param_count(sizes)];
        for slot in &layers {
            let bound = 1.0 / libm::sqrtf(slot.input as f32);
            let end = slot.bias + slot.output;
            for p in &mut params[slot.weights..end] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(Mlp { sizes: sizes.to_vec(), activation, layers, params })
    }

    pub fn from_params(sizes: &[usize], activation: Activation, params: Vec<f32>) -> Result<Self> {
        Self::validate_sizes(sizes)?;
        let expected = param_count(sizes);
        if params.len() != expected {
            return Err(Error::shape(format!("{expected} parameters"), format!("{}", params.len())));
        }
        ensure_finite(&params, "mlp parameters")?;
        Ok(Mlp { sizes: sizes.to_vec(), activation, layers: layer_slots(sizes), params })
    }

    fn validate_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 {
            return Err(Error::invalid("an mlp needs at least input and output sizes"));
        }
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::invalid(format!("layer size {i} is zero")));
        }
        Ok(())
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    /// Weights of layer `l`, `in × out` row-major.
    pub fn weights(&self, l: usize) -> &[f32] {
        let s = self.layers[l];
        &self.params[s.weights..s.bias]
    }

    pub fn bias(&self, l: usize) -> &[f32] {
        let s = self.layers[l];
        &self.params[s.bias..s.bias + s.output]
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape(format!("input with {} columns", self.input_dim()), input.shape_str()));
        }
        Ok(())
    }

    fn layer_forward(&self, l: usize, x: &Matrix) -> Matrix {
        let s = self.layers[l];
        let w = &self.params[s.weights..s.bias];
        let b = &self.params[s.bias..s.bias + s.output];
        let relu = l + 1 < self.layers.len() && self.activation == Activation::Relu;
        let mut out = Matrix::zeros(x.rows(), s.output);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let y = out.row_mut(r);
            y.copy_from_slice(b);
            for (k, &xk) in xr.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let wk = &w[k * s.output..(k + 1) * s.output];
                for (yj, &wj) in y.iter_mut().zip(wk) {
                    *yj += xk * wj;
                }
            }
            if relu {
                for v in y.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut x = self.layer_forward(0, input);
        for l in 1..self.layers.len() {
            x = self.layer_forward(l, &x);
        }
        x.ensure_finite("mlp output")?;
        Ok(x)
    }

    pub fn forward_tape(&self, input: &Matrix) -> Result<Tape> {
        self.check_input(input)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for l in 0..self.layers.len() {
            let next = self.layer_forward(l, acts.last().unwrap());
            acts.push(next);
        }
        acts.last().unwrap().ensure_finite("mlp output")?;
        Ok(Tape { acts })
    }

    /// Backpropagates `upstream = dL/d(output)` through a recorded forward pass.
    pub fn backward(&self, tape: &Tape, upstream: &Matrix) -> Result<Backward> {
        let out = tape.output();
        if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
            return Err(Error::shape(out.shape_str(), upstream.shape_str()));
        }
        ensure_finite(upstream.as_slice(), "upstream gradient")?;
        let mut grads = vec![0.0f32; self.params.len()];
        let mut g = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            let s = self.layers[l];
            let x = &tape.acts[l];
            let w = &self.params[s.weights..s.bias];
            {
                let (gw, gb) = grads[s.weights..s.bias + s.output].split_at_mut(s.input * s.output);
                for r in 0..x.rows() {
                    let gr = g.row(r);
                    for (bj, &gj) in gb.iter_mut().zip(gr) {
                        *bj += gj;
                    }
                    for (i, &xi) in x.row(r).iter().enumerate() {
                        if xi == 0.0 {
                            continue;
                        }
                        let row = &mut gw[i * s.output..(i + 1) * s.output];
                        for (wj, &gj) in row.iter_mut().zip(gr) {
                            *wj += xi * gj;
                        }
                    }
                }
            }
            let mut gx = Matrix::zeros(x.rows(), s.input);
            let relu_below = l > 0 && self.activation == Activation::Relu;
            for r in 0..x.rows() {
                let gr = g.row(r);
                let xr = x.row(r);
                let dst = gx.row_mut(r);
                for i in 0..s.input {
                    if relu_below && xr[i] <= 0.0 {
                        continue;
                    }
                    dst[i] = dot(gr, &w[i * s.output..(i + 1) * s.output]);
                }
            }
            g = gx;
        }
        if let Some(index) = first_non_finite(&grads) {
            return Err(Error::NonFinite { context: "parameter gradient", index });
        }
        Ok(Backward { grads: ParamGrads(grads), input_grad: g })
    }

    /// Polyak averaging: `self = (1 - tau) * self + tau * online`.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f32) -> Result<()> {
        if online.sizes != self.sizes {
            return Err(Error::shape(format!("{:?}", self.sizes), format!("{:?}", online.sizes)));
        }
        for (t, &o) in self.params.iter_mut().zip(&online.params) {
            *t = (1.0 - tau) * *t + tau * o;
        }
        Ok(())
    }
}

/// Dot product with eight independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f32) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; param_count], v: vec![0.0; param_count] }
    }

    pub fn for_model(model: &Mlp, lr: f32) -> Self {
        Self::new(model.param_count(), lr)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f32] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f32] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                format!("{} parameters and gradients", self.m.len()),
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        if let Some(index) = first_non_finite(grads) {
            return Err(Error::NonFinite { context: "adam gradient", index });
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = (1.0 - libm::pow(self.beta1 as f64, t)) as f32;
        let bc2 = (1.0 - libm::pow(self.beta2 as f64, t)) as f32;
        let (b1, b2) = (self.beta1, self.beta2);
        for i in 0..params.len() {
            let g = grads[i];
            let m = b1 * self.m[i] + (1.0 - b1) * g;
            let v = b2 * self.v[i] + (1.0 - b2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            params[i] -= self.lr * m_hat / (libm::sqrtf(v_hat) + self.eps);
        }
        Ok(())
    }

    pub fn update(&mut self, model: &mut Mlp, grads: &ParamGrads) -> Result<()> {
        self.step(model.params_mut(), grads.as_slice())
    }
}
