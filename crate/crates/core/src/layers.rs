//! Fully connected layer, element-wise activations and inverted dropout.
//!
//! A layer maps a batch of row vectors (one row per instance) so a whole bag
//! goes through in one call. Gradients *accumulate* into the layer buffers;
//! callers zero them between updates. This lets several loss heads push
//! gradient into a shared layer before one optimizer step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, dot4, glorot_uniform, Matrix, Rng, Vector};

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    /// No nonlinearity.
    None,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => relu(z),
            Activation::Sigmoid => sigmoid(z),
            Activation::None => z,
        }
    }

    /// Derivative at pre-activation `z`. The ReLU subgradient at 0 is 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::None => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
struct DenseCache {
    input: Matrix,
    pre: Matrix,
}

/// `y = activation(W x + b)` with `W` stored `out x in`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    weights: Matrix,
    bias: Vector,
    grad_weights: Matrix,
    grad_bias: Vector,
    momentum_weights: Matrix,
    momentum_bias: Vector,
    activation: Activation,
    cache: Option<DenseCache>,
}

impl DenseLayer {
    /// All-zero parameters.
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self::from_parts(Matrix::zeros(out_dim, in_dim), Vector::zeros(out_dim), activation)
            .expect("shapes agree by construction")
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        Self::from_parts(glorot_uniform(rng, in_dim, out_dim), Vector::zeros(out_dim), activation)
            .expect("shapes agree by construction")
    }

    pub fn from_parts(weights: Matrix, bias: Vector, activation: Activation) -> Result<Self> {
        if weights.rows() != bias.len() || weights.cols() == 0 {
            return Err(Error::shape(format!(
                "weights {}x{} do not match bias of length {}",
                weights.rows(),
                weights.cols(),
                bias.len()
            )));
        }
        let (out, inp) = weights.shape();
        Ok(DenseLayer {
            grad_weights: Matrix::zeros(out, inp),
            grad_bias: Vector::zeros(out),
            momentum_weights: Matrix::zeros(out, inp),
            momentum_bias: Vector::zeros(out),
            weights,
            bias,
            activation,
            cache: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &Vector {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut Vector {
        &mut self.bias
    }

    pub fn grad_weights(&self) -> &Matrix {
        &self.grad_weights
    }

    pub fn grad_bias(&self) -> &Vector {
        &self.grad_bias
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad_weights.fill(0.0);
        self.grad_bias.as_mut_slice().fill(0.0);
    }

    pub fn reset_momentum(&mut self) {
        self.momentum_weights.fill(0.0);
        self.momentum_bias.as_mut_slice().fill(0.0);
    }

    /// Parameters, their gradients and momentum buffers as flat slices:
    /// `(weights, grad_weights, momentum_weights)` then the same for the bias.
    pub(crate) fn buffers_mut(&mut self) -> [(&mut [f64], &mut [f64], &mut [f64]); 2] {
        [
            (
                self.weights.as_mut_slice(),
                self.grad_weights.as_mut_slice(),
                self.momentum_weights.as_mut_slice(),
            ),
            (
                self.bias.as_mut_slice(),
                self.grad_bias.as_mut_slice(),
                self.momentum_bias.as_mut_slice(),
            ),
        ]
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(format!(
                "layer {}->{} got input with {} columns",
                self.in_dim(),
                self.out_dim(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Pure forward pass. Returns `(pre_activation, output)`, one row per input row.
    pub fn apply(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_input(x)?;
        let out_dim = self.out_dim();
        let mut pre = Matrix::zeros(x.rows(), out_dim);
        let mut out = Matrix::zeros(x.rows(), out_dim);
        let bias = self.bias.as_slice();
        let m = x.rows();
        let blocked = m - m % 4;
        for i in (0..blocked).step_by(4) {
            let rows = [x.row(i), x.row(i + 1), x.row(i + 2), x.row(i + 3)];
            for o in 0..out_dim {
                let d = dot4(self.weights.row(o), rows);
                for (r, v) in d.into_iter().enumerate() {
                    pre.set(i + r, o, v + bias[o]);
                }
            }
        }
        for i in blocked..m {
            let xi = x.row(i);
            for (o, p) in pre.row_mut(i).iter_mut().enumerate() {
                *p = dot(self.weights.row(o), xi) + bias[o];
            }
        }
        for (y, &p) in out.as_mut_slice().iter_mut().zip(pre.as_slice()) {
            *y = self.activation.apply(p);
        }
        Ok((pre, out))
    }

    /// Forward pass that remembers its input and pre-activation for [`backward`](Self::backward).
    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let (pre, out) = self.apply(x)?;
        self.cache = Some(DenseCache { input: x.clone(), pre });
        Ok(out)
    }

    pub fn forward_vector(&mut self, x: &Vector) -> Result<Vector> {
        let out = self.forward(&Matrix::row_vector(x.as_slice().to_vec()))?;
        Vector::new(out.as_slice().to_vec())
    }

    /// Backward through the cached forward pass; accumulates parameter
    /// gradients and returns the gradient with respect to the input.
    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("dense backward called before forward".into()))?;
        let result = self.accumulate(&cache.input, &cache.pre, grad_out, true);
        self.cache = Some(cache);
        Ok(result?.expect("input gradient requested"))
    }

    pub fn backward_vector(&mut self, grad_out: &Vector) -> Result<Vector> {
        let g = self.backward(&Matrix::row_vector(grad_out.as_slice().to_vec()))?;
        Ok(Vector::new(g.into_values()).expect("finite gradient"))
    }

    /// Accumulates gradients given the forward input, the pre-activation and
    /// the gradient with respect to the layer output.
    pub(crate) fn accumulate(
        &mut self,
        input: &Matrix,
        pre: &Matrix,
        grad_out: &Matrix,
        need_input_grad: bool,
    ) -> Result<Option<Matrix>> {
        if grad_out.shape() != pre.shape() {
            return Err(Error::shape(format!(
                "output gradient {}x{} does not match layer output {}x{}",
                grad_out.rows(),
                grad_out.cols(),
                pre.rows(),
                pre.cols()
            )));
        }
        let mut grad_pre = grad_out.clone();
        if self.activation != Activation::None {
            for (g, &z) in grad_pre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *g *= self.activation.derivative(z);
            }
        }
        self.accumulate_pre(input, &grad_pre, need_input_grad)
    }

    /// Same as [`accumulate`](Self::accumulate) but starting from the gradient
    /// with respect to the pre-activation.
    pub(crate) fn accumulate_pre(
        &mut self,
        input: &Matrix,
        grad_pre: &Matrix,
        need_input_grad: bool,
    ) -> Result<Option<Matrix>> {
        self.check_input(input)?;
        if grad_pre.rows() != input.rows() || grad_pre.cols() != self.out_dim() {
            return Err(Error::shape(format!(
                "pre-activation gradient {}x{} for {} inputs into a layer of width {}",
                grad_pre.rows(),
                grad_pre.cols(),
                input.rows(),
                self.out_dim()
            )));
        }
        let mut grad_in = need_input_grad.then(|| Matrix::zeros(input.rows(), self.in_dim()));
        let out_dim = self.out_dim();
        let grad_b = self.grad_bias.as_mut_slice();
        for o in 0..out_dim {
            let w = self.weights.row(o);
            let gw = self.grad_weights.row_mut(o);
            for (i, x) in input.iter_rows().enumerate() {
                let go = grad_pre.get(i, o);
                if go == 0.0 {
                    continue;
                }
                axpy(go, x, gw);
                grad_b[o] += go;
                if let Some(gi) = grad_in.as_mut() {
                    axpy(go, w, gi.row_mut(i));
                }
            }
        }
        Ok(grad_in)
    }
}

/// Inverted dropout: at training time each entry is kept with probability
/// `1 - rate` and scaled by `1 / (1 - rate)`; at inference it is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    training: bool,
    mask: Option<Matrix>,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        Ok(Dropout {
            rate,
            training: true,
            mask: None,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    /// Mask of `0` and `1 / (1 - rate)` entries.
    pub fn sample_mask(&self, rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        let keep = 1.0 / (1.0 - self.rate);
        let mut mask = Matrix::zeros(rows, cols);
        for m in mask.as_mut_slice() {
            *m = if rng.uniform01() < self.rate { 0.0 } else { keep };
        }
        mask
    }

    /// Whether a forward call would draw a mask.
    pub fn is_active(&self) -> bool {
        self.training && self.rate > 0.0
    }

    pub fn forward(&mut self, x: &Matrix, rng: &mut Rng) -> Matrix {
        if !self.is_active() {
            self.mask = None;
            return x.clone();
        }
        let mask = self.sample_mask(rng, x.rows(), x.cols());
        let out = apply_mask(x, &mask);
        self.mask = Some(mask);
        out
    }

    pub fn backward(&self, grad_out: &Matrix) -> Matrix {
        match &self.mask {
            Some(mask) => apply_mask(grad_out, mask),
            None => grad_out.clone(),
        }
    }
}

pub(crate) fn apply_mask(x: &Matrix, mask: &Matrix) -> Matrix {
    let mut out = x.clone();
    for (v, m) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        *v *= m;
    }
    out
}
