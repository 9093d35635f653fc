//! Differentiable neural-network primitives on top of the autodiff tape.
//!
//! Every operation is exposed as a method on [`crate::graph::Graph`]
//! (implemented in [`ops`]), so forward code reads as a chain of graph
//! calls and the backward pass comes for free. [`gradcheck`] provides the
//! finite-difference harness that pins every analytic gradient against a
//! central-difference oracle.

pub mod gradcheck;
pub mod init;
pub mod ops;

use crate::tensor::NdArray;

/// Forward-pass mode: training uses batch statistics and active dropout,
/// evaluation uses running statistics and identity dropout.
///
/// `Calibrate` re-estimates the batch-norm running statistics for
/// evaluation: normalization still uses the current batch's statistics
/// (so deeper layers see correctly scaled inputs), the running buffers
/// accumulate a cumulative average instead of an exponential one, and
/// dropout is inert — evaluation runs without dropout, so the statistics
/// that stand in for it must be measured without dropout too. Dropout
/// noise roughly doubles the second moment at rate 0.5, which would
/// otherwise leave the running variance far above anything the network
/// produces at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    Calibrate,
}

/// Pointwise nonlinearities used across the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Exact Gaussian-error-linear unit, `x * Phi(x)` with the erf-based CDF.
    Gelu,
    /// `x * sigmoid(x)`.
    Silu,
    Relu,
    Sigmoid,
    /// `log(1 + exp(x))`, computed in a saturation-safe form.
    Softplus,
}

impl Activation {
    /// Forward value at `x`.
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => x * normal_cdf(x),
            Activation::Silu => x * sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative at `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => normal_cdf(x) + x * normal_pdf(x),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Standard normal CDF via the error function (exact GELU, no tanh fit).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    (-0.5 * x * x).exp() * INV_SQRT_2PI
}

/// Running statistics for one batch-normalization layer.
#[derive(Debug, Clone)]
pub struct BnState {
    pub running_mean: NdArray,
    pub running_var: NdArray,
    /// Batches folded into the running statistics so far.
    pub batches_seen: u64,
}

impl BnState {
    /// Fresh state for `channels` channels: mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: NdArray::zeros(&[channels]),
            running_var: NdArray::full(&[channels], 1.0),
            batches_seen: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Output length of a 1-d convolution or pooling stage.
///
/// Returns `None` when the (padded) input is shorter than the window.
pub fn conv_output_len(input: usize, window: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < window || stride == 0 {
        return None;
    }
    Some((padded - window) / stride + 1)
}
