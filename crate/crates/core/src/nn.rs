//! Standard differentiable layers: im2col convolution, fully-connected,
//! ReLU, PixelShuffle and skip addition.
//!
//! Each layer has a tape form (used for training and gradient checks) and
//! an eager form that evaluates on plain tensors.

use alloc::format;

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, shape_err, Result};
use crate::ops::{self, BlockLayout};
use crate::rng::{seeded_uniform, Rng};
use crate::tensor::{Scalar, Tensor};

/// Weights and geometry of a 2-D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    /// `[C_out, C_in, k, k]`.
    pub weight: Tensor<T>,
    /// `[C_out]`.
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let [c_out, _, k, k2] = weight.dims4()?;
        if k != k2 || k == 0 {
            return Err(dim_err("conv2d", format!("kernel must be square, got {k}x{k2}")));
        }
        if stride == 0 {
            return Err(dim_err("conv2d", "stride must be at least 1"));
        }
        if bias.shape() != [c_out] {
            return Err(shape_err("conv2d", format!("bias {:?} for {c_out} outputs", bias.shape())));
        }
        Ok(Self { weight, bias, stride, padding })
    }

    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`) and zero bias.
    pub fn kaiming(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize, rng: &mut Rng) -> Self {
        let (weight, bias) = kaiming_pair(&[c_out, c_in, k, k], c_in * k * k, c_out, rng);
        Self { weight, bias, stride, padding }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Weights of a fully-connected map `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcParams<T: Scalar = f32> {
    /// `[D_in, D_out]`.
    pub weight: Tensor<T>,
    /// `[D_out]`.
    pub bias: Tensor<T>,
}

impl<T: Scalar> FcParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [_, d_out] = weight.dims2()?;
        if bias.shape() != [d_out] {
            return Err(shape_err("fc", format!("bias {:?} for {d_out} outputs", bias.shape())));
        }
        Ok(Self { weight, bias })
    }

    pub fn kaiming(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let (weight, bias) = kaiming_pair(&[d_in, d_out], d_in, d_out, rng);
        Self { weight, bias }
    }
}

pub(crate) fn kaiming_pair<T: Scalar>(shape: &[usize], fan_in: usize, d_out: usize, rng: &mut Rng) -> (Tensor<T>, Tensor<T>) {
    let bound = libm::sqrt(6.0 / fan_in as f64);
    (seeded_uniform(rng, shape, -bound, bound), Tensor::zeros(&[d_out]))
}

/// Output spatial size `floor((h + 2p − k) / s) + 1`.
pub fn conv_output_dim(h: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if k > h + 2 * p || s == 0 {
        return Err(dim_err("conv2d", format!("kernel {k} stride {s} on {h} padded by {p}")));
    }
    Ok((h + 2 * p - k) / s + 1)
}

/// Convolution on the tape: pad → unfold → matmul against the weight
/// reshaped to `[C_in·k², C_out]` → bias → rows back to NCHW.
pub fn conv2d_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let [n, c, h, w] = tape.value(x).dims4()?;
    let [c_out, c_in, k, _] = tape.value(weight).dims4()?;
    if c != c_in {
        return Err(shape_err("conv2d", format!("input has {c} channels, weight expects {c_in}")));
    }
    let ho = conv_output_dim(h, k, stride, padding)?;
    let wo = conv_output_dim(w, k, stride, padding)?;
    let padded = tape.pad2d(x, padding)?;
    let patches = tape.unfold(padded, k, stride)?;
    let rows = tape.reshape(patches, &[n * ho * wo, c_in * k * k])?;
    let wflat = tape.reshape(weight, &[c_out, c_in * k * k])?;
    let wmat = tape.transpose(wflat)?;
    let prod = tape.matmul(rows, wmat)?;
    let biased = tape.add_bias(prod, bias)?;
    let layout = BlockLayout { n, grid_h: ho, grid_w: wo, channels: c_out, block: 1 };
    tape.assemble_blocks(biased, layout)
}

/// Fully-connected map on the tape.
pub fn fc_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let prod = tape.matmul(x, weight)?;
    tape.add_bias(prod, bias)
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(params.weight.clone());
    let b = tape.constant(params.bias.clone());
    let y = conv2d_tape(&mut tape, xv, w, b, params.stride, params.padding)?;
    Ok(tape.value(y).clone())
}

pub fn fc<T: Scalar>(x: &Tensor<T>, params: &FcParams<T>) -> Result<Tensor<T>> {
    let y = ops::matmul(x, &params.weight)?;
    ops::add_row_bias(&y, &params.bias)?.finite("fc")
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    ops::relu(x)
}

pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    ops::pixel_shuffle(x, r)
}

pub fn add_skip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)?.finite("add_skip")
}

/// Spatial windows a convolution evaluates: `H_o · W_o`.
pub fn conv_window_count(h: usize, w: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    Ok(conv_output_dim(h, k, s, p)? * conv_output_dim(w, k, s, p)?)
}
