use candle_core::{Tensor, D};

use super::conv::{self, ConvGeometry};
use super::fused::{self, Activation};
use super::params::{Init, Params};
use crate::error::{invalid, Result};

pub fn mish(x: &Tensor) -> candle_core::Result<Tensor> {
    fused::activate(x, Activation::Mish)
}

pub fn silu(x: &Tensor) -> candle_core::Result<Tensor> {
    fused::activate(x, Activation::Silu)
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    fused::activate(x, Activation::Sigmoid)
}

/// Largest group count <= 8 that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        let init = Init::fan_in(in_dim);
        Ok(Self { weight: p.get(&[out_dim, in_dim], "weight", init)?, bias: p.get(&[out_dim], "bias", init)? })
    }

    pub fn with_bias_init(p: &Params, in_dim: usize, out_dim: usize, bias: Init) -> Result<Self> {
        Ok(Self {
            weight: p.get(&[out_dim, in_dim], "weight", Init::fan_in(in_dim))?,
            bias: p.get(&[out_dim], "bias", bias)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    /// `x`: (B, in) -> (B, out)
    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv1d {
    pub fn new(p: &Params, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let init = Init::fan_in(c_in * kernel);
        Ok(Self {
            weight: p.get(&[c_out, c_in, kernel], "weight", init)?,
            bias: p.get(&[c_out], "bias", init)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv::conv1d(x, &self.weight, self.stride, self.padding)?;
        y.broadcast_add(&self.bias.unsqueeze(1)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    geo: ConvGeometry,
}

impl Conv2d {
    pub fn new(p: &Params, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let init = Init::fan_in(c_in * kernel * kernel);
        Ok(Self {
            weight: p.get(&[c_out, c_in, kernel, kernel], "weight", init)?,
            bias: p.get(&[c_out], "bias", init)?,
            geo: ConvGeometry::new(stride, padding),
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv::conv2d(x, &self.weight, self.geo)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Kernel-2, stride-2 transposed convolution: doubles H and W.
///
/// With kernel == stride the output windows do not overlap, so the layer is
/// a per-pixel linear map C_in -> C_out x 2 x 2 followed by a pixel shuffle.
#[derive(Debug, Clone)]
pub struct ConvTranspose2x {
    /// (C_in, C_out, 2, 2), the usual transposed-convolution layout.
    weight: Tensor,
    bias: Tensor,
}

impl ConvTranspose2x {
    pub fn new(p: &Params, c_in: usize, c_out: usize) -> Result<Self> {
        let init = Init::fan_in(c_out * 4);
        Ok(Self { weight: p.get(&[c_in, c_out, 2, 2], "weight", init)?, bias: p.get(&[c_out], "bias", init)? })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c_in, h, w) = x.dims4()?;
        let c_out = self.weight.dims()[1];
        let cols = x.permute((0, 2, 3, 1))?.reshape((b * h * w, c_in))?;
        let y = cols.matmul(&self.weight.reshape((c_in, c_out * 4))?)?;
        let y = y
            .reshape(vec![b, h, w, c_out, 2, 2])?
            .permute(vec![0, 3, 1, 4, 2, 5])?
            .reshape((b, c_out, 2 * h, 2 * w))?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(p: &Params, channels: usize) -> Result<Self> {
        let weight = p.get(&[channels], "weight", Init::Const(1.0))?;
        let bias = p.get(&[channels], "bias", Init::Const(0.0))?;
        Ok(Self { weight, bias, groups: group_count(channels) })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        fused::group_norm(x, &self.weight, &self.bias, self.groups, 1e-5)
    }
}

/// Nearest-neighbour x2 upsampling along the last axis of (B, C, T).
pub fn upsample1d_nearest(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, t) = x.dims3()?;
    x.unsqueeze(D::Minus1)?.broadcast_as((b, c, t, 2))?.reshape((b, c, 2 * t))
}

/// Mean squared error over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return invalid(format!("mse: shape {:?} vs {:?}", pred.dims(), target.dims()));
    }
    Ok((pred - target)?.sqr()?.mean_all()?)
}
