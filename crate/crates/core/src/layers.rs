use candle_core::{Module, Tensor, D};

use crate::kernels;
use crate::params::{Init, ParamStore};
use crate::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub(crate) weight: Tensor,
    pub(crate) bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = store.create(
            &format!("{name}.weight"),
            &[out_c, in_c, kernel, kernel],
            Init::Kaiming { fan_in },
        )?;
        let bias = store.create(&format!("{name}.bias"), &[out_c], Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride,
            pad,
        })
    }

    /// Builds a layer from already-created parameter tensors.
    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, stride: usize, pad: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv2d {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        kernels::conv2d(xs, &self.weight, self.bias.as_ref(), self.stride, self.pad)
    }
}

/// Group normalization over NCHW feature maps.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let groups = largest_divisor_at_most(channels, groups);
        Ok(Self {
            gamma: store.create(&format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: store.create(&format!("{name}.beta"), &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|g| n % g == 0).unwrap_or(1)
}

impl Module for GroupNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = xs.dims4()?;
        let grouped = xs.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = grouped.mean_keepdim(D::Minus1)?;
        let centered = grouped.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)
    }
}
