use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::kernels::gelu;
use crate::layers::{Conv2d, GroupNorm};
use crate::params::ParamStore;
use crate::{Error, Result};

const NORM_GROUPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    #[default]
    ConvStage,
    AttentionStage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub num_stages: usize,
    pub stage_channels: Vec<usize>,
    pub stage_kind: StageKind,
    pub downsample_factors: Vec<usize>,
    pub input_channels: usize,
    /// Side of the square attention windows (attention stages only).
    #[serde(default = "default_window")]
    pub attention_window: usize,
}

fn default_window() -> usize {
    4
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_stages: 4,
            stage_channels: vec![32, 64, 128, 256],
            stage_kind: StageKind::ConvStage,
            downsample_factors: vec![4, 2, 2, 2],
            input_channels: 3,
            attention_window: default_window(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_stages < 2 {
            return Err(Error::Config(format!(
                "backbone needs at least 2 stages, got {}",
                self.num_stages
            )));
        }
        if self.stage_channels.len() != self.num_stages
            || self.downsample_factors.len() != self.num_stages
        {
            return Err(Error::Config(format!(
                "backbone lists must have {} entries: channels {:?}, strides {:?}",
                self.num_stages, self.stage_channels, self.downsample_factors
            )));
        }
        if self.stage_channels.contains(&0) || self.downsample_factors.contains(&0) {
            return Err(Error::Config("backbone channels and strides must be positive".into()));
        }
        if self.input_channels == 0 || self.attention_window == 0 {
            return Err(Error::Config(
                "input channels and attention window must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.downsample_factors.iter().product()
    }

    /// Spatial size of every stage for an input of `(h, w)`.
    pub fn level_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let stride = self.total_stride();
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by the backbone stride {stride}"
            )));
        }
        let mut sizes = Vec::with_capacity(self.num_stages);
        let (mut ch, mut cw) = (h, w);
        for s in &self.downsample_factors {
            ch /= s;
            cw /= s;
            sizes.push((ch, cw));
        }
        Ok(sizes)
    }
}

/// One encoder stage: strided patch embedding followed by a residual block.
pub(crate) enum Stage {
    Conv(ConvStage),
    Attention(AttentionStage),
}

impl Stage {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        kind: StageKind,
        in_c: usize,
        out_c: usize,
        stride: usize,
        window: usize,
    ) -> Result<Self> {
        Ok(match kind {
            StageKind::ConvStage => Stage::Conv(ConvStage::new(store, name, in_c, out_c, stride)?),
            StageKind::AttentionStage => Stage::Attention(AttentionStage::new(
                store, name, in_c, out_c, stride, window,
            )?),
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Stage::Conv(s) => s.forward(x),
            Stage::Attention(s) => s.forward(x),
        }
    }
}

struct PatchEmbed {
    conv: Conv2d,
    norm: GroupNorm,
}

impl PatchEmbed {
    fn new(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, stride: usize) -> Result<Self> {
        // Non-overlapping patches; stride 1 degenerates to a 3x3 "same" conv.
        let conv = if stride == 1 {
            Conv2d::new(store, &format!("{name}.down"), in_c, out_c, 3, 1, 1)?
        } else {
            Conv2d::new(store, &format!("{name}.down"), in_c, out_c, stride, stride, 0)?
        };
        let norm = GroupNorm::new(store, &format!("{name}.down_norm"), out_c, NORM_GROUPS)?;
        Ok(Self { conv, norm })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?)
    }
}

pub(crate) struct ConvStage {
    embed: PatchEmbed,
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
}

impl ConvStage {
    fn new(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            embed: PatchEmbed::new(store, name, in_c, out_c, stride)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), out_c, out_c, 3, 1, 1)?,
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), out_c, NORM_GROUPS)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out_c, out_c, 3, 1, 1)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), out_c, NORM_GROUPS)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.embed.forward(x)?;
        let h = gelu(&self.norm1.forward(&self.conv1.forward(&x)?)?)?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        Ok(gelu(&(x + h)?)?)
    }
}

/// Windowed multi-head self-attention block with a pointwise MLP.
pub(crate) struct AttentionStage {
    embed: PatchEmbed,
    attn_norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
    mlp_norm: GroupNorm,
    mlp_in: Conv2d,
    mlp_out: Conv2d,
    heads: usize,
    window: usize,
}

impl AttentionStage {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        window: usize,
    ) -> Result<Self> {
        let heads = (1..=(out_c / 16).max(1))
            .rev()
            .find(|h| out_c % h == 0)
            .unwrap_or(1);
        Ok(Self {
            embed: PatchEmbed::new(store, name, in_c, out_c, stride)?,
            attn_norm: GroupNorm::new(store, &format!("{name}.attn_norm"), out_c, 1)?,
            qkv: Conv2d::new(store, &format!("{name}.qkv"), out_c, 3 * out_c, 1, 1, 0)?,
            proj: Conv2d::new(store, &format!("{name}.proj"), out_c, out_c, 1, 1, 0)?,
            mlp_norm: GroupNorm::new(store, &format!("{name}.mlp_norm"), out_c, 1)?,
            mlp_in: Conv2d::new(store, &format!("{name}.mlp_in"), out_c, 2 * out_c, 1, 1, 0)?,
            mlp_out: Conv2d::new(store, &format!("{name}.mlp_out"), 2 * out_c, out_c, 1, 1, 0)?,
            heads,
            window,
        })
    }

    fn window_for(&self, h: usize, w: usize) -> usize {
        let g = gcd(h, w);
        (1..=self.window.min(g)).rev().find(|p| g % p == 0).unwrap_or(1)
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let p = self.window_for(h, w);
        let (hn, wn, heads) = (h / p, w / p, self.heads);
        let dh = c / heads;
        let qkv = self.qkv.forward(x)?;
        // (b, 3, heads, dh, hn, p, wn, p) -> (3, b, hn, wn, heads, p, p, dh)
        let windows = qkv
            .reshape(vec![b, 3, heads, dh, hn, p, wn, p])?
            .permute(vec![1, 0, 4, 6, 2, 5, 7, 3])?
            .contiguous()?
            .reshape((3, b * hn * wn * heads, p * p, dh))?;
        let q = windows.get(0)?;
        let k = windows.get(1)?;
        let v = windows.get(2)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let logits = (q.matmul(&k.t()?)? * scale)?;
        let attn = candle_nn::ops::softmax(&logits, candle_core::D::Minus1)?;
        let out = attn.matmul(&v)?;
        // (b, hn, wn, heads, p, p, dh) -> (b, heads, dh, hn, p, wn, p)
        let out = out
            .reshape(vec![b, hn, wn, heads, p, p, dh])?
            .permute(vec![0, 3, 6, 1, 4, 2, 5])?
            .contiguous()?
            .reshape((b, c, h, w))?;
        Ok(self.proj.forward(&out)?)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.embed.forward(x)?;
        let x = (&x + self.attention(&self.attn_norm.forward(&x)?)?)?;
        let h = gelu(&self.mlp_in.forward(&self.mlp_norm.forward(&x)?)?)?;
        Ok((x + self.mlp_out.forward(&h)?)?)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
