use candle_core::{Module, Tensor};

use super::FeaturePyramid;
use crate::kernels::{gelu, resize_bilinear};
use crate::layers::{Conv2d, GroupNorm};
use crate::params::ParamStore;
use crate::{Error, Result};

/// Fuses a pre-event and a post-event pyramid into change probabilities.
pub trait Detector: Send + Sync {
    /// Returns probabilities of shape `(batch, 1, out_h, out_w)`.
    fn decode(
        &self,
        op: &FeaturePyramid,
        sp: &FeaturePyramid,
        out_size: (usize, usize),
    ) -> Result<Tensor>;
}

pub(crate) fn check_compatible(a: &FeaturePyramid, b: &FeaturePyramid) -> Result<()> {
    if a.levels.len() != b.levels.len() {
        return Err(Error::Shape(format!(
            "pyramids have {} and {} levels",
            a.levels.len(),
            b.levels.len()
        )));
    }
    for (i, (x, y)) in a.levels.iter().zip(&b.levels).enumerate() {
        if x.dims() != y.dims() {
            return Err(Error::Shape(format!(
                "level {i}: {:?} vs {:?}",
                x.dims(),
                y.dims()
            )));
        }
    }
    Ok(())
}

/// Per-level `[op, sp, |op - sp|]` fusion, 1x1 projection to a shared width,
/// upsampling to the finest level and a small convolutional head.
pub struct FusionDetector {
    projections: Vec<Conv2d>,
    fuse: Conv2d,
    fuse_norm: GroupNorm,
    refine: Conv2d,
    refine_norm: GroupNorm,
    head: Conv2d,
}

impl FusionDetector {
    pub fn new(store: &mut ParamStore, stage_channels: &[usize], width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("decoder width must be positive".into()));
        }
        let projections = stage_channels
            .iter()
            .enumerate()
            .map(|(i, c)| Conv2d::new(store, &format!("decoder.proj{i}"), 3 * c, width, 1, 1, 0))
            .collect::<Result<Vec<_>>>()?;
        let n = stage_channels.len();
        Ok(Self {
            projections,
            fuse: Conv2d::new(store, "decoder.fuse", n * width, width, 1, 1, 0)?,
            fuse_norm: GroupNorm::new(store, "decoder.fuse_norm", width, 8)?,
            refine: Conv2d::new(store, "decoder.refine", width, width, 3, 1, 1)?,
            refine_norm: GroupNorm::new(store, "decoder.refine_norm", width, 8)?,
            head: Conv2d::new(store, "decoder.head", width, 1, 1, 1, 0)?,
        })
    }

    /// The concatenated `[op, sp, |op - sp|]` tensor of every level.
    pub fn fusion_inputs(&self, op: &FeaturePyramid, sp: &FeaturePyramid) -> Result<Vec<Tensor>> {
        check_compatible(op, sp)?;
        op.levels
            .iter()
            .zip(&sp.levels)
            .map(|(a, b)| Ok(Tensor::cat(&[a, b, &(a - b)?.abs()?], 1)?))
            .collect()
    }

    /// Pre-sigmoid change scores at the input resolution.
    pub fn logits(
        &self,
        op: &FeaturePyramid,
        sp: &FeaturePyramid,
        out_size: (usize, usize),
    ) -> Result<Tensor> {
        let fused = self.fusion_inputs(op, sp)?;
        if fused.len() != self.projections.len() {
            return Err(Error::Shape(format!(
                "detector built for {} levels, got {}",
                self.projections.len(),
                fused.len()
            )));
        }
        let (_, _, h0, w0) = fused[0].dims4()?;
        let mut upsampled = Vec::with_capacity(fused.len());
        for (x, proj) in fused.iter().zip(&self.projections) {
            upsampled.push(resize_bilinear(&proj.forward(x)?, h0, w0)?);
        }
        let x = Tensor::cat(&upsampled, 1)?;
        let x = gelu(&self.fuse_norm.forward(&self.fuse.forward(&x)?)?)?;
        let x = gelu(&self.refine_norm.forward(&self.refine.forward(&x)?)?)?;
        let logits = self.head.forward(&x)?;
        Ok(resize_bilinear(&logits, out_size.0, out_size.1)?)
    }
}

impl Detector for FusionDetector {
    fn decode(
        &self,
        op: &FeaturePyramid,
        sp: &FeaturePyramid,
        out_size: (usize, usize),
    ) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits(op, sp, out_size)?)?)
    }
}
