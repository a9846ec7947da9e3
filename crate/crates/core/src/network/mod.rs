//! The change-detection model: one shared encoder (with optional per-stage
//! MoE) evaluated over up to three paths, and a detector that fuses the
//! optical and SAR pyramids.

mod backbone;
mod decoder;

use candle_core::{DType, Tensor};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

pub use backbone::{BackboneConfig, StageKind};
pub use decoder::{Detector, FusionDetector};

use crate::datakit::ImagePair;
use crate::losses::PROBABILITY_EPSILON;
use crate::moe::{ExpertInit, GateDecision, MoeConfig, MoeLayer};
use crate::params::ParamStore;
use crate::speckle::{optical_to_sar, SpeckleConfig};
use crate::{derive_seed, Error, Result};
use backbone::Stage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeOptions {
    pub num_experts: usize,
    pub top_k: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub expert_init: ExpertInit,
}

impl Default for MoeOptions {
    fn default() -> Self {
        Self {
            num_experts: 4,
            top_k: 2,
            embed_dim: 16,
            expert_init: ExpertInit::default(),
        }
    }
}

impl MoeOptions {
    pub fn for_channels(&self, channels: usize) -> MoeConfig {
        MoeConfig {
            num_experts: self.num_experts,
            top_k: self.top_k,
            channels,
            embed_dim: self.embed_dim,
        }
    }
}

/// Everything needed to rebuild the parameter tree of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub moe: MoeOptions,
    pub decoder_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            moe: MoeOptions::default(),
            decoder_width: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        for c in &self.backbone.stage_channels {
            self.moe.for_channels(*c).validate()?;
        }
        if self.decoder_width == 0 {
            return Err(Error::Config("decoder width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PathTag {
    #[serde(rename = "OP")]
    Op,
    #[serde(rename = "SP")]
    Sp,
    #[serde(rename = "O2SP")]
    O2sp,
}

impl PathTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            PathTag::Op => "OP",
            PathTag::Sp => "SP",
            PathTag::O2sp => "O2SP",
        }
    }
}

impl std::fmt::Display for PathTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-stage features of one path, finest level first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub path: PathTag,
    /// `decisions[stage][image]`; empty when MoE was bypassed.
    pub decisions: Vec<Vec<GateDecision>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub moe_enabled: bool,
    pub o2sp_enabled: bool,
    pub mode: Mode,
    /// Seed base for the bridge path; image `b` uses a seed derived from it.
    pub speckle: SpeckleConfig,
}

impl ForwardOptions {
    pub fn eval(moe_enabled: bool) -> Self {
        Self {
            moe_enabled,
            o2sp_enabled: false,
            mode: Mode::Eval,
            speckle: SpeckleConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ThreePathOutput {
    pub op: FeaturePyramid,
    pub sp: FeaturePyramid,
    pub o2sp: Option<FeaturePyramid>,
    /// Change probabilities `(batch, 1, h, w)`.
    pub change: Tensor,
    /// The bridge path was requested but not run because of eval mode.
    pub o2sp_skipped: bool,
}

/// Single-channel change probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeMap {
    pub probabilities: Array2<f32>,
}

impl ChangeMap {
    pub fn new(probabilities: Array2<f32>) -> Self {
        Self { probabilities }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.probabilities.dim()
    }

    /// Positive (changed) wherever `p >= threshold`.
    pub fn threshold(&self, threshold: f32) -> Array2<u8> {
        self.probabilities.mapv(|p| u8::from(p >= threshold))
    }
}

/// Anything that maps image pairs to change maps: the trained model, or an
/// injected stand-in for harness tests.
pub trait ChangePredictor {
    fn predict(&self, pairs: &[ImagePair]) -> Result<Vec<ChangeMap>>;
}

/// Channel-first image stack `(n, c, h, w)` from per-image arrays.
pub fn images_to_tensor<'a>(
    images: impl IntoIterator<Item = &'a ndarray::Array3<f32>>,
    dtype: DType,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut n = 0;
    for img in images {
        match dims {
            None => dims = Some(img.dim()),
            Some(d) if d != img.dim() => {
                return Err(Error::Shape(format!(
                    "batch images differ in shape: {:?} vs {:?}",
                    d,
                    img.dim()
                )))
            }
            _ => {}
        }
        data.extend(img.iter().copied());
        n += 1;
    }
    let (c, h, w) = dims.ok_or_else(|| Error::Argument("empty image batch".into()))?;
    Ok(Tensor::from_vec(data, (n, c, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Binary labels as a float tensor `(n, 1, h, w)`.
pub fn labels_to_tensor(pairs: &[ImagePair], dtype: DType) -> Result<Tensor> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Argument("empty label batch".into()))?;
    let (h, w) = first.label.dim();
    let mut data = Vec::with_capacity(pairs.len() * h * w);
    for p in pairs {
        if p.label.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "label {} is {:?}, expected {:?}",
                p.id,
                p.label.dim(),
                (h, w)
            )));
        }
        data.extend(p.label.iter().map(|v| *v as f32));
    }
    Ok(Tensor::from_vec(data, (pairs.len(), 1, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

pub fn change_maps_from_tensor(probabilities: &Tensor) -> Result<Vec<ChangeMap>> {
    let (b, c, h, w) = probabilities.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("change map must have 1 channel, got {c}")));
    }
    let flat = probabilities.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let array = ndarray::Array3::from_shape_vec((b, h, w), flat)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(array
        .axis_iter(Axis(0))
        .map(|m| ChangeMap::new(m.to_owned()))
        .collect())
}

pub struct ChangeDetector {
    config: ModelConfig,
    params: ParamStore,
    stages: Vec<Stage>,
    moe: Vec<MoeLayer>,
    detector: Box<dyn Detector>,
    moe_enabled: bool,
}

impl ChangeDetector {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed, dtype);
        let bb = &config.backbone;
        let mut stages = Vec::with_capacity(bb.num_stages);
        let mut moe = Vec::with_capacity(bb.num_stages);
        let mut in_c = bb.input_channels;
        for i in 0..bb.num_stages {
            let out_c = bb.stage_channels[i];
            stages.push(Stage::new(
                &mut params,
                &format!("encoder.stage{i}"),
                bb.stage_kind,
                in_c,
                out_c,
                bb.downsample_factors[i],
                bb.attention_window,
            )?);
            moe.push(MoeLayer::new(
                &mut params,
                &format!("encoder.moe{i}"),
                config.moe.for_channels(out_c),
                config.moe.expert_init,
            )?);
            in_c = out_c;
        }
        let detector = Box::new(FusionDetector::new(
            &mut params,
            &bb.stage_channels,
            config.decoder_width,
        )?);
        Ok(Self {
            config,
            params,
            stages,
            moe,
            detector,
            moe_enabled: true,
        })
    }

    /// Swaps in another detector head; its parameters must live in
    /// [`ChangeDetector::params_mut`] to be trained.
    pub fn with_detector(mut self, detector: Box<dyn Detector>) -> Self {
        self.detector = detector;
        self
    }

    /// Default MoE setting used by [`ChangePredictor::predict`].
    pub fn set_moe_enabled(&mut self, enabled: bool) {
        self.moe_enabled = enabled;
    }

    pub fn moe_enabled(&self) -> bool {
        self.moe_enabled
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn moe_layer(&self, stage: usize) -> &MoeLayer {
        &self.moe[stage]
    }

    pub fn detector(&self) -> &dyn Detector {
        self.detector.as_ref()
    }

    fn check_images(&self, images: &Tensor) -> Result<(usize, usize)> {
        let (_, c, h, w) = images
            .dims4()
            .map_err(|_| Error::Shape(format!("expected NCHW images, got {:?}", images.dims())))?;
        if c != self.config.backbone.input_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.config.backbone.input_channels
            )));
        }
        self.config.backbone.level_sizes(h, w)?;
        Ok((h, w))
    }

    /// Runs the shared encoder. With MoE enabled, each stage output is
    /// replaced by its routed MoE output before being recorded and before
    /// feeding the next stage.
    pub fn encode(&self, images: &Tensor, path: PathTag, moe_enabled: bool) -> Result<FeaturePyramid> {
        self.check_images(images)?;
        let mut x = images.clone();
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut decisions = Vec::new();
        for (stage, moe) in self.stages.iter().zip(&self.moe) {
            x = stage.forward(&x)?;
            if moe_enabled {
                let routed = moe.forward(&x)?;
                x = routed.output;
                decisions.push(routed.decisions);
            }
            levels.push(x.clone());
        }
        Ok(FeaturePyramid {
            levels,
            path,
            decisions,
        })
    }

    /// Encodes several same-shaped image stacks in one batched pass and
    /// splits the result back per path.
    fn encode_paths(&self, inputs: &[(Tensor, PathTag)], moe_enabled: bool) -> Result<Vec<FeaturePyramid>> {
        let sizes: Vec<usize> = inputs.iter().map(|(t, _)| t.dims()[0]).collect();
        let stacked = Tensor::cat(&inputs.iter().map(|(t, _)| t).collect::<Vec<_>>(), 0)?;
        let joint = self.encode(&stacked, PathTag::Op, moe_enabled)?;
        let mut out = Vec::with_capacity(inputs.len());
        let mut start = 0;
        for ((_, tag), n) in inputs.iter().zip(&sizes) {
            let levels = joint
                .levels
                .iter()
                .map(|l| l.narrow(0, start, *n))
                .collect::<candle_core::Result<Vec<_>>>()?;
            let decisions = joint
                .decisions
                .iter()
                .map(|d| d[start..start + n].to_vec())
                .collect();
            out.push(FeaturePyramid {
                levels,
                path: *tag,
                decisions,
            });
            start += n;
        }
        Ok(out)
    }

    pub fn decode(&self, op: &FeaturePyramid, sp: &FeaturePyramid, out_size: (usize, usize)) -> Result<Tensor> {
        decoder::check_compatible(op, sp)?;
        self.detector.decode(op, sp, out_size)
    }

    /// Speckled copies of the pre-event images for the bridge path.
    pub fn bridge_images(pairs: &[ImagePair], speckle: &SpeckleConfig) -> Result<Vec<ndarray::Array3<f32>>> {
        pairs
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let cfg = speckle.with_seed(derive_seed(speckle.seed, &[b as u64]));
                Ok(optical_to_sar(&p.pre, &cfg)?.pixels)
            })
            .collect()
    }

    pub fn forward_three_path(&self, pairs: &[ImagePair], opts: &ForwardOptions) -> Result<ThreePathOutput> {
        let dtype = self.dtype();
        let pre = images_to_tensor(pairs.iter().map(|p| &p.pre), dtype)?;
        let post = images_to_tensor(pairs.iter().map(|p| &p.post), dtype)?;
        if pre.dims() != post.dims() {
            return Err(Error::Shape(format!(
                "pre-event batch {:?} and post-event batch {:?} differ",
                pre.dims(),
                post.dims()
            )));
        }
        let (h, w) = self.check_images(&pre)?;

        let run_bridge = opts.o2sp_enabled && opts.mode == Mode::Train;
        let mut inputs = vec![(pre, PathTag::Op), (post, PathTag::Sp)];
        if run_bridge {
            let sar = Self::bridge_images(pairs, &opts.speckle)?;
            inputs.push((images_to_tensor(&sar, dtype)?, PathTag::O2sp));
        }
        let mut pyramids = self.encode_paths(&inputs, opts.moe_enabled)?.into_iter();
        let op = pyramids.next().expect("optical path");
        let sp = pyramids.next().expect("sar path");
        let o2sp = pyramids.next();
        let change = self.decode(&op, &sp, (h, w))?;
        Ok(ThreePathOutput {
            op,
            sp,
            o2sp,
            change,
            o2sp_skipped: opts.o2sp_enabled && !run_bridge,
        })
    }
}

/// Batch size used when predicting over long pair lists.
const PREDICT_CHUNK: usize = 8;

impl ChangePredictor for ChangeDetector {
    fn predict(&self, pairs: &[ImagePair]) -> Result<Vec<ChangeMap>> {
        let opts = ForwardOptions::eval(self.moe_enabled);
        let mut maps = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(PREDICT_CHUNK) {
            let out = self.forward_three_path(chunk, &opts)?;
            let clamped = out
                .change
                .clamp(PROBABILITY_EPSILON, 1.0 - PROBABILITY_EPSILON)?;
            maps.extend(change_maps_from_tensor(&clamped)?);
        }
        Ok(maps)
    }
}
