//! Training objective: pixel-averaged binary cross-entropy plus a weighted
//! L1 self-distillation term between the bridge path and both real paths.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::network::FeaturePyramid;
use crate::{Error, Result};

/// Probability floor used before taking logs and when emitting change maps.
pub const PROBABILITY_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopGradient {
    /// Gradients flow into all three paths.
    #[default]
    None,
    /// Treat the bridge features as a fixed teacher.
    DetachO2sp,
    /// Only the bridge path receives distillation gradients.
    DetachOpSp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdReduction {
    /// Sum of absolute differences per image, averaged over the batch.
    Sum,
    /// Mean absolute difference over all elements of a level.
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_sd: f64,
    pub sd_enabled: bool,
    pub stop_gradient_mode: StopGradient,
    pub epsilon: f64,
    pub sd_reduction: SdReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_sd: 1e-4,
            sd_enabled: true,
            stop_gradient_mode: StopGradient::None,
            epsilon: PROBABILITY_EPSILON,
            sd_reduction: SdReduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_sd.is_finite() && self.lambda_sd >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_sd must be finite and nonnegative, got {}",
                self.lambda_sd
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1e-3], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SdLoss {
    /// Scalar distillation loss attached to the graph.
    pub value: Tensor,
    pub per_level: Vec<f64>,
}

/// Self-distillation distance between the bridge pyramid and the optical and
/// SAR pyramids, summed over levels.
pub fn sd_loss(
    op: &FeaturePyramid,
    sp: &FeaturePyramid,
    o2sp: &FeaturePyramid,
    config: &LossConfig,
) -> Result<SdLoss> {
    let n = o2sp.levels.len();
    if op.levels.len() != n || sp.levels.len() != n {
        return Err(Error::Shape(format!(
            "pyramid depth mismatch: op {}, sp {}, o2sp {}",
            op.levels.len(),
            sp.levels.len(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::Shape("pyramids have no levels".into()));
    }
    let mut total: Option<Tensor> = None;
    let mut per_level = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b, t) = (&op.levels[i], &sp.levels[i], &o2sp.levels[i]);
        if a.dims() != t.dims() || b.dims() != t.dims() {
            return Err(Error::Shape(format!(
                "level {i}: op {:?}, sp {:?}, o2sp {:?}",
                a.dims(),
                b.dims(),
                t.dims()
            )));
        }
        let (a, b, t) = match config.stop_gradient_mode {
            StopGradient::None => (a.clone(), b.clone(), t.clone()),
            StopGradient::DetachO2sp => (a.clone(), b.clone(), t.detach()),
            StopGradient::DetachOpSp => (a.detach(), b.detach(), t.clone()),
        };
        let term = (reduce(&(&t - &a)?.abs()?, config.sd_reduction)?
            + reduce(&(&t - &b)?.abs()?, config.sd_reduction)?)?;
        per_level.push(scalar(&term)?);
        total = Some(match total {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    Ok(SdLoss {
        value: total.expect("at least one level"),
        per_level,
    })
}

fn reduce(x: &Tensor, reduction: SdReduction) -> Result<Tensor> {
    Ok(match reduction {
        SdReduction::Mean => x.mean_all()?,
        SdReduction::Sum => (x.sum_all()? / x.dims()[0] as f64)?,
    })
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Pixelwise binary cross-entropy averaged over every pixel of the batch.
pub fn ce_loss(pred: &Tensor, target: &Tensor, config: &LossConfig) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.dims(),
            target.dims()
        )));
    }
    let values = target.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(bad) = values.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::Data(format!("target contains non-binary value {bad}")));
    }
    let eps = config.epsilon;
    let p = pred.clamp(eps, 1.0 - eps)?;
    let pos = target.mul(&p.log()?)?;
    let neg = target.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?.mean_all()?)
}

/// Scalar loss components of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub sd: f64,
    pub total: f64,
    pub per_level: Vec<f64>,
}

/// `total = ce + lambda * sd`; the distillation term is reported as zero
/// when disabled.
pub fn total_loss(ce: f64, sd: f64, config: &LossConfig) -> Result<LossReport> {
    if !ce.is_finite() || !sd.is_finite() {
        return Err(Error::Unstable(format!("loss components ce={ce}, sd={sd}")));
    }
    let sd = if config.sd_enabled { sd } else { 0.0 };
    Ok(LossReport {
        ce,
        sd,
        total: ce + config.lambda_sd * sd,
        per_level: Vec::new(),
    })
}

/// The differentiable objective of one iteration together with its report.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: Tensor,
    pub report: LossReport,
}

/// Builds the training objective. Without a bridge pyramid, or with
/// distillation disabled, the loss is the cross-entropy alone.
pub fn objective(
    change: &Tensor,
    labels: &Tensor,
    op: &FeaturePyramid,
    sp: &FeaturePyramid,
    o2sp: Option<&FeaturePyramid>,
    config: &LossConfig,
) -> Result<Objective> {
    config.validate()?;
    let ce = ce_loss(change, labels, config)?;
    let ce_value = scalar(&ce)?;
    match o2sp {
        Some(bridge) if config.sd_enabled => {
            let sd = sd_loss(op, sp, bridge, config)?;
            let sd_value = scalar(&sd.value)?;
            let mut report = total_loss(ce_value, sd_value, config)?;
            report.per_level = sd.per_level;
            let loss = (ce + (sd.value * config.lambda_sd)?)?;
            Ok(Objective { loss, report })
        }
        _ => {
            let report = total_loss(ce_value, 0.0, config)?;
            Ok(Objective { loss: ce, report })
        }
    }
}
