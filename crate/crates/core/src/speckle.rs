//! Fully developed multiplicative speckle and the optical-to-SAR bridge.
//!
//! Speckle intensity follows `Gamma(shape = L, rate = L)`: unit mean and
//! variance `1/L`. A simulated SAR image is the clean optical image (or its
//! luminance) multiplied elementwise by a fresh speckle field.

use ndarray::{Array3, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Integer look counts up to this bound are sampled as exponential sums.
const MAX_EXPONENTIAL_SUM_LOOKS: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LuminanceMode {
    /// Independent speckle on every channel.
    PerChannel,
    /// Speckle the equal-weight channel mean once, then replicate it.
    #[default]
    LuminanceThenReplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeckleConfig {
    /// Number of looks `L`.
    pub looks: f64,
    pub seed: u64,
    pub luminance_mode: LuminanceMode,
    /// Clamp negative optical values to zero instead of failing.
    pub clamp_negative: bool,
}

impl Default for SpeckleConfig {
    fn default() -> Self {
        Self {
            looks: 1.0,
            seed: 0,
            luminance_mode: LuminanceMode::default(),
            clamp_negative: true,
        }
    }
}

impl SpeckleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.looks.is_finite() && self.looks > 0.0) {
            return Err(Error::Config(format!(
                "speckle looks must be a positive finite number, got {}",
                self.looks
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Draws unit-mean Gamma speckle for a fixed number of looks.
#[derive(Debug, Clone)]
pub struct SpeckleSampler {
    looks: f64,
    method: Method,
}

#[derive(Debug, Clone)]
enum Method {
    ExponentialSum(u32),
    General(Gamma<f64>),
}

impl SpeckleSampler {
    pub fn new(looks: f64) -> Result<Self> {
        if !(looks.is_finite() && looks > 0.0) {
            return Err(Error::Config(format!(
                "speckle looks must be a positive finite number, got {looks}"
            )));
        }
        let method = if looks.fract() == 0.0 && looks <= MAX_EXPONENTIAL_SUM_LOOKS {
            Method::ExponentialSum(looks as u32)
        } else {
            let gamma = Gamma::new(looks, 1.0 / looks)
                .map_err(|e| Error::Config(format!("gamma({looks}): {e}")))?;
            Method::General(gamma)
        };
        Ok(Self { looks, method })
    }

    pub fn looks(&self) -> f64 {
        self.looks
    }

    pub fn draw<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.method {
            Method::ExponentialSum(n) => {
                let sum: f64 = (0..*n).map(|_| -> f64 { Exp1.sample(rng) }).sum();
                sum / self.looks
            }
            Method::General(gamma) => gamma.sample(rng),
        }
    }

    pub fn fill<R: rand::Rng + ?Sized>(&self, rng: &mut R, out: &mut [f32]) {
        for v in out {
            *v = self.draw(rng) as f32;
        }
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Argument(format!(
            "speckle shape must be non-empty with positive extents, got {shape:?}"
        )));
    }
    Ok(())
}

/// i.i.d. `Gamma(L, L)` draws of the given shape, reproducible from
/// `config.seed`. Values are generated in row-major order, so two shapes
/// with the same element count see the same sequence.
pub fn sample_speckle(shape: &[usize], config: &SpeckleConfig) -> Result<ArrayD<f32>> {
    validate_shape(shape)?;
    let sampler = SpeckleSampler::new(config.looks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = ArrayD::<f32>::zeros(IxDyn(shape));
    sampler.fill(
        &mut rng,
        out.as_slice_mut().expect("fresh arrays are contiguous"),
    );
    Ok(out)
}

/// A speckled companion of an optical image.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSarImage {
    /// Channel-first intensities, nonnegative and unclipped above.
    pub pixels: Array3<f32>,
    /// Number of negative input values that were clamped to zero.
    pub clamped: usize,
}

/// Corrupts a channel-first optical image with multiplicative speckle.
pub fn optical_to_sar(optical: &Array3<f32>, config: &SpeckleConfig) -> Result<SimulatedSarImage> {
    config.validate()?;
    let (c, h, w) = optical.dim();
    validate_shape(&[c, h, w])?;

    let negatives = optical.iter().filter(|v| **v < 0.0).count();
    if negatives > 0 && !config.clamp_negative {
        return Err(Error::Domain(format!(
            "optical image has {negatives} negative values and clamping is disabled"
        )));
    }
    if optical.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("optical image contains non-finite values".into()));
    }
    if negatives > 0 {
        log::warn!("clamped {negatives} negative optical values to zero before speckling");
    }
    let clean = optical.mapv(|v| v.max(0.0));

    let pixels = match config.luminance_mode {
        LuminanceMode::PerChannel => {
            let speckle = sample_speckle(&[c, h, w], config)?;
            let speckle = speckle
                .into_dimensionality::<ndarray::Ix3>()
                .expect("rank 3 by construction");
            clean * speckle
        }
        LuminanceMode::LuminanceThenReplicate => {
            let luminance = clean.sum_axis(Axis(0)) / c as f32;
            let speckle = sample_speckle(&[h, w], config)?
                .into_dimensionality::<ndarray::Ix2>()
                .expect("rank 2 by construction");
            let speckled = luminance * speckle;
            let mut out = Array3::<f32>::zeros((c, h, w));
            for mut channel in out.axis_iter_mut(Axis(0)) {
                channel.assign(&speckled);
            }
            out
        }
    };
    Ok(SimulatedSarImage {
        pixels,
        clamped: negatives,
    })
}
