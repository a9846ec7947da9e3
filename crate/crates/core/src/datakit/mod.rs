//! Image pairs and everything that produces or transforms them.
//!
//! Images are channel-first `ndarray` arrays: `(c, h, w)` for images and
//! `(h, w)` for labels.

mod augment;
mod io;
mod synthetic;
mod tta;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

pub use augment::{
    augment, AugmentDraw, AugmentationConfig, FlipConfig, Interpolation, PhotometricConfig,
    PhotometricDraw, RotateConfig,
};
pub use io::{
    load_dataset, load_dataset_report, read_optical, read_sar, write_gray, write_mask, write_pair,
    write_rgb, write_split, LoadReport, Rejected,
};
pub use synthetic::{
    build_synthetic_dataset, generate_scene, generate_scene_detailed, Material, SceneShape,
    ShapeGeometry, SyntheticScene, SyntheticSceneConfig, MATERIALS,
};
pub use tta::{tta_predict, tta_predict_batch};

use crate::{Error, Result};

/// Co-registered pre-event optical image, post-event SAR image and binary
/// change label.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub pre: Array3<f32>,
    pub post: Array3<f32>,
    pub label: Array2<u8>,
    pub id: String,
}

impl ImagePair {
    pub fn new(pre: Array3<f32>, post: Array3<f32>, label: Array2<u8>, id: impl Into<String>) -> Result<Self> {
        let pair = Self {
            pre,
            post,
            label,
            id: id.into(),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn size(&self) -> (usize, usize) {
        self.label.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (_, ph, pw) = self.pre.dim();
        let (_, qh, qw) = self.post.dim();
        if (ph, pw) != self.label.dim() || (qh, qw) != self.label.dim() {
            return Err(Error::Shape(format!(
                "pair {}: pre {:?}, post {:?} and label {:?} are not aligned",
                self.id,
                self.pre.dim(),
                self.post.dim(),
                self.label.dim()
            )));
        }
        if self.label.iter().any(|v| *v > 1) {
            return Err(Error::Data(format!("pair {}: label is not binary", self.id)));
        }
        if self.pre.iter().chain(self.post.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("pair {}: non-finite pixel", self.id)));
        }
        if self.post.iter().any(|v| *v < 0.0) {
            return Err(Error::Data(format!("pair {}: negative SAR intensity", self.id)));
        }
        Ok(())
    }

    /// Fraction of changed pixels.
    pub fn change_ratio(&self) -> f64 {
        let n = self.label.len().max(1);
        self.label.iter().filter(|v| **v == 1).count() as f64 / n as f64
    }

    /// The pair mirrored left-right and/or top-bottom.
    pub fn flipped(&self, horizontal: bool, vertical: bool) -> ImagePair {
        ImagePair {
            pre: augment::flip3(&self.pre, horizontal, vertical),
            post: augment::flip3(&self.post, horizontal, vertical),
            label: augment::flip2(&self.label, horizontal, vertical),
            id: self.id.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!(
                "unknown split {other:?}, expected train, val or test"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Train/val/test sizes in the ratio 3:1:1, rounding val and test to the
/// nearest integer and giving the remainder to train.
pub fn split_sizes(total: usize) -> (usize, usize, usize) {
    let val = (total as f64 / 5.0).round() as usize;
    let test = val.min(total - val);
    (total - val - test, val, test)
}

#[derive(Debug, Clone, Default)]
pub struct SplitDataset {
    pub train: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
    pub test: Vec<ImagePair>,
}

impl SplitDataset {
    pub fn get(&self, split: Split) -> &[ImagePair] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
