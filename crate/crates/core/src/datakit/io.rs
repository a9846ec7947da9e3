//! On-disk layout: `ROOT/{train,val,test}/{pre,post,label}/NAME.png`,
//! 8-bit, labels stored as 0/255.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use super::{ImagePair, Split};
use crate::{Error, Result};

fn data_file(path: &Path, message: impl Into<String>) -> Error {
    Error::data_file(path, message)
}

const KINDS: [&str; 3] = ["pre", "post", "label"];
const LABEL_THRESHOLD: u8 = 127;

/// An id that lacked at least one of its three files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejected {
    pub id: String,
    pub missing: Vec<&'static str>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub pairs: Vec<ImagePair>,
    pub rejected: Vec<Rejected>,
}

/// Loads complete triples in lexicographic id order, logging a warning for
/// incomplete ones. See [`load_dataset_report`].
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<ImagePair>> {
    Ok(load_dataset_report(root, split)?.pairs)
}

pub fn load_dataset_report(root: &Path, split: Split) -> Result<LoadReport> {
    let dir = root.join(split.as_str());
    if !dir.is_dir() {
        return Err(data_file(&dir, "split directory does not exist"));
    }
    let mut files: BTreeMap<String, [Option<PathBuf>; 3]> = BTreeMap::new();
    for (k, kind) in KINDS.iter().enumerate() {
        let sub = dir.join(kind);
        if !sub.is_dir() {
            continue;
        }
        for entry in std::fs::read_dir(&sub)? {
            let path = entry?.path();
            if !path.is_file() {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            files.entry(id.to_string()).or_default()[k] = Some(path.clone());
        }
    }

    let mut report = LoadReport::default();
    for (id, paths) in files {
        match paths {
            [Some(pre), Some(post), Some(label)] => {
                report.pairs.push(load_triple(&id, &pre, &post, &label)?);
            }
            _ => {
                let missing = KINDS
                    .iter()
                    .zip(&paths)
                    .filter(|(_, p)| p.is_none())
                    .map(|(k, _)| *k)
                    .collect();
                report.rejected.push(Rejected { id, missing });
            }
        }
    }
    for r in &report.rejected {
        log::warn!(
            "{}: rejected {} (missing {})",
            dir.display(),
            r.id,
            r.missing.join(", ")
        );
    }
    if report.pairs.is_empty() {
        log::warn!("{}: no complete image pairs found", dir.display());
    }
    Ok(report)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| data_file(path, e.to_string()))?
        .with_guessed_format()
        .map_err(|e| data_file(path, e.to_string()))?
        .decode()
        .map_err(|e| data_file(path, e.to_string()))
}

/// An 8-bit image as a `(3, h, w)` array scaled to `[0, 1]`.
pub fn read_optical(path: &Path) -> Result<Array3<f32>> {
    Ok(rgb_to_array(&open(path)?.to_rgb8()))
}

/// An 8-bit single-channel image scaled to `[0, 1]` and replicated to
/// three channels.
pub fn read_sar(path: &Path) -> Result<Array3<f32>> {
    Ok(gray_to_array(&open(path)?.to_luma8()))
}

fn rgb_to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

fn gray_to_array(img: &GrayImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(_, y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
    })
}

/// Writes values in `[0, 1]` (clipped) as an 8-bit grayscale PNG.
pub fn write_gray(path: &Path, values: &Array2<f32>) -> Result<()> {
    let (h, w) = values.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(values[(y as usize, x as usize)])])
    });
    save(img.into(), path)
}

/// Writes a binary mask as 0/255.
pub fn write_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[(y as usize, x as usize)] > 0 { 255 } else { 0 }])
    });
    save(img.into(), path)
}

/// Writes the first three channels (or a replicated single channel) of a
/// `(c, h, w)` array, clipped to `[0, 1]`, as an 8-bit RGB PNG.
pub fn write_rgb(path: &Path, values: &Array3<f32>) -> Result<()> {
    let (c, h, w) = values.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |k: usize| to_u8(values[(k.min(c - 1), y as usize, x as usize)]);
        Rgb([px(0), px(1), px(2)])
    });
    save(img.into(), path)
}

fn load_triple(id: &str, pre: &Path, post: &Path, label: &Path) -> Result<ImagePair> {
    let pre_img = open(pre)?.to_rgb8();
    let post_img = open(post)?.to_luma8();
    let label_img = open(label)?.to_luma8();
    for (other, dims) in [(post, post_img.dimensions()), (label, label_img.dimensions())] {
        if dims != pre_img.dimensions() {
            return Err(data_file(
                pre,
                format!(
                    "size mismatch: {} is {}x{} but {} is {}x{}",
                    pre.display(),
                    pre_img.width(),
                    pre_img.height(),
                    other.display(),
                    dims.0,
                    dims.1
                ),
            ));
        }
    }
    let (w, h) = pre_img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let pre_arr = rgb_to_array(&pre_img);
    let post_arr = gray_to_array(&post_img);
    let label_arr = Array2::from_shape_fn((h, w), |(y, x)| {
        u8::from(label_img.get_pixel(x as u32, y as u32)[0] > LABEL_THRESHOLD)
    });
    ImagePair::new(pre_arr, post_arr, label_arr, id)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes one pair into the split directories. SAR intensities are clipped
/// to `[0, 1]` and only the first channel is stored.
pub fn write_pair(root: &Path, split: Split, pair: &ImagePair) -> Result<()> {
    pair.validate()?;
    let (h, w) = pair.size();
    let dir = root.join(split.as_str());
    for kind in KINDS {
        std::fs::create_dir_all(dir.join(kind))?;
    }
    let name = format!("{}.png", pair.id);
    write_rgb(&dir.join("pre").join(&name), &pair.pre)?;
    let post = Array2::from_shape_fn((h, w), |(y, x)| pair.post[(0, y, x)]);
    write_gray(&dir.join("post").join(&name), &post)?;
    write_mask(&dir.join("label").join(&name), &pair.label)
}

fn save(img: image::DynamicImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| data_file(path, e.to_string()))
}

pub fn write_split(root: &Path, split: Split, pairs: &[ImagePair]) -> Result<()> {
    for pair in pairs {
        write_pair(root, split, pair)?;
    }
    if pairs.is_empty() {
        for kind in KINDS {
            std::fs::create_dir_all(root.join(split.as_str()).join(kind))?;
        }
    }
    Ok(())
}
