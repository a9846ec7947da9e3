//! Training-time augmentation. A draw is sampled once and applied
//! identically to every member of a pair; only the optical image receives
//! photometric distortion.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImagePair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotateConfig {
    pub enabled: bool,
    /// Angles are drawn uniformly from `[-max_degrees, max_degrees]`.
    pub max_degrees: f64,
    pub probability: f64,
}

impl Default for RotateConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_degrees: 180.0,
            probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlipConfig {
    pub enabled: bool,
    pub horizontal: bool,
    pub vertical: bool,
    pub probability: f64,
}

impl Default for FlipConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            horizontal: true,
            vertical: true,
            probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhotometricConfig {
    pub enabled: bool,
    /// Additive, in `[0, 1]` intensity units.
    pub brightness_delta: f64,
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
    /// In degrees.
    pub hue_delta: f64,
    /// Probability of each of the four distortions.
    pub probability: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            brightness_delta: 32.0 / 255.0,
            contrast_range: (0.5, 1.5),
            saturation_range: (0.5, 1.5),
            hue_delta: 18.0,
            probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub rotate: RotateConfig,
    pub flip: FlipConfig,
    pub photometric: PhotometricConfig,
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        Self {
            rotate: RotateConfig {
                enabled: false,
                ..Default::default()
            },
            flip: FlipConfig {
                enabled: false,
                ..Default::default()
            },
            photometric: PhotometricConfig {
                enabled: false,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhotometricDraw {
    pub brightness: Option<f32>,
    pub contrast: Option<f32>,
    pub saturation: Option<f32>,
    /// Hue shift in degrees.
    pub hue: Option<f32>,
}

/// One realisation of the random transforms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentDraw {
    /// Counter-clockwise rotation in degrees.
    pub rotation: Option<f64>,
    pub hflip: bool,
    pub vflip: bool,
    pub photometric: PhotometricDraw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

fn chance(rng: &mut impl Rng, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p.min(1.0)
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

impl AugmentDraw {
    pub fn sample(config: &AugmentationConfig, rng: &mut impl Rng) -> Self {
        let mut draw = AugmentDraw::default();
        let r = &config.rotate;
        if r.enabled && r.max_degrees > 0.0 && chance(rng, r.probability) {
            draw.rotation = Some(uniform(rng, -r.max_degrees, r.max_degrees));
        }
        let f = &config.flip;
        if f.enabled {
            draw.hflip = f.horizontal && chance(rng, f.probability);
            draw.vflip = f.vertical && chance(rng, f.probability);
        }
        let p = &config.photometric;
        if p.enabled {
            let pm = &mut draw.photometric;
            if chance(rng, p.probability) {
                pm.brightness = Some(uniform(rng, -p.brightness_delta, p.brightness_delta) as f32);
            }
            if chance(rng, p.probability) {
                pm.contrast = Some(uniform(rng, p.contrast_range.0, p.contrast_range.1) as f32);
            }
            if chance(rng, p.probability) {
                pm.saturation =
                    Some(uniform(rng, p.saturation_range.0, p.saturation_range.1) as f32);
            }
            if chance(rng, p.probability) {
                pm.hue = Some(uniform(rng, -p.hue_delta, p.hue_delta) as f32);
            }
        }
        draw
    }

    pub fn apply(&self, pair: &ImagePair) -> ImagePair {
        let mut pre = self.geometric3(&pair.pre);
        photometric(&mut pre, &self.photometric);
        ImagePair {
            pre,
            post: self.geometric3(&pair.post),
            label: self.geometric_label(&pair.label),
            id: pair.id.clone(),
        }
    }

    /// Rotation then flips, bilinear, applied to each channel.
    pub fn geometric3(&self, img: &Array3<f32>) -> Array3<f32> {
        let mut out = match self.rotation {
            Some(deg) => {
                let views: Vec<Array2<f32>> = img
                    .axis_iter(Axis(0))
                    .map(|ch| rotate(ch, deg, Interpolation::Bilinear))
                    .collect();
                let views: Vec<_> = views.iter().map(|v| v.view()).collect();
                ndarray::stack(Axis(0), &views).expect("channels share a shape")
            }
            None => img.clone(),
        };
        out = flip3(&out, self.hflip, self.vflip);
        out
    }

    /// Rotation then flips, nearest neighbour.
    pub fn geometric_label(&self, label: &Array2<u8>) -> Array2<u8> {
        let rotated = match self.rotation {
            Some(deg) => rotate(label.view(), deg, Interpolation::Nearest),
            None => label.clone(),
        };
        flip2(&rotated, self.hflip, self.vflip)
    }
}

/// One seeded random augmentation of `pair`.
pub fn augment(pair: &ImagePair, config: &AugmentationConfig, seed: u64) -> ImagePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AugmentDraw::sample(config, &mut rng).apply(pair)
}

pub(crate) fn flip2<T: Clone>(a: &Array2<T>, horizontal: bool, vertical: bool) -> Array2<T> {
    let mut v = a.view();
    if horizontal {
        v.invert_axis(Axis(1));
    }
    if vertical {
        v.invert_axis(Axis(0));
    }
    v.to_owned()
}

pub(crate) fn flip3<T: Clone>(a: &Array3<T>, horizontal: bool, vertical: bool) -> Array3<T> {
    let mut v = a.view();
    if horizontal {
        v.invert_axis(Axis(2));
    }
    if vertical {
        v.invert_axis(Axis(1));
    }
    v.to_owned()
}

/// Symmetric reflection of an integer index into `0..n`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

trait Sample: Copy {
    fn lerp(a: Self, b: Self, c: Self, d: Self, fy: f64, fx: f64) -> Self;
}

impl Sample for f32 {
    fn lerp(a: f32, b: f32, c: f32, d: f32, fy: f64, fx: f64) -> f32 {
        let top = a as f64 * (1.0 - fx) + b as f64 * fx;
        let bottom = c as f64 * (1.0 - fx) + d as f64 * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    }
}

impl Sample for u8 {
    fn lerp(a: u8, _: u8, _: u8, _: u8, _: f64, _: f64) -> u8 {
        a
    }
}

/// Counter-clockwise rotation about the image centre keeping the input
/// size; samples falling outside are reflected back in. Multiples of 90°
/// (of 180° for non-square inputs) are exact index permutations.
fn rotate<T: Sample>(src: ArrayView2<'_, T>, degrees: f64, interp: Interpolation) -> Array2<T> {
    let (h, w) = src.dim();
    let quarter = degrees / 90.0;
    let turns = quarter.round();
    if (quarter - turns).abs() < 1e-9 {
        let k = (turns as i64).rem_euclid(4);
        if k == 0 {
            return src.to_owned();
        }
        if k == 2 {
            let mut v = src;
            v.invert_axis(Axis(0));
            v.invert_axis(Axis(1));
            return v.to_owned();
        }
        if h == w {
            return Array2::from_shape_fn((h, w), |(y, x)| {
                if k == 1 {
                    src[(x, w - 1 - y)]
                } else {
                    src[(h - 1 - x, y)]
                }
            });
        }
    }
    rotate_general(src, degrees, interp)
}

fn rotate_general<T: Sample>(
    src: ArrayView2<'_, T>,
    degrees: f64,
    interp: Interpolation,
) -> Array2<T> {
    let (h, w) = src.dim();
    let (s, c) = degrees.to_radians().sin_cos();
    let (my, mx) = (h as f64 / 2.0, w as f64 / 2.0);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dy = y as f64 + 0.5 - my;
        let dx = x as f64 + 0.5 - mx;
        // Inverse map from output to source, in pixel-index coordinates.
        let sx = c * dx - s * dy + mx - 0.5;
        let sy = s * dx + c * dy + my - 0.5;
        match interp {
            Interpolation::Nearest => {
                src[(reflect(sy.round() as i64, h), reflect(sx.round() as i64, w))]
            }
            Interpolation::Bilinear => {
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as i64, x0 as i64);
                let at = |yy: i64, xx: i64| src[(reflect(yy, h), reflect(xx, w))];
                T::lerp(
                    at(y0, x0),
                    at(y0, x0 + 1),
                    at(y0 + 1, x0),
                    at(y0 + 1, x0 + 1),
                    fy,
                    fx,
                )
            }
        }
    })
}

fn photometric(img: &mut Array3<f32>, draw: &PhotometricDraw) {
    if let Some(b) = draw.brightness {
        img.mapv_inplace(|v| (v + b).clamp(0.0, 1.0));
    }
    if let Some(k) = draw.contrast {
        img.mapv_inplace(|v| (v * k).clamp(0.0, 1.0));
    }
    if img.dim().0 != 3 || (draw.saturation.is_none() && draw.hue.is_none()) {
        return;
    }
    let (_, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let (hue, sat, val) = rgb_to_hsv(img[(0, y, x)], img[(1, y, x)], img[(2, y, x)]);
            let sat = draw.saturation.map_or(sat, |k| (sat * k).clamp(0.0, 1.0));
            let hue = draw.hue.map_or(hue, |d| (hue + d).rem_euclid(360.0));
            let (r, g, b) = hsv_to_rgb(hue, sat, val);
            img[(0, y, x)] = r;
            img[(1, y, x)] = g;
            img[(2, y, x)] = b;
        }
    }
}

/// Hue in degrees, saturation and value in `[0, 1]`.
fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let hue = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { d / max };
    (hue, sat, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}
