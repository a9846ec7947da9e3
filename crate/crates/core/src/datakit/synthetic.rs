//! Procedural optical/SAR scene pairs with exact change labels.
//!
//! A scene is a textured background carrying a set of non-overlapping
//! shapes. Every shape is made of a material with an optical colour and a
//! radar reflectivity. Toggled shapes exist in only one of the two epochs,
//! so the change label is the union of their supports. The pre-event image
//! is an optical rendering of the first epoch; the post-event image is a
//! speckled reflectivity rendering of the second.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{split_sizes, ImagePair, SplitDataset};
use crate::speckle::{optical_to_sar, LuminanceMode, SpeckleConfig};
use crate::{derive_seed, Error, Result};

const MIN_SIDE: usize = 8;
const PLACEMENT_ATTEMPTS: usize = 200;
/// Gap in pixels kept between the bounding circles of two shapes.
const SHAPE_GAP: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub name: &'static str,
    pub color: [f32; 3],
    pub reflectivity: f32,
}

pub const BACKGROUND: Material = Material {
    name: "soil",
    color: [0.46, 0.40, 0.30],
    reflectivity: 0.25,
};

pub const MATERIALS: [Material; 4] = [
    Material {
        name: "water",
        color: [0.12, 0.24, 0.46],
        reflectivity: 0.04,
    },
    Material {
        name: "roof",
        color: [0.80, 0.30, 0.24],
        reflectivity: 0.95,
    },
    Material {
        name: "vegetation",
        color: [0.12, 0.46, 0.16],
        reflectivity: 0.55,
    },
    Material {
        name: "concrete",
        color: [0.78, 0.78, 0.72],
        reflectivity: 0.70,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneConfig {
    /// `(height, width)`.
    pub size: (usize, usize),
    /// Inclusive range for the number of shapes.
    pub num_shapes: (usize, usize),
    /// Range the fraction of toggled shapes is drawn from.
    pub change_fraction: (f64, f64),
    /// Inclusive range for shape radii as a fraction of the shorter side.
    pub radius_fraction: (f64, f64),
    /// Equivalent number of looks of the post-event speckle.
    pub looks: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            size: (256, 256),
            num_shapes: (4, 10),
            change_fraction: (0.3, 0.7),
            radius_fraction: (0.06, 0.16),
            looks: 4.0,
            seed: 0,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Config(format!(
                "scene size {h}x{w} is degenerate, both sides must be at least {MIN_SIDE}"
            )));
        }
        if self.num_shapes.0 > self.num_shapes.1 {
            return Err(Error::Config(format!(
                "num_shapes range {:?} is empty",
                self.num_shapes
            )));
        }
        let (lo, hi) = self.change_fraction;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!(
                "change_fraction {:?} must be an ordered range inside [0, 1]",
                self.change_fraction
            )));
        }
        let (rlo, rhi) = self.radius_fraction;
        if !(rlo > 0.0 && rlo <= rhi && rhi <= 0.5) {
            return Err(Error::Config(format!(
                "radius_fraction {:?} must be an ordered range inside (0, 0.5]",
                self.radius_fraction
            )));
        }
        if !(self.looks.is_finite() && self.looks > 0.0) {
            return Err(Error::Config(format!("looks must be positive, got {}", self.looks)));
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeGeometry {
    /// Rotated ellipse; `angle` in radians.
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        angle: f64,
    },
    /// Simple polygon, vertices as `(y, x)`.
    Polygon { vertices: Vec<(f64, f64)> },
}

impl ShapeGeometry {
    /// Whether the continuous point `(y, x)` lies inside.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            ShapeGeometry::Ellipse {
                cy,
                cx,
                ry,
                rx,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            ShapeGeometry::Polygon { vertices } => {
                let mut inside = false;
                let n = vertices.len();
                let mut j = n - 1;
                for i in 0..n {
                    let (yi, xi) = vertices[i];
                    let (yj, xj) = vertices[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }

    /// Pixel mask, sampling each pixel at its centre.
    pub fn rasterize(&self, h: usize, w: usize) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(y, x)| self.contains(y as f64 + 0.5, x as f64 + 0.5))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneShape {
    pub geometry: ShapeGeometry,
    /// Index into [`MATERIALS`].
    pub material: usize,
    pub in_pre: bool,
    pub in_post: bool,
}

impl SceneShape {
    pub fn toggled(&self) -> bool {
        self.in_pre != self.in_post
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub pair: ImagePair,
    pub shapes: Vec<SceneShape>,
    /// Noise-free post-event reflectivity (single channel).
    pub reflectivity: Array2<f32>,
}

pub fn generate_scene(config: &SyntheticSceneConfig) -> Result<ImagePair> {
    Ok(generate_scene_detailed(config)?.pair)
}

pub fn generate_scene_detailed(config: &SyntheticSceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let (h, w) = config.size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let geometries = place_shapes(config, &mut rng);
    let n = geometries.len();
    let fraction = rng.random_range(config.change_fraction.0..=config.change_fraction.1);
    let toggles = ((fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..toggles {
        let j = rng.random_range(i..n);
        order.swap(i, j);
    }
    let mut shapes: Vec<SceneShape> = geometries
        .into_iter()
        .map(|geometry| SceneShape {
            geometry,
            material: rng.random_range(0..MATERIALS.len()),
            in_pre: true,
            in_post: true,
        })
        .collect();
    for &i in &order[..toggles] {
        // Appearing or disappearing with equal odds.
        if rng.random_bool(0.5) {
            shapes[i].in_pre = false;
        } else {
            shapes[i].in_post = false;
        }
    }

    // Per-pixel shape index (shapes never overlap).
    let mut owner: Array2<Option<usize>> = Array2::from_elem((h, w), None);
    for (i, s) in shapes.iter().enumerate() {
        for ((y, x), inside) in s.geometry.rasterize(h, w).indexed_iter() {
            if *inside {
                owner[(y, x)] = Some(i);
            }
        }
    }

    let texture = Texture::new(&mut rng, h, w);
    let tint: Vec<[f32; 3]> = shapes
        .iter()
        .map(|_| {
            let j = rng.random_range(-0.06f32..0.06);
            [j, j, j]
        })
        .collect();
    let background_tint: [f32; 3] = [
        rng.random_range(-0.06..0.06),
        rng.random_range(-0.06..0.06),
        rng.random_range(-0.04..0.04),
    ];

    let mut pre = Array3::<f32>::zeros((3, h, w));
    let mut reflectivity = Array2::<f32>::zeros((h, w));
    let mut label = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let t = texture.at(y, x);
            let grain: f32 = rng.random_range(-0.02..0.02);
            let shape = owner[(y, x)].map(|i| (i, &shapes[i]));
            let pre_shape = shape.filter(|(_, s)| s.in_pre);
            let post_shape = shape.filter(|(_, s)| s.in_post);
            let (color, tint_rgb) = match pre_shape {
                Some((i, s)) => (MATERIALS[s.material].color, tint[i]),
                None => (BACKGROUND.color, background_tint),
            };
            for c in 0..3 {
                pre[(c, y, x)] = (color[c] + tint_rgb[c] + 0.5 * t + grain).clamp(0.0, 1.0);
            }
            reflectivity[(y, x)] = match post_shape {
                Some((_, s)) => MATERIALS[s.material].reflectivity * (1.0 + 0.5 * t),
                None => BACKGROUND.reflectivity * (1.0 + 2.0 * t),
            }
            .max(0.0);
            if shape.is_some_and(|(_, s)| s.toggled()) {
                label[(y, x)] = 1;
            }
        }
    }

    let replicated = Array3::from_shape_fn((3, h, w), |(_, y, x)| reflectivity[(y, x)]);
    let speckle = SpeckleConfig {
        looks: config.looks,
        seed: derive_seed(config.seed, &[0x5a5]),
        luminance_mode: LuminanceMode::LuminanceThenReplicate,
        clamp_negative: true,
    };
    let post = optical_to_sar(&replicated, &speckle)?.pixels;
    let pair = ImagePair::new(pre, post, label, format!("scene_{:016x}", config.seed))?;
    Ok(SyntheticScene {
        pair,
        shapes,
        reflectivity,
    })
}

fn place_shapes(config: &SyntheticSceneConfig, rng: &mut ChaCha8Rng) -> Vec<ShapeGeometry> {
    let (h, w) = config.size;
    let side = h.min(w) as f64;
    let target = rng.random_range(config.num_shapes.0..=config.num_shapes.1);
    let mut circles: Vec<(f64, f64, f64)> = Vec::with_capacity(target);
    let mut shapes = Vec::with_capacity(target);
    for _ in 0..target {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let r = side * rng.random_range(config.radius_fraction.0..=config.radius_fraction.1);
            if 2.0 * r >= side {
                continue;
            }
            let cy = rng.random_range(r..h as f64 - r);
            let cx = rng.random_range(r..w as f64 - r);
            let free = circles.iter().all(|(oy, ox, or)| {
                ((cy - oy).powi(2) + (cx - ox).powi(2)).sqrt() > r + or + SHAPE_GAP
            });
            if free {
                circles.push((cy, cx, r));
                shapes.push(random_geometry(rng, cy, cx, r));
                break;
            }
        }
    }
    if shapes.len() < target {
        log::debug!(
            "placed {} of {} shapes without overlap",
            shapes.len(),
            target
        );
    }
    shapes
}

/// A shape contained in the circle of radius `r` around `(cy, cx)`.
fn random_geometry(rng: &mut ChaCha8Rng, cy: f64, cx: f64, r: f64) -> ShapeGeometry {
    if rng.random_bool(0.5) {
        ShapeGeometry::Ellipse {
            cy,
            cx,
            ry: r * rng.random_range(0.55..=1.0),
            rx: r * rng.random_range(0.55..=1.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        }
    } else {
        // Star-shaped about the centre, hence simple.
        let k = rng.random_range(3..=7);
        let step = std::f64::consts::TAU / k as f64;
        let start = rng.random_range(0.0..step);
        let vertices = (0..k)
            .map(|i| {
                let a = start + step * (i as f64 + rng.random_range(-0.3..0.3));
                let rho = r * rng.random_range(0.6..=1.0);
                (cy + rho * a.sin(), cx + rho * a.cos())
            })
            .collect();
        ShapeGeometry::Polygon { vertices }
    }
}

/// Smooth low-amplitude field in roughly `[-0.1, 0.1]`.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let side = h.max(w) as f64;
        let waves = (0..3)
            .map(|_| {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let freq = rng.random_range(1.0..4.0) * std::f64::consts::TAU / side;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = rng.random_range(0.01..0.033);
                (freq * theta.sin(), freq * theta.cos(), phase, amp)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, y: usize, x: usize) -> f32 {
        self.waves
            .iter()
            .map(|(fy, fx, p, a)| a * (fy * y as f64 + fx * x as f64 + p).sin())
            .sum::<f64>() as f32
    }
}

/// `total` scenes split 3:1:1 into train, val and test. Scene `i` uses the
/// seed `derive_seed(seed, [i])`, so any prefix of the index range can be
/// regenerated independently.
pub fn build_synthetic_dataset(
    total: usize,
    config: &SyntheticSceneConfig,
    seed: u64,
) -> Result<SplitDataset> {
    config.validate()?;
    let (n_train, n_val, _) = split_sizes(total);
    let mut data = SplitDataset::default();
    for i in 0..total {
        let mut pair = generate_scene(&config.with_seed(derive_seed(seed, &[i as u64])))?;
        pair.id = format!("{i:06}");
        if i < n_train {
            data.train.push(pair);
        } else if i < n_train + n_val {
            data.val.push(pair);
        } else {
            data.test.push(pair);
        }
    }
    Ok(data)
}
