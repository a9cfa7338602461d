//! Procedural toy dataset: anti-aliased shapes with discrete color
//! classes, plus the fixed condition-embedding table that stands in for
//! text conditioning.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ppm;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const SHAPE_CLASSES: usize = 3;
pub const COLOR_CLASSES: usize = 4;
pub const NUM_CLASSES: usize = SHAPE_CLASSES * COLOR_CLASSES;
/// Dimension of every condition vector.
pub const COND_DIM: usize = 16;

/// Seed of the fixed embedding table. Changing it changes every
/// condition vector, so it is part of the data format.
const EMBED_TABLE_SEED: u64 = 0x7159_5F74_6162_6C65;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn from_id(id: usize) -> Option<Shape> {
        match id {
            0 => Some(Shape::Circle),
            1 => Some(Shape::Square),
            2 => Some(Shape::Triangle),
            _ => None,
        }
    }
}

/// RGB primaries in `[-1, 1]`, indexed by color id.
const COLORS: [[f32; 3]; COLOR_CLASSES] = [
    [1.0, -0.8, -0.8],  // red
    [-0.8, 1.0, -0.8],  // green
    [-0.7, -0.7, 1.0],  // blue
    [1.0, 1.0, -0.8],   // yellow
];

/// Rendering parameters of the toy distribution.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub image_size: usize,
    /// Shape center jitter, as a fraction of the image side.
    pub position_jitter: f64,
    /// Relative size jitter around the base radius.
    pub size_jitter: f64,
    /// Base radius as a fraction of the image side.
    pub base_radius: f64,
    /// Background intensity in `[-1, 1]`.
    pub background: f32,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            image_size: 24,
            position_jitter: 0.08,
            size_jitter: 0.2,
            base_radius: 0.27,
            background: -0.95,
        }
    }
}

impl ToySpec {
    /// Checks that every jittered shape stays fully inside the canvas.
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 {
            return Err(Error::InvalidSpec {
                detail: format!("image_size {} too small", self.image_size),
            });
        }
        if !(0.0..0.5).contains(&self.position_jitter)
            || !(0.0..1.0).contains(&self.size_jitter)
            || self.base_radius <= 0.0
        {
            return Err(Error::InvalidSpec {
                detail: "jitter/radius parameters out of range".into(),
            });
        }
        let max_extent = self.position_jitter + self.base_radius * (1.0 + self.size_jitter);
        // margin for the anti-aliasing ramp (canvas coordinates span [-1, 1])
        if max_extent > 1.0 - 3.0 / self.image_size as f64 {
            return Err(Error::InvalidSpec {
                detail: format!(
                    "shapes can leave the canvas: extent {max_extent:.3} of half-width 1.0"
                ),
            });
        }
        if !(-1.0..=1.0).contains(&self.background) {
            return Err(Error::InvalidSpec { detail: "background outside [-1, 1]".into() });
        }
        Ok(())
    }
}

/// A conditioning vector derived from `(shape, color)` class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct CondVector(pub Vec<f32>);

impl CondVector {
    /// The null condition used for classifier-free guidance.
    pub fn null() -> Self {
        CondVector(vec![0.0; COND_DIM])
    }

    pub fn is_null(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

fn embedding_table() -> Vec<[f32; COND_DIM]> {
    let mut rng = ChaCha8Rng::seed_from_u64(EMBED_TABLE_SEED);
    (0..NUM_CLASSES)
        .map(|_| {
            let mut row = [0f32; COND_DIM];
            for v in row.iter_mut() {
                *v = normal_f32(&mut rng);
            }
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            for v in row.iter_mut() {
                *v /= norm;
            }
            row
        })
        .collect()
}

fn normal_f32(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller on the ChaCha stream; keeps the table reproducible
    // independent of distribution-crate internals.
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

/// Unit-normalized row of the fixed embedding table for a class pair.
pub fn cond_embed(shape_id: usize, color_id: usize) -> Result<CondVector> {
    if shape_id >= SHAPE_CLASSES || color_id >= COLOR_CLASSES {
        return Err(Error::UnknownClass { shape_id, color_id });
    }
    let table = embedding_table();
    Ok(CondVector(table[shape_id * COLOR_CLASSES + color_id].to_vec()))
}

/// All `(shape_id, color_id, embedding)` triples; the prompt vocabulary
/// for image-free distillation.
pub fn all_conditions() -> Vec<(usize, usize, CondVector)> {
    let table = embedding_table();
    (0..SHAPE_CLASSES)
        .flat_map(|s| (0..COLOR_CLASSES).map(move |c| (s, c)))
        .map(|(s, c)| (s, c, CondVector(table[s * COLOR_CLASSES + c].to_vec())))
        .collect()
}

/// One labelled sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub shape_id: usize,
    pub color_id: usize,
    pub cond: CondVector,
}

fn shape_sdf(shape: Shape, x: f64, y: f64, r: f64) -> f64 {
    match shape {
        Shape::Circle => (x * x + y * y).sqrt() - r,
        Shape::Square => x.abs().max(y.abs()) - r,
        Shape::Triangle => {
            // equilateral triangle pointing up, circumradius r:
            // intersection of three half-planes with unit normals
            let k = 3f64.sqrt();
            let bottom = -y - r * 0.5;
            let right = (k * x + y) / 2.0 - r * 0.5;
            let left = (-k * x + y) / 2.0 - r * 0.5;
            bottom.max(right).max(left)
        }
    }
}

fn render(spec: &ToySpec, shape: Shape, color: [f32; 3], cx: f64, cy: f64, r: f64) -> Tensor<f32> {
    let n = spec.image_size;
    let plane = n * n;
    let mut data = vec![spec.background; 3 * plane];
    let px = 2.0 / n as f64; // pixel width in [-1, 1] coordinates
    for iy in 0..n {
        for ix in 0..n {
            let x = (ix as f64 + 0.5) * px - 1.0 - cx;
            let y = 1.0 - (iy as f64 + 0.5) * px - cy;
            let d = shape_sdf(shape, x, y, r);
            // smooth coverage ramp one pixel wide
            let alpha = (0.5 - d / px).clamp(0.0, 1.0) as f32;
            if alpha > 0.0 {
                let idx = iy * n + ix;
                for c in 0..3 {
                    let bg = data[c * plane + idx];
                    data[c * plane + idx] = bg + alpha * (color[c] - bg);
                }
            }
        }
    }
    Tensor::from_vec(&[3, n, n], data).expect("render shape")
}

/// Deterministic dataset of `n` samples; class labels cycle through the
/// 12-class grid so per-class counts are exactly uniform, while jitter
/// comes from the seeded stream.
pub fn generate_dataset(spec: &ToySpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let table = embedding_table();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % NUM_CLASSES;
        let shape_id = class / COLOR_CLASSES;
        let color_id = class % COLOR_CLASSES;
        let shape = Shape::from_id(shape_id).expect("class id in range");
        let cx = (rng.random::<f64>() * 2.0 - 1.0) * spec.position_jitter;
        let cy = (rng.random::<f64>() * 2.0 - 1.0) * spec.position_jitter;
        let r = spec.base_radius * (1.0 + (rng.random::<f64>() * 2.0 - 1.0) * spec.size_jitter);
        let image = render(spec, shape, COLORS[color_id], cx, cy, r);
        out.push(Sample {
            image,
            shape_id,
            color_id,
            cond: CondVector(table[class].to_vec()),
        });
    }
    Ok(out)
}

/// Manifest entry for exported datasets.
#[derive(Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub shape_id: usize,
    pub color_id: usize,
}

/// Writes every sample as `sample_{i:05}.ppm` plus a JSON manifest
/// mapping filenames to class ids.
pub fn export_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("sample_{i:05}.ppm");
        ppm::write_file(&dir.join(&file), &s.image)?;
        manifest.push(ManifestEntry { file, shape_id: s.shape_id, color_id: s.color_id });
    }
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Parse { detail: e.to_string() })?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}
