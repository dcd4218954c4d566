//! Deterministic synthetic segmentation scenes: flat-coloured circles,
//! rectangles and triangles painted back-to-front over a sinusoidal texture,
//! followed by Gaussian pixel noise.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{LabelMap, Tensor};

pub const BACKGROUND: u8 = 0;
/// Class hidden by the nearest-neighbour attack unless configured otherwise.
pub const CIRCLE: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    /// Background plus `classes − 1` shape classes.
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Mean RGB per class; entry 0 is the background base colour.
    pub palette: Vec<[f32; 3]>,
    /// Peak amplitude of the background texture (pixel units).
    pub texture_amplitude: f32,
    pub noise_std: f32,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 4,
            min_shapes: 1,
            max_shapes: 3,
            palette: default_palette(4),
            texture_amplitude: 20.0,
            noise_std: 8.0,
            seed: 0,
            train_size: 200,
            val_size: 100,
        }
    }
}

/// Background, circle, rectangle, triangle; further classes get spread hues.
pub fn default_palette(classes: usize) -> Vec<[f32; 3]> {
    let base = [
        [120.0, 120.0, 120.0],
        [155.0, 100.0, 100.0],
        [100.0, 105.0, 155.0],
        [150.0, 150.0, 90.0],
    ];
    (0..classes)
        .map(|k| {
            base.get(k).copied().unwrap_or_else(|| {
                let t = k as f32 * 0.618_034;
                let hue = (t - t.floor()) * std::f32::consts::TAU;
                [
                    140.0 + 90.0 * hue.cos(),
                    140.0 + 90.0 * (hue + 2.094).cos(),
                    140.0 + 90.0 * (hue + 4.189).cos(),
                ]
            })
        })
        .collect()
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 3 || self.classes > 255 {
            return Err(Error::Config(format!("class count must be in [3, 255], got {}", self.classes)));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "images must be at least 32×32, got {}×{}",
                self.height, self.width
            )));
        }
        if self.palette.len() != self.classes {
            return Err(Error::Config(format!(
                "palette has {} colours for {} classes",
                self.palette.len(),
                self.classes
            )));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config("min_shapes exceeds max_shapes".into()));
        }
        if !(self.noise_std >= 0.0 && self.texture_amplitude >= 0.0) {
            return Err(Error::Config("noise and texture amplitudes must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// `H×W×3`, values in `[0, 255]`.
    pub image: Tensor,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub fn for_class(class: u8) -> Self {
        match (class.max(1) - 1) % 3 {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Rectangle,
            _ => ShapeKind::Triangle,
        }
    }
}

/// One painted shape. Extents are half-sizes in pixels; circles use `half_rows` as radius.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub class: u8,
    pub kind: ShapeKind,
    pub center: (f32, f32),
    pub half_rows: f32,
    pub half_cols: f32,
    /// Triangle apex direction: 0 up, 1 down, 2 left, 3 right.
    pub orientation: u8,
}

impl Shape {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        let di = i as f32 + 0.5 - self.center.0;
        let dj = j as f32 + 0.5 - self.center.1;
        match self.kind {
            ShapeKind::Circle => di * di + dj * dj <= self.half_rows * self.half_rows,
            ShapeKind::Rectangle => di.abs() <= self.half_rows && dj.abs() <= self.half_cols,
            ShapeKind::Triangle => {
                // along = distance from the apex towards the base, across = offset from the axis
                let (along, across, length, half_base) = match self.orientation {
                    0 => (di + self.half_rows, dj, 2.0 * self.half_rows, self.half_cols),
                    1 => (self.half_rows - di, dj, 2.0 * self.half_rows, self.half_cols),
                    2 => (dj + self.half_cols, di, 2.0 * self.half_cols, self.half_rows),
                    _ => (self.half_cols - dj, di, 2.0 * self.half_cols, self.half_rows),
                };
                (0.0..=length).contains(&along) && across.abs() <= half_base * along / length
            }
        }
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, cfg: &DatasetConfig) -> Shape {
    let class = rng.random_range(1..cfg.classes) as u8;
    let kind = ShapeKind::for_class(class);
    let center = (
        rng.random_range(0.0..cfg.height as f32),
        rng.random_range(0.0..cfg.width as f32),
    );
    let scale = cfg.height.min(cfg.width) as f32 / 64.0;
    let (half_rows, half_cols) = match kind {
        ShapeKind::Circle => {
            let r = rng.random_range(6.0..13.0) * scale;
            (r, r)
        }
        ShapeKind::Rectangle => (
            rng.random_range(5.0..13.0) * scale,
            rng.random_range(5.0..13.0) * scale,
        ),
        ShapeKind::Triangle => (
            rng.random_range(7.0..14.0) * scale,
            rng.random_range(7.0..14.0) * scale,
        ),
    };
    Shape {
        class,
        kind,
        center,
        half_rows,
        half_cols,
        orientation: rng.random_range(0..4),
    }
}

/// Paints `shapes` (in order, later ones on top) over a textured background and adds noise.
pub fn render_scene(id: &str, shapes: &[Shape], cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Result<SegSample> {
    let (h, w) = (cfg.height, cfg.width);
    let freq: [f32; 4] = std::array::from_fn(|_| rng.random_range(0.12..0.45));
    let phase: [f32; 2] = std::array::from_fn(|_| rng.random_range(0.0..std::f32::consts::TAU));
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));

    let mut labels = LabelMap::filled(h, w, BACKGROUND);
    let mut image = vec![0.0f32; h * w * 3];
    for i in 0..h {
        for j in 0..w {
            let (fi, fj) = (i as f32, j as f32);
            let texture = 0.6 * (freq[0] * fi + freq[1] * fj + phase[0]).sin()
                + 0.4 * (freq[2] * fi - freq[3] * fj + phase[1]).sin();
            let px = &mut image[(i * w + j) * 3..][..3];
            for c in 0..3 {
                px[c] = cfg.palette[0][c] + cfg.texture_amplitude * tint[c] * texture;
            }
            for shape in shapes {
                if shape.contains(i, j) {
                    labels.set(i, j, shape.class);
                    px.copy_from_slice(&cfg.palette[usize::from(shape.class)]);
                }
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0f32, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut image {
            *v += noise.sample(rng);
        }
    }
    for v in &mut image {
        *v = v.clamp(0.0, 255.0);
    }
    Ok(SegSample {
        id: id.to_string(),
        image: Tensor::new(vec![h, w, 3], image)?,
        labels,
    })
}

pub fn generate_scene(rng: &mut ChaCha8Rng, cfg: &DatasetConfig, id: &str) -> Result<SegSample> {
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let shapes: Vec<Shape> = (0..count).map(|_| sample_shape(rng, cfg)).collect();
    render_scene(id, &shapes, cfg, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

pub fn sample_id(split: Split, index: usize) -> String {
    format!("{}-{index:05}", split.name())
}

/// Generates one split; each sample has its own seed derived from `(seed, split, index)`.
pub fn generate_split(cfg: &DatasetConfig, split: Split) -> Result<Vec<SegSample>> {
    cfg.validate()?;
    let n = match split {
        Split::Train => cfg.train_size,
        Split::Val => cfg.val_size,
    };
    (0..n)
        .map(|k| {
            let mut rng = rng_from_seed(derive_seed(cfg.seed, split.name(), k as u64));
            generate_scene(&mut rng, cfg, &sample_id(split, k))
        })
        .collect()
}

/// Number of samples in which each class occurs at least once.
pub fn class_image_counts(samples: &[SegSample], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for s in samples {
        let mut seen = vec![false; classes];
        for &c in s.labels.data() {
            seen[usize::from(c)] = true;
        }
        for (n, s) in counts.iter_mut().zip(seen) {
            *n += usize::from(s);
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(move |e| e.split == split).map(|e| e.id.as_str())
    }
}

/// Minimum share of training images each class must appear in.
const MIN_CLASS_SHARE: f64 = 0.05;
const MAX_SEED_RETRIES: u64 = 16;

/// Generates both splits, re-seeding (recorded in the manifest) when some
/// class is too rare in the training split.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<(Vec<SegSample>, Vec<SegSample>, Manifest)> {
    cfg.validate()?;
    let mut effective = cfg.clone();
    let need = (MIN_CLASS_SHARE * cfg.train_size as f64).ceil() as usize;
    for attempt in 0..=MAX_SEED_RETRIES {
        if attempt > 0 {
            effective.seed = derive_seed(cfg.seed, "reseed", attempt);
        }
        let train = generate_split(&effective, Split::Train)?;
        if class_image_counts(&train, cfg.classes).iter().all(|&n| n >= need) {
            let val = generate_split(&effective, Split::Val)?;
            let entries = train
                .iter()
                .map(|s| (s, Split::Train))
                .chain(val.iter().map(|s| (s, Split::Val)))
                .map(|(s, split)| ManifestEntry {
                    id: s.id.clone(),
                    split,
                })
                .collect();
            let manifest = Manifest {
                config: effective,
                entries,
            };
            return Ok((train, val, manifest));
        }
    }
    Err(Error::Config(format!(
        "no seed within {MAX_SEED_RETRIES} retries covers every class in {need} training images"
    )))
}

pub fn write_samples(dir: &Path, samples: &[SegSample]) -> Result<()> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in samples {
        container::write_tensor(&images.join(format!("{}.ten", s.id)), &s.image)?;
        container::write_labels(&labels.join(format!("{}.ten", s.id)), &s.labels)?;
    }
    Ok(())
}

pub fn read_sample(dir: &Path, id: &str) -> Result<SegSample> {
    Ok(SegSample {
        id: id.to_string(),
        image: container::read_tensor(&dir.join("images").join(format!("{id}.ten")))?,
        labels: container::read_labels(&dir.join("labels").join(format!("{id}.ten")))?,
    })
}

/// Writes `images/<id>.ten`, `labels/<id>.ten` and `manifest.json`.
pub fn write_dataset(dir: &Path, cfg: &DatasetConfig) -> Result<Manifest> {
    let (train, val, manifest) = generate_dataset(cfg)?;
    write_samples(dir, &train)?;
    write_samples(dir, &val)?;
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<SegSample>> {
    manifest.ids(split).map(|id| read_sample(dir, id)).collect()
}
