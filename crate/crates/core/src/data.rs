//! Synthetic shape datasets, IDX loading and a binary dataset cache.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::Image;
use crate::geometry::ImageSpec;
use crate::model::checkpoint::{decode_tensors, encode_tensors, NamedTensor, Reader};
use crate::par::Exec;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    /// Seeded permutation split into `(train, val)` with `val_count` held out.
    pub fn split(&self, val_count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if val_count > self.len() {
            return Err(Error::invalid(format!(
                "cannot hold out {val_count} of {} samples",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        Rng::seed_from_u64(seed).shuffle(&mut order);
        let pick = |idx: &[usize]| Dataset {
            classes: self.classes,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        };
        Ok((pick(&order[val_count..]), pick(&order[..val_count])))
    }
}

/// Size and placement regime of the rendered shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShapeLayout {
    /// Radius 18-38% of the side, anywhere inside the image.
    #[default]
    Standard,
    /// Radius 10-15% of the side, centre at least 20% of the side away from
    /// the image centre.
    SmallOffCenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub size: usize,
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub layout: ShapeLayout,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_side() -> usize {
    64
}
fn one() -> usize {
    1
}
fn default_noise() -> f64 {
    0.05
}

impl DatasetSpec {
    pub fn new(classes: usize, size: usize, side: usize, seed: u64) -> Self {
        Self {
            classes,
            size,
            side,
            channels: 1,
            seed,
            layout: ShapeLayout::Standard,
            noise: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=SHAPE_KINDS).contains(&self.classes) {
            return Err(Error::Config(format!(
                "classes must be in 2..={SHAPE_KINDS}, got {}",
                self.classes
            )));
        }
        if self.side < 8 {
            return Err(Error::Config(format!("image side {} is too small", self.side)));
        }
        ImageSpec::square(self.side, self.channels).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

pub const SHAPE_KINDS: usize = 8;
pub const SHAPE_NAMES: [&str; SHAPE_KINDS] =
    ["circle", "square", "triangle", "cross", "ring", "flower", "bar", "ell"];

/// Membership test in shape-local coordinates scaled so the shape fits the
/// unit disc.
fn inside(kind: usize, u: f64, v: f64) -> bool {
    match kind {
        0 => u * u + v * v <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.75,
        2 => {
            // equilateral, circumradius 1, inradius 0.5
            const N: [(f64, f64); 3] = [
                (0.0, -1.0),
                (0.866_025_403_784_438_6, 0.5),
                (-0.866_025_403_784_438_6, 0.5),
            ];
            N.iter().all(|(nx, ny)| u * nx + v * ny <= 0.5)
        }
        3 => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        4 => {
            let r2 = u * u + v * v;
            (0.3025..=1.0).contains(&r2)
        }
        5 => {
            let r = (u * u + v * v).sqrt();
            r <= 0.6 + 0.35 * (5.0 * v.atan2(u)).cos()
        }
        6 => u.abs() <= 0.95 && v.abs() <= 0.3,
        7 => {
            (-0.85..=-0.25).contains(&u) && v.abs() <= 0.85
                || (-0.85..=0.85).contains(&u) && (0.25..=0.85).contains(&v)
        }
        _ => unreachable!("shape kind {kind}"),
    }
}

const SUPERSAMPLE: usize = 4;

fn render(spec: &DatasetSpec, kind: usize, rng: &mut Rng) -> Image {
    let side = spec.side as f64;
    let (r_lo, r_hi) = match spec.layout {
        ShapeLayout::Standard => (0.18, 0.38),
        ShapeLayout::SmallOffCenter => (0.10, 0.15),
    };
    let radius = side * rng.range(r_lo, r_hi);
    let (cx, cy) = loop {
        let cx = rng.range(radius, side - radius);
        let cy = rng.range(radius, side - radius);
        let far = match spec.layout {
            ShapeLayout::Standard => true,
            ShapeLayout::SmallOffCenter => {
                (cx - side / 2.0).hypot(cy - side / 2.0) >= 0.2 * side
            }
        };
        if far {
            break (cx, cy);
        }
    };
    let angle = rng.range(0.0, std::f64::consts::TAU);
    let (sin, cos) = angle.sin_cos();
    let mut colors = Vec::with_capacity(spec.channels);
    for _ in 0..spec.channels {
        // dark background, bright foreground, contrast at least 0.2
        let bg = rng.range(0.0, 0.4);
        let fg = rng.range(0.6, 1.0);
        colors.push((bg, fg));
    }

    let n = spec.side;
    let mut coverage = vec![0.0; n * n];
    let x0 = (cx - radius).floor().max(0.0) as usize;
    let x1 = ((cx + radius).ceil() as usize).min(n);
    let y0 = (cy - radius).floor().max(0.0) as usize;
    let y1 = ((cy + radius).ceil() as usize).min(n);
    let step = 1.0 / SUPERSAMPLE as f64;
    let inv_r = 1.0 / radius;
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                let py = y as f64 + (sy as f64 + 0.5) * step - cy;
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step - cx;
                    let u = (cos * px + sin * py) * inv_r;
                    let v = (-sin * px + cos * py) * inv_r;
                    if inside(kind, u, v) {
                        hits += 1;
                    }
                }
            }
            coverage[y * n + x] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }

    let img_spec = ImageSpec::square(n, spec.channels).expect("validated spec");
    let mut pixels = Vec::with_capacity(n * n * spec.channels);
    for &(bg, fg) in &colors {
        for &c in &coverage {
            let v = bg + (fg - bg) * c + spec.noise * rng.normal();
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    Image::new(img_spec, pixels).expect("finite pixels")
}

/// Render `spec.size` images; sample `i` has class `i % classes` and is a
/// pure function of `(spec, i)`.
pub fn synth_shapes(spec: &DatasetSpec) -> Result<Dataset> {
    synth_shapes_with(spec, Exec::default())
}

pub fn synth_shapes_with(spec: &DatasetSpec, exec: Exec) -> Result<Dataset> {
    spec.validate()?;
    let samples = exec.map_range(spec.size, |i| {
        let mut rng = Rng::derive(spec.seed, i as u64);
        let label = i % spec.classes;
        Sample {
            image: render(spec, label, &mut rng),
            label,
        }
    });
    Ok(Dataset {
        classes: spec.classes,
        samples,
    })
}

/// Raw IDX array: big-endian dims and an unsigned-byte payload.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::parse(bytes.len(), "truncated IDX magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::parse(0, "bad IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(Error::parse(2, format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::parse(3, "IDX rank must be positive"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::parse(bytes.len(), "truncated IDX dimensions"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize)
        .collect();
    let numel: usize = dims.iter().product();
    if bytes.len() - header < numel {
        return Err(Error::parse(
            bytes.len(),
            format!("IDX payload truncated: {} of {numel} bytes", bytes.len() - header),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..header + numel].to_vec(),
    })
}

pub fn encode_idx(arr: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, arr.dims.len() as u8];
    for &d in &arr.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    out
}

/// Build a grayscale dataset from an `N x H x W` image array and an `N`
/// label array.
pub fn dataset_from_idx(images: &IdxArray, labels: &IdxArray) -> Result<Dataset> {
    if images.dims.len() != 3 {
        return Err(Error::invalid(format!(
            "image array must have rank 3, got {}",
            images.dims.len()
        )));
    }
    if labels.dims.len() != 1 {
        return Err(Error::invalid("label array must have rank 1"));
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(Error::invalid(format!(
            "{n} images but {} labels",
            labels.dims[0]
        )));
    }
    let spec = ImageSpec::new(w, h, 1)?;
    let classes = (labels.data.iter().copied().max().unwrap_or(0) as usize + 1).max(2);
    let samples = images
        .data
        .chunks_exact(w * h)
        .zip(&labels.data)
        .map(|(px, &label)| Sample {
            image: Image {
                spec,
                pixels: px.iter().map(|&b| b as f64 / 255.0).collect(),
            },
            label: label as usize,
        })
        .collect();
    Ok(Dataset { classes, samples })
}

pub fn load_raw_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let imgs = parse_idx(&read(images.as_ref())?)?;
    let labs = parse_idx(&read(labels.as_ref())?)?;
    dataset_from_idx(&imgs, &labs)
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Cache { cache: PathBuf },
    Synthetic(DatasetSpec),
}

/// A data source plus the seeded hold-out used for validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub val_size: usize,
    #[serde(default)]
    pub split_seed: u64,
}

impl DataConfig {
    pub fn synthetic(spec: DatasetSpec, val_size: usize) -> Self {
        Self {
            source: DataSource::Synthetic(spec),
            val_size,
            split_seed: 0,
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match &self.source {
            DataSource::Synthetic(spec) => synth_shapes(spec),
            DataSource::Idx { images, labels } => load_raw_idx(images, labels),
            DataSource::Cache { cache } => load_dataset(cache),
        }
    }

    /// `(train, val)`; with `val_size = 0` the validation set is empty.
    pub fn splits(&self) -> Result<(Dataset, Dataset)> {
        self.load()?.split(self.val_size, self.split_seed)
    }

    /// The held-out part, or every sample when no hold-out is configured.
    pub fn eval_set(&self) -> Result<Dataset> {
        if self.val_size == 0 {
            self.load()
        } else {
            Ok(self.splits()?.1)
        }
    }
}

const DATA_MAGIC: &[u8; 8] = b"EVITDATA";
const DATA_VERSION: u32 = 1;

/// Serialize with the checkpoint tensor layout: magic, version, class
/// count, then tensors `images` (`N x C x H x W`) and `labels` (`N`).
pub fn write_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let Some(first) = ds.samples.first() else {
        return Err(Error::invalid("cannot cache an empty dataset"));
    };
    let spec = first.image.spec;
    if ds.samples.iter().any(|s| s.image.spec != spec) {
        return Err(Error::invalid("dataset images differ in shape"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.classes as u32).to_le_bytes());
    let images = NamedTensor {
        name: "images".into(),
        shape: vec![ds.len(), spec.channels, spec.height, spec.width],
        data: ds.samples.iter().flat_map(|s| s.image.pixels.iter().copied()).collect(),
    };
    let labels = NamedTensor {
        name: "labels".into(),
        shape: vec![ds.len()],
        data: ds.samples.iter().map(|s| s.label as f64).collect(),
    };
    encode_tensors(&mut out, &[images, labels]);
    Ok(out)
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut rd = Reader::new(bytes);
    if rd.take(8, "magic")? != DATA_MAGIC {
        return Err(Error::parse(0, "not a dataset cache (bad magic)"));
    }
    let version = rd.u32("version")?;
    if version != DATA_VERSION {
        return Err(Error::parse(8, format!("unsupported dataset version {version}")));
    }
    let classes = rd.u32("class count")? as usize;
    let tensors = decode_tensors(&mut rd)?;
    let find = |name: &str| {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::parse(rd.pos, format!("missing tensor {name}")))
    };
    let images = find("images")?;
    let labels = find("labels")?;
    let [n, c, h, w] = images.shape[..] else {
        return Err(Error::parse(16, "images tensor must have rank 4"));
    };
    if labels.shape != [n] {
        return Err(Error::parse(16, "labels tensor does not match image count"));
    }
    let spec = ImageSpec::new(w, h, c)?;
    let per = c * h * w;
    let samples = images
        .data
        .chunks_exact(per)
        .zip(&labels.data)
        .map(|(px, &l)| Sample {
            image: Image {
                spec,
                pixels: px.to_vec(),
            },
            label: l as usize,
        })
        .collect();
    Ok(Dataset { classes, samples })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_dataset(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    read_dataset(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
