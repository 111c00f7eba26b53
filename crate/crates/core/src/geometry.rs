//! Patches, patch sets, grids and coverage rasterization.
//!
//! A [`Patch`] is the triple `(x, y, s)`: its footprint is the axis-aligned
//! square `[x, x + r*s) x [y, y + r*s)` in image pixels, where `r` is the
//! native token resolution carried by the owning [`PatchSet`]. Coordinates
//! are real-valued; rasterization uses half-open intervals so abutting tiles
//! never share a pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    #[serde(rename = "w")]
    pub width: usize,
    #[serde(rename = "h")]
    pub height: usize,
    #[serde(rename = "c")]
    pub channels: usize,
}

impl ImageSpec {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
        })
    }

    pub fn square(side: usize, channels: usize) -> Result<Self> {
        Self::new(side, side, channels)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub x: f64,
    pub y: f64,
    pub s: f64,
    /// Identifier of the image the patch was sampled from (used by mixing).
    #[serde(rename = "src", default)]
    pub source: u32,
}

impl Patch {
    pub fn new(x: f64, y: f64, s: f64) -> Self {
        Self { x, y, s, source: 0 }
    }

    /// Side length of the footprint in pixels.
    pub fn side(&self, r: usize) -> f64 {
        r as f64 * self.s
    }

    pub fn center(&self, r: usize) -> (f64, f64) {
        let half = 0.5 * self.side(r);
        (self.x + half, self.y + half)
    }

    /// Half-open pixel ranges `(x0..x1, y0..y1)` covered by the footprint,
    /// clipped to the image.
    pub fn pixel_bounds(&self, r: usize, image: &ImageSpec) -> (usize, usize, usize, usize) {
        let side = self.side(r);
        let (x0, x1) = clip_span(self.x, self.x + side, image.width);
        let (y0, y1) = clip_span(self.y, self.y + side, image.height);
        (x0, x1, y0, y1)
    }
}

/// Integer pixels `p` with `lo <= p < hi`, clipped to `0..n`.
fn clip_span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let a = lo.ceil().max(0.0);
    let b = hi.ceil().min(n as f64);
    if !(b > a) {
        return (0, 0);
    }
    (a as usize, b as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSet {
    pub image: ImageSpec,
    pub r: usize,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn new(image: ImageSpec, r: usize, patches: Vec<Patch>) -> Result<Self> {
        if r < 2 {
            return Err(Error::invalid(format!("native patch size must be >= 2, got {r}")));
        }
        Ok(Self { image, r, patches })
    }

    pub fn empty(image: ImageSpec, r: usize) -> Result<Self> {
        Self::new(image, r, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn with_patches(&self, patches: Vec<Patch>) -> Self {
        Self {
            image: self.image,
            r: self.r,
            patches,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Regular non-overlapping grid of `s = 1` patches in row-major order.
pub fn make_grid(image: ImageSpec, r: usize) -> Result<PatchSet> {
    if r < 2 {
        return Err(Error::invalid(format!("native patch size must be >= 2, got {r}")));
    }
    if image.width % r != 0 || image.height % r != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} image is not divisible by patch size {r}",
            image.width, image.height
        )));
    }
    let (cols, rows) = (image.width / r, image.height / r);
    let mut patches = Vec::with_capacity(cols * rows);
    for j in 0..rows {
        for i in 0..cols {
            patches.push(Patch::new((i * r) as f64, (j * r) as f64, 1.0));
        }
    }
    PatchSet::new(image, r, patches)
}

/// `n x n` tiling of a square image; every patch has `s = side / (n * r)`.
pub fn make_density_grid(image: ImageSpec, r: usize, n: usize) -> Result<PatchSet> {
    if n == 0 {
        return Err(Error::invalid("grid side count must be >= 1"));
    }
    if image.width != image.height {
        return Err(Error::DimensionMismatch(format!(
            "density grid needs a square image, got {}x{}",
            image.width, image.height
        )));
    }
    let cell = image.width as f64 / n as f64;
    let s = cell / r as f64;
    let mut patches = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            patches.push(Patch::new(i as f64 * cell, j as f64 * cell, s));
        }
    }
    PatchSet::new(image, r, patches)
}

/// Per-pixel footprint counts, `height x width`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageMap {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
}

impl CoverageMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            counts: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.counts[y * self.width + x]
    }

    pub fn add_patch(&mut self, patch: &Patch, r: usize, image: &ImageSpec) {
        let (x0, x1, y0, y1) = patch.pixel_bounds(r, image);
        for y in y0..y1 {
            let row = &mut self.counts[y * self.width..(y + 1) * self.width];
            for c in &mut row[x0..x1] {
                *c += 1;
            }
        }
    }

    pub fn covered(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// True when every pixel is covered exactly once.
    pub fn is_partition(&self) -> bool {
        self.counts.iter().all(|&c| c == 1)
    }
}

pub fn rasterize_coverage(set: &PatchSet) -> CoverageMap {
    let mut map = CoverageMap::zeros(set.image.width, set.image.height);
    for p in &set.patches {
        map.add_patch(p, set.r, &set.image);
    }
    map
}

pub fn coverage_fraction(set: &PatchSet) -> f64 {
    let map = rasterize_coverage(set);
    map.covered() as f64 / set.image.pixel_count() as f64
}

/// Index of a 2x2 block of grid cells: block `(bx, by)` spans cells
/// `2bx..2bx+2` by `2by..2by+2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockIndex {
    pub bx: usize,
    pub by: usize,
}

/// All 2x2 blocks of the `s = 1` grid of `image`, row-major.
pub fn grid_blocks(image: &ImageSpec, r: usize) -> Vec<BlockIndex> {
    let (cols, rows) = (image.width / r / 2, image.height / r / 2);
    (0..rows)
        .flat_map(|by| (0..cols).map(move |bx| BlockIndex { bx, by }))
        .collect()
}

/// Positions in `set.patches` of the four unmodified cells of `block`.
fn locate_block(set: &PatchSet, block: BlockIndex) -> Result<[usize; 4]> {
    let r = set.r;
    let (cols, rows) = (set.image.width / r, set.image.height / r);
    if 2 * block.bx + 2 > cols || 2 * block.by + 2 > rows {
        return Err(Error::invalid(format!(
            "block ({}, {}) outside the {cols}x{rows} grid",
            block.bx, block.by
        )));
    }
    let mut found = [usize::MAX; 4];
    for (k, (dx, dy)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
        let cx = ((2 * block.bx + dx) * r) as f64;
        let cy = ((2 * block.by + dy) * r) as f64;
        found[k] = set
            .patches
            .iter()
            .position(|p| p.x == cx && p.y == cy && p.s == 1.0)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "block ({}, {}) is missing or already modified",
                    block.bx, block.by
                ))
            })?;
    }
    Ok(found)
}

/// Replace the four cells of `block` with one patch of twice the scale.
/// The merged patch takes the slot of the earliest of the four.
pub fn block_rescale(set: &PatchSet, block: BlockIndex) -> Result<PatchSet> {
    let idx = locate_block(set, block)?;
    let first = *idx.iter().min().expect("four indices");
    let top_left = set.patches[idx[0]];
    let merged = Patch {
        s: 2.0,
        ..top_left
    };
    let patches = set
        .patches
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            if i == first {
                Some(merged)
            } else if idx.contains(&i) {
                None
            } else {
                Some(*p)
            }
        })
        .collect();
    Ok(set.with_patches(patches))
}

/// Keep one uniformly chosen cell of `block` and remove the other three.
pub fn block_drop(set: &PatchSet, block: BlockIndex, rng: &mut Rng) -> Result<PatchSet> {
    let idx = locate_block(set, block)?;
    let survivor = idx[rng.below(4)];
    let patches = set
        .patches
        .iter()
        .enumerate()
        .filter(|(i, _)| *i == survivor || !idx.contains(i))
        .map(|(_, p)| *p)
        .collect();
    Ok(set.with_patches(patches))
}

/// Append `k` patches with `s ~ U[s_min, s_max]` placed uniformly so the
/// footprint lies inside the image.
pub fn add_redundant_patches(
    set: &PatchSet,
    k: usize,
    s_min: f64,
    s_max: f64,
    rng: &mut Rng,
) -> Result<PatchSet> {
    if !(s_min > 0.0 && s_min <= s_max) {
        return Err(Error::invalid(format!(
            "redundant scale range [{s_min}, {s_max}] is invalid"
        )));
    }
    let r = set.r as f64;
    let min_side = set.image.width.min(set.image.height) as f64;
    if r * s_max > min_side {
        return Err(Error::invalid(format!(
            "footprint {} px does not fit a {}x{} image",
            r * s_max,
            set.image.width,
            set.image.height
        )));
    }
    let mut patches = set.patches.clone();
    patches.reserve(k);
    for _ in 0..k {
        let s = rng.range(s_min, s_max);
        let side = r * s;
        let x = rng.range(0.0, set.image.width as f64 - side);
        let y = rng.range(0.0, set.image.height as f64 - side);
        patches.push(Patch::new(x, y, s));
    }
    Ok(set.with_patches(patches))
}
