//! Patch-selection strategies: uniform grid, density grid, CENTRAL and EDGE
//! quadtree subdivision, plus the Canny detector that scores EDGE cells.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::Image;
use crate::geometry::{make_density_grid, make_grid, ImageSpec, Patch, PatchSet};

/// Row-major `height x width` edge bitmap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub bitmap: Vec<bool>,
}

impl EdgeMap {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bitmap[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bitmap.iter().filter(|&&b| b).count()
    }

    /// Number of edge pixels inside the integer square `[x, x+side) x [y, y+side)`.
    pub fn sum_square(&self, x: usize, y: usize, side: usize) -> u64 {
        let mut n = 0;
        for yy in y..(y + side).min(self.height) {
            let row = &self.bitmap[yy * self.width..(yy + 1) * self.width];
            n += row[x.min(self.width)..(x + side).min(self.width)]
                .iter()
                .filter(|&&b| b)
                .count() as u64;
        }
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    pub sigma: f64,
    pub t_low: f64,
    pub t_high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            t_low: 0.1,
            t_high: 0.2,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

#[inline]
fn clamped(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable Gaussian blur with replicated borders.
fn blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = clamped(x as isize + j as isize - radius, w);
                acc += kv * src[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = clamped(y as isize + j as isize - radius, h);
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

pub fn canny(img: &Image, params: &CannyParams) -> Result<EdgeMap> {
    let CannyParams {
        sigma,
        t_low,
        t_high,
    } = *params;
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma {sigma} must be positive")));
    }
    if !(0.0 <= t_low && t_low <= t_high && t_high <= 1.0) {
        return Err(Error::invalid(format!(
            "thresholds must satisfy 0 <= {t_low} <= {t_high} <= 1"
        )));
    }
    let (w, h) = (img.spec.width, img.spec.height);
    let smooth = blur(&img.to_gray(), w, h, sigma);
    let at = |x: isize, y: isize| smooth[clamped(y, h) * w + clamped(x, w)];

    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut mag = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let dx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let dy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            gx[i] = dx;
            gy[i] = dy;
            mag[i] = dx.hypot(dy);
        }
    }

    // Non-maximum suppression along the quantized gradient direction. The
    // comparison is strict on the backward neighbour so symmetric ridges
    // keep a single pixel.
    let mut thin = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (ox, oy): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let nb = |sx: isize, sy: isize| -> f64 {
                let xx = x as isize + sx;
                let yy = y as isize + sy;
                if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                    0.0
                } else {
                    mag[yy as usize * w + xx as usize]
                }
            };
            if m > nb(-ox, -oy) && m >= nb(ox, oy) {
                thin[i] = m;
            }
        }
    }

    let max = thin.iter().cloned().fold(0.0, f64::max);
    let mut bitmap = vec![false; w * h];
    if max == 0.0 {
        return Ok(EdgeMap {
            width: w,
            height: h,
            bitmap,
        });
    }
    let weak: Vec<bool> = thin.iter().map(|&m| m > 0.0 && m / max >= t_low).collect();
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m > 0.0 && m / max >= t_high {
            bitmap[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (xx, yy) = (x + dx, y + dy);
                if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                    continue;
                }
                let j = yy as usize * w + xx as usize;
                if weak[j] && !bitmap[j] {
                    bitmap[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(EdgeMap {
        width: w,
        height: h,
        bitmap,
    })
}

/// Integer square cell used by the quadtree samplers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Cell {
    x: usize,
    y: usize,
    side: usize,
}

impl Cell {
    fn quadrants(self) -> [Cell; 4] {
        let half = self.side / 2;
        [(0, 0), (half, 0), (0, half), (half, half)].map(|(dx, dy)| Cell {
            x: self.x + dx,
            y: self.y + dy,
            side: half,
        })
    }

    fn to_patch(self, r: usize) -> Patch {
        Patch::new(self.x as f64, self.y as f64, self.side as f64 / r as f64)
    }
}

fn cells_to_set(image: ImageSpec, r: usize, mut cells: Vec<Cell>) -> Result<PatchSet> {
    cells.sort_by_key(|c| (c.y, c.x));
    PatchSet::new(image, r, cells.into_iter().map(|c| c.to_patch(r)).collect())
}

fn coarse_cells(image: &ImageSpec, side: usize) -> Vec<Cell> {
    (0..image.height / side)
        .flat_map(|j| {
            (0..image.width / side).map(move |i| Cell {
                x: i * side,
                y: j * side,
                side,
            })
        })
        .collect()
}

/// Token counts reachable by quad splits from `initial` cells down to cells
/// of side `finest`.
fn reachable_counts(initial: usize, image: &ImageSpec, finest: usize) -> (usize, usize) {
    let max = (image.width / finest) * (image.height / finest);
    (initial, max)
}

fn check_target(target: usize, initial: usize, max: usize) -> Result<()> {
    if target < initial || target > max || (target - initial) % 3 != 0 {
        return Err(Error::invalid(format!(
            "token count {target} is unreachable; reachable counts are {initial}, {}, {}, ..., {max}",
            initial + 3,
            initial + 6
        )));
    }
    Ok(())
}

/// Validate the quadtree and return the finest reachable cell side. A cell
/// splits only when its side is even and the halves keep `min_side`, so at
/// 224 px with 112-px cells and `min_side` 8 the finest cells are 14 px.
fn check_quadtree(image: &ImageSpec, initial_side: usize, min_side: usize) -> Result<usize> {
    if min_side == 0 || initial_side < min_side {
        return Err(Error::invalid(format!(
            "cell sides {initial_side} / {min_side} are invalid"
        )));
    }
    if image.width % initial_side != 0 || image.height % initial_side != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} image is not divisible into {initial_side}-px cells",
            image.width, image.height
        )));
    }
    let mut finest = initial_side;
    while finest % 2 == 0 && finest / 2 >= min_side {
        finest /= 2;
    }
    Ok(finest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentralParams {
    /// Scale of the starting grid; `None` picks the largest of 4, 2, 1 that
    /// tiles the image.
    #[serde(default)]
    pub coarse_scale: Option<usize>,
    /// Smallest allowed scale.
    #[serde(default = "half")]
    pub min_scale: f64,
}

fn half() -> f64 {
    0.5
}

impl Default for CentralParams {
    fn default() -> Self {
        Self {
            coarse_scale: None,
            min_scale: 0.5,
        }
    }
}

fn default_coarse_scale(image: &ImageSpec, r: usize) -> usize {
    [4, 2, 1]
        .into_iter()
        .find(|&c| image.width % (r * c) == 0 && image.height % (r * c) == 0)
        .unwrap_or(1)
}

/// CENTRAL: repeatedly quarter the cell nearest the image centre.
///
/// Cells are split level by level: among splittable cells the largest goes
/// first, then the one whose centre is nearest the image centre, then
/// row-major. The uniform `s = 1` grid is therefore reached exactly at the
/// native token count, fewer tokens leave coarse cells at the periphery and
/// more tokens put finer cells at the centre.
pub fn central_sampling(
    image: ImageSpec,
    r: usize,
    target: usize,
    params: &CentralParams,
) -> Result<PatchSet> {
    let coarse = params
        .coarse_scale
        .unwrap_or_else(|| default_coarse_scale(&image, r));
    let initial_side = r * coarse;
    let min_side_f = r as f64 * params.min_scale;
    if min_side_f.fract() != 0.0 || min_side_f < 1.0 {
        return Err(Error::invalid(format!(
            "minimum scale {} gives a non-integer cell side",
            params.min_scale
        )));
    }
    let min_side = min_side_f as usize;
    let finest = check_quadtree(&image, initial_side, min_side)?;
    let mut cells = coarse_cells(&image, initial_side);
    let (initial, max) = reachable_counts(cells.len(), &image, finest);
    check_target(target, initial, max)?;

    let (cx, cy) = (image.width as f64 / 2.0, image.height as f64 / 2.0);
    let dist2 = |c: &Cell| {
        let half = c.side as f64 / 2.0;
        let (dx, dy) = (c.x as f64 + half - cx, c.y as f64 + half - cy);
        dx * dx + dy * dy
    };
    while cells.len() < target {
        let pick = cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.side > finest)
            .min_by(|(_, a), (_, b)| {
                b.side
                    .cmp(&a.side)
                    .then(dist2(a).total_cmp(&dist2(b)))
                    .then((a.y, a.x).cmp(&(b.y, b.x)))
            })
            .map(|(i, _)| i)
            .expect("target checked against reachable counts");
        let cell = cells.swap_remove(pick);
        cells.extend(cell.quadrants());
    }
    cells_to_set(image, r, cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeParams {
    /// Side of the starting cells; defaults to half the image side.
    #[serde(default)]
    pub initial_side: Option<usize>,
    /// Smallest cell side; defaults to `r / 2`.
    #[serde(default)]
    pub min_side: Option<usize>,
    #[serde(default)]
    pub canny: CannyParams,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self {
            initial_side: None,
            min_side: None,
            canny: CannyParams::default(),
        }
    }
}

impl EdgeParams {
    pub fn resolve(&self, image: &ImageSpec, r: usize) -> (usize, usize) {
        (
            self.initial_side
                .unwrap_or(image.width.min(image.height) / 2),
            self.min_side.unwrap_or((r / 2).max(1)),
        )
    }
}

/// EDGE: quarter the cells with the most edge pixels first.
///
/// The list is kept in descending edge-sum order. Each step takes the first
/// cell that can still be split, splits it, and inserts the quadrants
/// (row-major) after every existing entry with an equal or higher sum.
pub fn edge_sampling(img: &Image, r: usize, target: usize, params: &EdgeParams) -> Result<PatchSet> {
    let edges = canny(img, &params.canny)?;
    edge_sampling_with_map(img.spec, &edges, r, target, params)
}

pub fn edge_sampling_with_map(
    image: ImageSpec,
    edges: &EdgeMap,
    r: usize,
    target: usize,
    params: &EdgeParams,
) -> Result<PatchSet> {
    let (initial_side, min_side) = params.resolve(&image, r);
    let finest = check_quadtree(&image, initial_side, min_side)?;
    let start = coarse_cells(&image, initial_side);
    let (initial, max) = reachable_counts(start.len(), &image, finest);
    check_target(target, initial, max)?;

    let mut list: Vec<(Cell, u64)> = start
        .into_iter()
        .map(|c| (c, edges.sum_square(c.x, c.y, c.side)))
        .collect();
    list.sort_by(|a, b| b.1.cmp(&a.1));
    while list.len() < target {
        let pos = list
            .iter()
            .position(|(c, _)| c.side > finest)
            .ok_or_else(|| Error::invalid("no splittable cells remain"))?;
        let (cell, _) = list.remove(pos);
        for q in cell.quadrants() {
            let score = edges.sum_square(q.x, q.y, q.side);
            let at = list.partition_point(|(_, s)| *s >= score);
            list.insert(at, (q, score));
        }
    }
    cells_to_set(image, r, list.into_iter().map(|(c, _)| c).collect())
}

/// How a patch set is chosen for an image before any perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sampler", rename_all = "lowercase")]
pub enum Sampler {
    Grid,
    Density {
        n: usize,
    },
    Central {
        tokens: usize,
        #[serde(default)]
        params: CentralParams,
    },
    Edge {
        tokens: usize,
        #[serde(default)]
        params: EdgeParams,
    },
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::Grid
    }
}

impl Sampler {
    pub fn name(&self) -> &'static str {
        match self {
            Sampler::Grid => "grid",
            Sampler::Density { .. } => "density",
            Sampler::Central { .. } => "central",
            Sampler::Edge { .. } => "edge",
        }
    }

    pub fn sample(&self, img: &Image, r: usize) -> Result<PatchSet> {
        match self {
            Sampler::Grid => make_grid(img.spec, r),
            Sampler::Density { n } => make_density_grid(img.spec, r, *n),
            Sampler::Central { tokens, params } => central_sampling(img.spec, r, *tokens, params),
            Sampler::Edge { tokens, params } => edge_sampling(img, r, *tokens, params),
        }
    }

    /// Same strategy retargeted to a token budget. Density grids need a
    /// square count.
    pub fn with_tokens(&self, tokens: usize) -> Result<Sampler> {
        Ok(match self {
            Sampler::Grid | Sampler::Density { .. } => {
                let n = (tokens as f64).sqrt().round() as usize;
                if n * n != tokens {
                    return Err(Error::invalid(format!(
                        "grid token count {tokens} is not a perfect square"
                    )));
                }
                Sampler::Density { n }
            }
            Sampler::Central { params, .. } => Sampler::Central {
                tokens,
                params: *params,
            },
            Sampler::Edge { params, .. } => Sampler::Edge {
                tokens,
                params: *params,
            },
        })
    }
}
