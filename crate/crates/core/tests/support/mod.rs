//! Independent oracles shared by the integration suites. Nothing here calls
//! the library routine it is used to check.

#![allow(dead_code)]

use std::path::PathBuf;

use elastic_vit::extract::Image;
use elastic_vit::{Patch, PatchSet};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
        .join(name)
}

/// Per-pixel cover counts straight from the footprint definition: pixel
/// `(px, py)` is covered iff `x <= px < x + r s` and `y <= py < y + r s`.
pub fn naive_counts(set: &PatchSet) -> Vec<u32> {
    let (w, h) = (set.image.width, set.image.height);
    let r = set.r as f64;
    let mut counts = vec![0u32; w * h];
    for p in &set.patches {
        let side = r * p.s;
        for py in 0..h {
            let fy = py as f64;
            if !(p.y <= fy && fy < p.y + side) {
                continue;
            }
            for px in 0..w {
                let fx = px as f64;
                if p.x <= fx && fx < p.x + side {
                    counts[py * w + px] += 1;
                }
            }
        }
    }
    counts
}

/// `Ok` when every pixel is covered exactly once.
pub fn check_partition(set: &PatchSet) -> Result<(), String> {
    let counts = naive_counts(set);
    match counts.iter().position(|&c| c != 1) {
        None => Ok(()),
        Some(i) => Err(format!(
            "pixel ({}, {}) covered {} times",
            i % set.image.width,
            i / set.image.width,
            counts[i]
        )),
    }
}

/// Bilinear token resampling written as a plain scalar loop with explicit
/// neighbour weights.
pub fn bilinear_oracle(img: &Image, p: &Patch, r: usize) -> Vec<f64> {
    let (w, h, ch) = (img.spec.width, img.spec.height, img.spec.channels);
    let px = |c: usize, x: i64, y: i64| -> f64 {
        let x = x.clamp(0, w as i64 - 1) as usize;
        let y = y.clamp(0, h as i64 - 1) as usize;
        img.pixels[c * w * h + y * w + x]
    };
    let mut out = Vec::with_capacity(r * r * ch);
    for c in 0..ch {
        for v in 0..r {
            for u in 0..r {
                let sx = (p.x + (u as f64 + 0.5) * p.s - 0.5).clamp(0.0, (w - 1) as f64);
                let sy = (p.y + (v as f64 + 0.5) * p.s - 0.5).clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (sx.floor() as i64, sy.floor() as i64);
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                let mut acc = 0.0;
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        acc += wx * wy * px(c, x0 + dx, y0 + dy);
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Textbook Canny on a 2-D array: luminance, truncated Gaussian with border
/// replication, 3x3 Sobel, four-direction non-maximum suppression, relative
/// double threshold and 8-connected hysteresis by repeated sweeps.
pub fn naive_canny(img: &Image, sigma: f64, t_low: f64, t_high: f64) -> Vec<bool> {
    let (w, h) = (img.spec.width as i64, img.spec.height as i64);
    let gray: Vec<f64> = if img.spec.channels == 1 {
        img.pixels.clone()
    } else {
        let n = (w * h) as usize;
        (0..n)
            .map(|i| {
                0.299 * img.pixels[i] + 0.587 * img.pixels[n + i] + 0.114 * img.pixels[2 * n + i]
            })
            .collect()
    };
    let idx = |x: i64, y: i64| (y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize;

    let rad = (4.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-rad..=rad)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let kern: Vec<f64> = raw.iter().map(|v| v / total).collect();

    let mut horiz = vec![0.0; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for k in -rad..=rad {
                acc += kern[(k + rad) as usize] * gray[idx(x + k, y)];
            }
            horiz[(y * w + x) as usize] = acc;
        }
    }
    let mut smooth = vec![0.0; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for k in -rad..=rad {
                acc += kern[(k + rad) as usize] * horiz[idx(x, y + k)];
            }
            smooth[(y * w + x) as usize] = acc;
        }
    }

    let s = |x: i64, y: i64| smooth[idx(x, y)];
    let mut gx = vec![0.0; (w * h) as usize];
    let mut gy = vec![0.0; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            gx[i] = (s(x + 1, y - 1) + 2.0 * s(x + 1, y) + s(x + 1, y + 1))
                - (s(x - 1, y - 1) + 2.0 * s(x - 1, y) + s(x - 1, y + 1));
            gy[i] = (s(x - 1, y + 1) + 2.0 * s(x, y + 1) + s(x + 1, y + 1))
                - (s(x - 1, y - 1) + 2.0 * s(x, y - 1) + s(x + 1, y - 1));
        }
    }
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let mag_at = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= w || y >= h {
            0.0
        } else {
            mag[(y * w + x) as usize]
        }
    };

    let mut thin = vec![0.0; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            if mag[i] == 0.0 {
                continue;
            }
            let mut deg = gy[i].atan2(gx[i]).to_degrees();
            while deg < 0.0 {
                deg += 180.0;
            }
            while deg >= 180.0 {
                deg -= 180.0;
            }
            let (ox, oy) = if deg < 22.5 || deg >= 157.5 {
                (1, 0)
            } else if deg < 67.5 {
                (1, 1)
            } else if deg < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            if mag[i] > mag_at(x - ox, y - oy) && mag[i] >= mag_at(x + ox, y + oy) {
                thin[i] = mag[i];
            }
        }
    }

    let peak = thin.iter().cloned().fold(0.0, f64::max);
    let mut edge = vec![false; (w * h) as usize];
    if peak == 0.0 {
        return edge;
    }
    for (e, &m) in edge.iter_mut().zip(&thin) {
        *e = m > 0.0 && m / peak >= t_high;
    }
    let weak: Vec<bool> = thin.iter().map(|&m| m > 0.0 && m / peak >= t_low).collect();
    loop {
        let mut grew = false;
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                if edge[i] || !weak[i] {
                    continue;
                }
                let touches = (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let (xx, yy) = (x + dx, y + dy);
                        xx >= 0 && yy >= 0 && xx < w && yy < h && edge[(yy * w + xx) as usize]
                    })
                });
                if touches {
                    edge[i] = true;
                    grew = true;
                }
            }
        }
        if !grew {
            return edge;
        }
    }
}

pub mod gradcheck {
    use elastic_vit::augment::SoftLabel;
    use elastic_vit::model::{
        backward, forward, loss_softmax_ce, ModelConfig, ModelInput, ModelParams,
    };
    use elastic_vit::Rng;

    /// Depth 2, width 32, two heads.
    pub fn config() -> ModelConfig {
        ModelConfig {
            r: 4,
            channels: 1,
            dim: 32,
            heads: 2,
            depth: 2,
            mlp_ratio: 2,
            classes: 3,
            dropout: 0.0,
            pe_base: 10_000.0,
        }
    }

    /// Parameters with every entry moved off its structured initial value,
    /// so zero biases and unit gains do not hide errors.
    pub fn jittered(rng: &mut Rng) -> ModelParams<f64> {
        let mut p = ModelParams::init(config(), rng).unwrap();
        p.for_each_mut(|_, t| {
            for v in &mut t.data {
                *v += 0.2 * rng.normal();
            }
        });
        p
    }

    pub fn input(n: usize, rng: &mut Rng) -> ModelInput<f64> {
        let cfg = config();
        ModelInput {
            n,
            pixels: (0..n * cfg.token_len()).map(|_| rng.uniform()).collect(),
            encodings: (0..n * cfg.dim).map(|_| rng.range(-1.0, 1.0)).collect(),
        }
    }

    fn loss(p: &ModelParams<f64>, x: &ModelInput<f64>, label: &SoftLabel) -> f64 {
        let (logits, _) = forward(p, x, None).unwrap();
        loss_softmax_ce(&logits, label).0
    }

    /// Relative error `|a - n| / max(|a|, |n|)` per tensor between analytic
    /// and central-difference gradients, with the analytic norm.
    pub fn relative_errors(seed: u64) -> Vec<(String, f64, f64)> {
        let mut rng = Rng::seed_from_u64(seed);
        let params = jittered(&mut rng);
        let x = input(5, &mut rng);
        let label = SoftLabel::new(vec![0.2, 0.5, 0.3]).unwrap();

        let (logits, cache) = forward(&params, &x, None).unwrap();
        let (_, d_logits) = loss_softmax_ce(&logits, &label);
        let grads = backward(&params, &cache, &d_logits).unwrap();

        let h = 1e-5;
        let mut probe = params.clone();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut out = Vec::new();
        for name in params.names() {
            let analytic = &grads.tensor(&name).unwrap().data;
            let mut numeric = vec![0.0; analytic.len()];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = params.tensor(&name).unwrap().data[i];
                probe.tensor_mut(&name).unwrap().data[i] = orig + h;
                let up = loss(&probe, &x, &label);
                probe.tensor_mut(&name).unwrap().data[i] = orig - h;
                let down = loss(&probe, &x, &label);
                probe.tensor_mut(&name).unwrap().data[i] = orig;
                *slot = (up - down) / (2.0 * h);
            }
            let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
            let scale = norm(analytic).max(norm(&numeric)).max(1e-12);
            out.push((name, norm(&diff) / scale, norm(analytic)));
        }
        out
    }
}
