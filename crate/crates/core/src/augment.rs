//! Elastic training augmentations: the training-time patch sampler,
//! PatchMix and scale-matched MixUp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{Token, TokenBatch};
use crate::geometry::{make_grid, CoverageMap, ImageSpec, Patch, PatchSet};
use crate::perturb::{e_pos, e_scale, Shake};
use crate::rng::Rng;

/// Per-class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel {
    pub weights: Vec<f64>,
}

impl SoftLabel {
    pub fn one_hot(class: usize, classes: usize) -> Self {
        let mut weights = vec![0.0; classes];
        weights[class] = 1.0;
        Self { weights }
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "label weights must be non-negative and sum to 1 (sum {sum})"
            )));
        }
        Ok(Self { weights })
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    /// `wa * a + wb * b`.
    pub fn mix(a: &SoftLabel, wa: f64, b: &SoftLabel, wb: f64) -> Result<SoftLabel> {
        if a.classes() != b.classes() {
            return Err(Error::invalid("labels have different class counts"));
        }
        Ok(SoftLabel {
            weights: a
                .weights
                .iter()
                .zip(&b.weights)
                .map(|(x, y)| wa * x + wb * y)
                .collect(),
        })
    }

    pub fn argmax(&self) -> usize {
        self.weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Which source each output token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixSource {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan {
    pub sources: Vec<MixSource>,
    pub fraction: f64,
}

impl MixPlan {
    /// Uniformly choose `round(fraction * n)` of `n` token slots for `B`.
    pub fn draw(n: usize, fraction: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::invalid(format!("mix fraction {fraction} not in [0, 1]")));
        }
        let k = (fraction * n as f64).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + rng.below(n - i);
            idx.swap(i, j);
        }
        let mut sources = vec![MixSource::A; n];
        for &i in &idx[..k] {
            sources[i] = MixSource::B;
        }
        Ok(Self { sources, fraction })
    }

    pub fn count_b(&self) -> usize {
        self.sources.iter().filter(|&&s| s == MixSource::B).count()
    }
}

/// Share of the covered area credited to source `B`. A pixel covered by
/// `ca` footprints from `A` and `cb` from `B` contributes `cb / (ca + cb)`.
/// Falls back to the token share when no footprint touches the image.
pub fn coverage_share_b(
    tokens: &[Token],
    plan: &MixPlan,
    image: &ImageSpec,
    r: usize,
) -> f64 {
    let mut cover_a = CoverageMap::zeros(image.width, image.height);
    let mut cover_b = CoverageMap::zeros(image.width, image.height);
    for (t, src) in tokens.iter().zip(&plan.sources) {
        match src {
            MixSource::A => cover_a.add_patch(&t.patch, r, image),
            MixSource::B => cover_b.add_patch(&t.patch, r, image),
        }
    }
    let mut credit = 0.0;
    let mut covered = 0usize;
    for (&ca, &cb) in cover_a.counts.iter().zip(&cover_b.counts) {
        let total = ca + cb;
        if total > 0 {
            covered += 1;
            credit += cb as f64 / total as f64;
        }
    }
    if covered == 0 {
        return if tokens.is_empty() {
            0.0
        } else {
            plan.count_b() as f64 / tokens.len() as f64
        };
    }
    credit / covered as f64
}

/// Replace a uniformly chosen subset of `a`'s tokens by `b`'s tokens in the
/// same slots and weight the labels by covered area.
///
/// `image` and `r` describe the frame both token sets are expressed in.
#[allow(clippy::too_many_arguments)]
pub fn patchmix(
    a: &TokenBatch,
    b: &TokenBatch,
    label_a: &SoftLabel,
    label_b: &SoftLabel,
    mix_fraction: f64,
    image: &ImageSpec,
    r: usize,
    rng: &mut Rng,
) -> Result<(TokenBatch, SoftLabel)> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "token counts differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let plan = MixPlan::draw(a.len(), mix_fraction, rng)?;
    let tokens: Vec<Token> = plan
        .sources
        .iter()
        .enumerate()
        .map(|(i, src)| match src {
            MixSource::A => a.tokens[i].clone(),
            MixSource::B => b.tokens[i].clone(),
        })
        .collect();
    let wb = coverage_share_b(&tokens, &plan, image, r);
    let label = SoftLabel::mix(label_a, 1.0 - wb, label_b, wb)?;
    Ok((TokenBatch::from(tokens), label))
}

/// Pixel-wise `lambda * a + (1 - lambda) * b` over scale-matched sequences.
/// Positions and encodings come from `a`.
pub fn mixup_elastic(
    a: &TokenBatch,
    b: &TokenBatch,
    label_a: &SoftLabel,
    label_b: &SoftLabel,
    lambda: f64,
) -> Result<(TokenBatch, SoftLabel)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("mixup weight {lambda} not in [0, 1]")));
    }
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "token counts differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if let Some(i) = a
        .tokens
        .iter()
        .zip(&b.tokens)
        .position(|(x, y)| x.patch.s != y.patch.s)
    {
        return Err(Error::invalid(format!(
            "patch scales differ at token {i}: {} vs {}",
            a.tokens[i].patch.s, b.tokens[i].patch.s
        )));
    }
    let mu = 1.0 - lambda;
    let tokens = a
        .tokens
        .iter()
        .zip(&b.tokens)
        .map(|(x, y)| Token {
            pixels: x
                .pixels
                .iter()
                .zip(&y.pixels)
                .map(|(p, q)| lambda * p + mu * q)
                .collect(),
            patch: x.patch,
            encoding: x.encoding.clone(),
        })
        .collect::<Vec<_>>();
    let label = SoftLabel::mix(label_a, lambda, label_b, mu)?;
    Ok((TokenBatch::from(tokens), label))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub train_scale_min: f64,
    pub train_scale_max: f64,
    /// Source resolution relative to the native image.
    pub oversample_factor: usize,
    /// Largest sampled footprint in source pixels, in units of `r`.
    pub max_patch_scale: f64,
    pub patchmix_prob: f64,
    pub mixup_prob: f64,
    pub mixup_alpha: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            train_scale_min: 1.0 / 3.0,
            train_scale_max: 1.0,
            oversample_factor: 2,
            max_patch_scale: 3.0,
            patchmix_prob: 0.3,
            mixup_prob: 0.2,
            mixup_alpha: 0.8,
        }
    }
}

impl AugmentConfig {
    pub fn source_spec(&self, native: &ImageSpec) -> Result<ImageSpec> {
        ImageSpec::new(
            native.width * self.oversample_factor,
            native.height * self.oversample_factor,
            native.channels,
        )
    }

    /// Native size of the largest sampled footprint, in units of `r`.
    pub fn source_r(&self, r: usize) -> Result<usize> {
        let rs = r as f64 * self.max_patch_scale;
        if rs.fract() != 0.0 || rs < 2.0 {
            return Err(Error::invalid(format!(
                "max_patch_scale {} gives a non-integer source patch size",
                self.max_patch_scale
            )));
        }
        Ok(rs as usize)
    }
}

/// Training patch set in the oversampled source frame: the full native
/// token count, scales `U[train_scale_min, train_scale_max]` relative to the
/// largest footprint, positions uniform with the footprint inside.
pub fn training_sampler(
    native: &ImageSpec,
    r: usize,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<PatchSet> {
    let base = source_grid(native, r, cfg)?;
    let scaled = e_scale(&base, cfg.train_scale_min, cfg.train_scale_max, rng)?;
    e_pos(&scaled, Shake::UNRESTRICTED, rng)
}

/// As [`training_sampler`] but with a given scale per token, used to build
/// the MixUp partner of an already sampled sequence.
pub fn training_sampler_with_scales(
    native: &ImageSpec,
    r: usize,
    cfg: &AugmentConfig,
    scales: &[f64],
    rng: &mut Rng,
) -> Result<PatchSet> {
    let base = source_grid(native, r, cfg)?;
    if scales.len() != base.len() {
        return Err(Error::invalid(format!(
            "expected {} scales, got {}",
            base.len(),
            scales.len()
        )));
    }
    let scaled = base.with_patches(
        base.patches
            .iter()
            .zip(scales)
            .map(|(p, &s)| Patch { s, ..*p })
            .collect(),
    );
    e_pos(&scaled, Shake::UNRESTRICTED, rng)
}

fn source_grid(native: &ImageSpec, r: usize, cfg: &AugmentConfig) -> Result<PatchSet> {
    let grid = make_grid(*native, r)?;
    let source = cfg.source_spec(native)?;
    let r_src = cfg.source_r(r)?;
    PatchSet::new(source, r_src, grid.patches)
}

/// Map a source-frame set back to native coordinates and native `r`.
pub fn to_native(set: &PatchSet, native: &ImageSpec, r: usize) -> Result<PatchSet> {
    let factor = set.image.width as f64 / native.width as f64;
    let scale = set.r as f64 / (factor * r as f64);
    let patches = set
        .patches
        .iter()
        .map(|p| Patch {
            x: p.x / factor,
            y: p.y / factor,
            s: p.s * scale,
            source: p.source,
        })
        .collect();
    PatchSet::new(*native, r, patches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncodingConfig;
    use crate::extract::{extract_tokens, Image};

    fn grid_tokens(value: f64) -> (TokenBatch, ImageSpec) {
        let spec = ImageSpec::square(32, 1).unwrap();
        let img = Image::filled(spec, value);
        let set = make_grid(spec, 8).unwrap();
        let cfg = EncodingConfig::new(4).unwrap();
        (TokenBatch::from(extract_tokens(&img, &set, &cfg)), spec)
    }

    #[test]
    fn degenerate_patchmix() {
        let (a, spec) = grid_tokens(0.1);
        let (b, _) = grid_tokens(0.9);
        let la = SoftLabel::one_hot(0, 3);
        let lb = SoftLabel::one_hot(2, 3);
        let mut rng = Rng::seed_from_u64(1);
        let (t, l) = patchmix(&a, &b, &la, &lb, 0.0, &spec, 8, &mut rng).unwrap();
        assert_eq!(t, a);
        assert_eq!(l, la);
        let (t, l) = patchmix(&a, &b, &la, &lb, 1.0, &spec, 8, &mut rng).unwrap();
        assert_eq!(t, b);
        assert_eq!(l, lb);
    }

    #[test]
    fn patchmix_on_disjoint_grid_matches_token_share() {
        let (a, spec) = grid_tokens(0.1);
        let (b, _) = grid_tokens(0.9);
        let la = SoftLabel::one_hot(0, 2);
        let lb = SoftLabel::one_hot(1, 2);
        let (t, l) = patchmix(&a, &b, &la, &lb, 0.25, &spec, 8, &mut Rng::seed_from_u64(3)).unwrap();
        assert_eq!(l.weights, vec![0.75, 0.25]);
        assert_eq!(t.tokens.iter().filter(|t| t.pixels[0] == 0.9).count(), 4);
    }

    #[test]
    fn patchmix_count_mismatch() {
        let (a, spec) = grid_tokens(0.1);
        let mut b = a.clone();
        b.tokens.pop();
        let l = SoftLabel::one_hot(0, 2);
        assert!(patchmix(&a, &b, &l, &l, 0.5, &spec, 8, &mut Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn overlapping_credit_is_fractional() {
        let spec = ImageSpec::square(8, 1).unwrap();
        let tok = |x: f64| Token {
            pixels: vec![],
            patch: Patch::new(x, 0.0, 1.0),
            encoding: vec![],
        };
        // two 8-wide footprints on an 8x8 image, B shifted by 4
        let tokens = vec![tok(0.0), tok(4.0)];
        let plan = MixPlan {
            sources: vec![MixSource::A, MixSource::B],
            fraction: 0.5,
        };
        // columns 0..4 only A, 4..8 shared => B credit 0.5 on half the area
        assert_eq!(coverage_share_b(&tokens, &plan, &spec, 8), 0.25);
    }

    #[test]
    fn mixup_blends_constants() {
        let (a, _) = grid_tokens(0.2);
        let (b, _) = grid_tokens(0.6);
        let la = SoftLabel::one_hot(0, 2);
        let lb = SoftLabel::one_hot(1, 2);
        let (t, l) = mixup_elastic(&a, &b, &la, &lb, 0.5).unwrap();
        assert!(t.tokens.iter().flat_map(|t| &t.pixels).all(|&p| p == (0.2 + 0.6) / 2.0));
        assert_eq!(l.weights, vec![0.5, 0.5]);
        let (t, l) = mixup_elastic(&a, &b, &la, &lb, 1.0).unwrap();
        assert_eq!((t, l), (a.clone(), la.clone()));
        let mut c = b.clone();
        c.tokens[3].patch.s = 2.0;
        assert!(mixup_elastic(&a, &c, &la, &lb, 0.5).is_err());
    }

    #[test]
    fn training_sampler_desk_config() {
        let native = ImageSpec::square(64, 1).unwrap();
        let cfg = AugmentConfig::default();
        let set = training_sampler(&native, 8, &cfg, &mut Rng::seed_from_u64(4)).unwrap();
        assert_eq!(set.len(), 64);
        assert_eq!(set.image.width, 128);
        assert_eq!(set.r, 24);
        for p in &set.patches {
            assert!((1.0 / 3.0..=1.0).contains(&p.s));
            assert!(p.x >= 0.0 && p.x + p.side(24) <= 128.0);
        }
        let native_set = to_native(&set, &native, 8).unwrap();
        for (p, q) in set.patches.iter().zip(&native_set.patches) {
            assert!((q.side(8) - p.side(24) / 2.0).abs() < 1e-12);
            assert!(q.x + q.side(8) <= 64.0 + 1e-9);
        }
    }

    #[test]
    fn soft_label_validation() {
        assert!(SoftLabel::new(vec![0.5, 0.5]).is_ok());
        assert!(SoftLabel::new(vec![0.7, 0.5]).is_err());
        assert!(SoftLabel::new(vec![1.5, -0.5]).is_err());
        assert_eq!(SoftLabel::new(vec![0.2, 0.8]).unwrap().argmax(), 1);
    }
}
