//! Scale, position and missing-patch perturbations.
//!
//! The pipeline is `miss ∘ pos ∘ scale`. Random draws follow a fixed order:
//! one scale per patch in index order, then `(dx, dy)` per patch in index
//! order, then the drop permutation. Any generator that reproduces the
//! [`Rng`] stream reproduces the perturbed set exactly.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::{Patch, PatchSet};
use crate::rng::Rng;

/// Maximum offset as a fraction of `r`. `f64::INFINITY` places patches
/// anywhere inside the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shake(pub f64);

impl Shake {
    pub const NONE: Shake = Shake(0.0);
    pub const UNRESTRICTED: Shake = Shake(f64::INFINITY);

    pub fn is_unrestricted(self) -> bool {
        self.0.is_infinite()
    }
}

impl Serialize for Shake {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_unrestricted() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Shake {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(q) => Ok(Shake(q)),
            Raw::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "unrestricted") => {
                Ok(Shake::UNRESTRICTED)
            }
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "shake must be a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

/// Number of patches to drop, either absolute or as a fraction of the set.
/// In JSON an integer is a count and a non-integer is a fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dropout {
    Count(usize),
    Fraction(f64),
}

impl Dropout {
    pub fn resolve(self, n: usize) -> Result<usize> {
        let d = match self {
            Dropout::Count(d) => d,
            Dropout::Fraction(f) => {
                if !(0.0..1.0).contains(&f) {
                    return Err(Error::invalid(format!("drop fraction {f} not in [0, 1)")));
                }
                (f * n as f64).round() as usize
            }
        };
        if d > 0 && d >= n {
            return Err(Error::invalid(format!("cannot drop {d} of {n} patches")));
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    #[serde(default = "one")]
    pub scale_min: f64,
    #[serde(default = "one")]
    pub scale_max: f64,
    #[serde(default = "no_shake")]
    pub shake: Shake,
    #[serde(default = "no_drop")]
    pub dropout: Dropout,
}

fn one() -> f64 {
    1.0
}
fn no_shake() -> Shake {
    Shake::NONE
}
fn no_drop() -> Dropout {
    Dropout::Count(0)
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self::identity()
    }
}

impl PerturbConfig {
    pub fn identity() -> Self {
        Self {
            scale_min: 1.0,
            scale_max: 1.0,
            shake: Shake::NONE,
            dropout: Dropout::Count(0),
        }
    }

    pub fn new(scale_min: f64, scale_max: f64, shake: f64, dropout: Dropout) -> Self {
        Self {
            scale_min,
            scale_max,
            shake: Shake(shake),
            dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_scale_range(self.scale_min, self.scale_max)?;
        if !(self.shake.0 >= 0.0) {
            return Err(Error::invalid(format!("shake {} must be >= 0", self.shake.0)));
        }
        if let Dropout::Fraction(f) = self.dropout {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::invalid(format!("drop fraction {f} not in [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        let no_drop = match self.dropout {
            Dropout::Count(d) => d == 0,
            Dropout::Fraction(f) => f == 0.0,
        };
        self.scale_min == 1.0 && self.scale_max == 1.0 && self.shake.0 == 0.0 && no_drop
    }
}

fn check_scale_range(s1: f64, s2: f64) -> Result<()> {
    if !(s1 > 0.0 && s1 <= s2 && s2.is_finite()) {
        return Err(Error::invalid(format!("scale range [{s1}, {s2}] is invalid")));
    }
    Ok(())
}

/// Draw every patch's scale independently from `U[s1, s2]`; `x`, `y` stay.
pub fn e_scale(set: &PatchSet, s1: f64, s2: f64, rng: &mut Rng) -> Result<PatchSet> {
    check_scale_range(s1, s2)?;
    let patches = set
        .patches
        .iter()
        .map(|p| Patch {
            s: rng.range(s1, s2),
            ..*p
        })
        .collect();
    Ok(set.with_patches(patches))
}

/// Shift each patch by `(dx, dy) ~ U[-r q, r q]^2`, or place it uniformly
/// inside the image when the shake is unrestricted.
pub fn e_pos(set: &PatchSet, shake: Shake, rng: &mut Rng) -> Result<PatchSet> {
    if !(shake.0 >= 0.0) {
        return Err(Error::invalid(format!("shake {} must be >= 0", shake.0)));
    }
    let (w, h) = (set.image.width as f64, set.image.height as f64);
    let r = set.r as f64;
    let patches = set
        .patches
        .iter()
        .map(|p| {
            if shake.is_unrestricted() {
                let side = r * p.s;
                let x = range_either(rng, w - side);
                let y = range_either(rng, h - side);
                Patch { x, y, ..*p }
            } else {
                let m = r * shake.0;
                let dx = rng.range(-m, m);
                let dy = rng.range(-m, m);
                Patch {
                    x: p.x + dx,
                    y: p.y + dy,
                    ..*p
                }
            }
        })
        .collect();
    Ok(set.with_patches(patches))
}

/// Uniform between 0 and `slack`, whichever sign `slack` has.
fn range_either(rng: &mut Rng, slack: f64) -> f64 {
    if slack >= 0.0 {
        rng.range(0.0, slack)
    } else {
        rng.range(slack, 0.0)
    }
}

/// Remove a uniformly random `d`-subset. Survivors keep their order.
pub fn e_miss(set: &PatchSet, d: usize, rng: &mut Rng) -> Result<PatchSet> {
    let n = set.len();
    if d > 0 && d >= n {
        return Err(Error::invalid(format!("cannot drop {d} of {n} patches")));
    }
    if d == 0 {
        return Ok(set.clone());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..d {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    let mut keep = vec![true; n];
    for &i in &idx[..d] {
        keep[i] = false;
    }
    let patches = set
        .patches
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(p, _)| *p)
        .collect();
    Ok(set.with_patches(patches))
}

/// `e_miss(e_pos(e_scale(set)))`, consuming `rng` in that order.
pub fn apply_pipeline(set: &PatchSet, cfg: &PerturbConfig, rng: &mut Rng) -> Result<PatchSet> {
    cfg.validate()?;
    let d = cfg.dropout.resolve(set.len())?;
    let scaled = e_scale(set, cfg.scale_min, cfg.scale_max, rng)?;
    let moved = e_pos(&scaled, cfg.shake, rng)?;
    e_miss(&moved, d, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{coverage_fraction, make_grid, rasterize_coverage, ImageSpec};

    fn grid224() -> PatchSet {
        make_grid(ImageSpec::square(224, 3).unwrap(), 16).unwrap()
    }

    #[test]
    fn identity_operators() {
        let g = grid224();
        let mut rng = Rng::seed_from_u64(1);
        assert_eq!(e_scale(&g, 1.0, 1.0, &mut rng).unwrap(), g);
        assert_eq!(e_pos(&g, Shake::NONE, &mut rng).unwrap(), g);
        assert_eq!(e_miss(&g, 0, &mut rng).unwrap(), g);
        assert_eq!(
            apply_pipeline(&g, &PerturbConfig::identity(), &mut rng).unwrap(),
            g
        );
    }

    #[test]
    fn doubled_scale_overlaps_but_covers() {
        let g = grid224();
        let big = e_scale(&g, 2.0, 2.0, &mut Rng::seed_from_u64(3)).unwrap();
        assert!(big.patches.iter().all(|p| p.side(16) == 32.0));
        assert_eq!(coverage_fraction(&big), 1.0);
        assert!(rasterize_coverage(&big).counts.iter().any(|&c| c > 1));
    }

    #[test]
    fn miss_half_of_grid() {
        let g = grid224();
        let out = e_miss(&g, 98, &mut Rng::seed_from_u64(8)).unwrap();
        assert_eq!(out.len(), 98);
        assert_eq!(coverage_fraction(&out), 0.5);
        assert!(e_miss(&g, 196, &mut Rng::seed_from_u64(8)).is_err());
    }

    #[test]
    fn unrestricted_shake_keeps_footprints_inside() {
        let g = grid224();
        let out = e_pos(&g, Shake::UNRESTRICTED, &mut Rng::seed_from_u64(5)).unwrap();
        for p in &out.patches {
            assert!(p.x >= 0.0 && p.x + 16.0 <= 224.0);
            assert!(p.y >= 0.0 && p.y + 16.0 <= 224.0);
        }
    }

    #[test]
    fn fraction_resolution_rounds() {
        assert_eq!(Dropout::Fraction(0.5).resolve(196).unwrap(), 98);
        assert_eq!(Dropout::Fraction(0.8).resolve(64).unwrap(), 51);
        assert!(Dropout::Fraction(1.0).resolve(64).is_err());
        assert!(Dropout::Count(64).resolve(64).is_err());
    }

    #[test]
    fn config_json_keys() {
        let cfg: PerturbConfig = serde_json::from_str(
            r#"{"scale_min":0.5,"scale_max":2,"shake":"inf","dropout":0.5}"#,
        )
        .unwrap();
        assert_eq!(cfg.scale_max, 2.0);
        assert!(cfg.shake.is_unrestricted());
        assert_eq!(cfg.dropout, Dropout::Fraction(0.5));
        let back: PerturbConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let counted: PerturbConfig = serde_json::from_str(r#"{"dropout":3}"#).unwrap();
        assert_eq!(counted.dropout, Dropout::Count(3));
        assert_eq!(counted.scale_min, 1.0);
        assert!(serde_json::from_str::<PerturbConfig>(r#"{"shake":"far"}"#).is_err());
    }

    #[test]
    fn invalid_ranges_rejected() {
        let g = grid224();
        let mut rng = Rng::seed_from_u64(0);
        assert!(e_scale(&g, 0.0, 1.0, &mut rng).is_err());
        assert!(e_scale(&g, 2.0, 1.0, &mut rng).is_err());
        assert!(e_pos(&g, Shake(-0.1), &mut rng).is_err());
    }
}
