//! Four-corner sinusoidal encoding of continuous patch coordinates.
//!
//! Each of `x`, `y`, `x + r s`, `y + r s` (raw pixels) is encoded with the
//! interleaved sine/cosine scheme `sin(pos / base^(2i/l))`,
//! `cos(pos / base^(2i/l))` and the four vectors are concatenated, giving a
//! `4 l` vector that describes both where a patch sits and how large it is.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Patch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    /// Per-coordinate embedding length (even).
    pub l: usize,
    #[serde(default = "default_base")]
    pub base: f64,
}

fn default_base() -> f64 {
    10_000.0
}

impl EncodingConfig {
    pub fn new(l: usize) -> Result<Self> {
        Self::with_base(l, default_base())
    }

    pub fn with_base(l: usize, base: f64) -> Result<Self> {
        if l < 2 || l % 2 != 0 {
            return Err(Error::invalid(format!("encoding length {l} must be even and >= 2")));
        }
        if !(base > 0.0) {
            return Err(Error::invalid(format!("frequency base {base} must be positive")));
        }
        Ok(Self { l, base })
    }

    /// Encoding length for a model of width `d`, which must be a multiple of 8.
    pub fn for_model_dim(d: usize) -> Result<Self> {
        if d % 4 != 0 {
            return Err(Error::invalid(format!("model width {d} is not 4 * l")));
        }
        Self::new(d / 4)
    }

    pub fn dim(&self) -> usize {
        4 * self.l
    }

    fn inv_freq(&self, i: usize) -> f64 {
        self.base.powf(-((2 * i) as f64) / self.l as f64)
    }
}

/// Write the `l`-vector encoding of `pos` into `out`.
pub fn sincos_1d_into(pos: f64, cfg: &EncodingConfig, out: &mut [f64]) {
    debug_assert_eq!(out.len(), cfg.l);
    for i in 0..cfg.l / 2 {
        let (s, c) = (pos * cfg.inv_freq(i)).sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
}

pub fn sincos_1d(pos: f64, cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.l];
    sincos_1d_into(pos, cfg, &mut out);
    out
}

/// `[pe(x), pe(y), pe(x + r s), pe(y + r s)]`.
pub fn encode_patch(p: &Patch, r: usize, cfg: &EncodingConfig) -> Vec<f64> {
    let side = p.side(r);
    let l = cfg.l;
    let mut out = vec![0.0; 4 * l];
    let corners = [p.x, p.y, p.x + side, p.y + side];
    for (chunk, pos) in out.chunks_exact_mut(l).zip(corners) {
        sincos_1d_into(pos, cfg, chunk);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_position_pattern() {
        let cfg = EncodingConfig::new(8).unwrap();
        assert_eq!(sincos_1d(0.0, &cfg), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn pi_on_first_pair() {
        let cfg = EncodingConfig::new(4).unwrap();
        let v = sincos_1d(std::f64::consts::PI, &cfg);
        assert!(v[0].abs() < 1e-15);
        assert_eq!(v[1], -1.0);
    }

    #[test]
    fn scale_only_changes_lower_right_half() {
        let cfg = EncodingConfig::new(16).unwrap();
        let a = encode_patch(&Patch::new(3.5, 9.25, 1.0), 8, &cfg);
        let b = encode_patch(&Patch::new(3.5, 9.25, 1.7), 8, &cfg);
        assert_eq!(a[..32], b[..32]);
        assert_ne!(a[32..], b[32..]);
    }

    #[test]
    fn rejects_odd_length() {
        assert!(EncodingConfig::new(7).is_err());
        assert!(EncodingConfig::new(0).is_err());
        assert!(EncodingConfig::for_model_dim(30).is_err());
        assert_eq!(EncodingConfig::for_model_dim(64).unwrap().l, 16);
    }
}
