//! Elastic input sampling for vision transformers.
//!
//! Patches are described by a continuous `(x, y, s)` triple instead of a fixed
//! grid slot. Perturbation operators edit those triples, and a four-corner
//! sinusoidal encoding lets a transformer consume them. On top of that sit
//! the adaptive samplers, the elastic augmentations and a small CPU vision
//! transformer with hand-written gradients. The sweep harness measures how
//! accuracy responds to each perturbation.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and runs sequentially otherwise. Results are
//! identical in both modes.

pub mod augment;
pub mod bench;
pub mod data;
pub mod encoding;
pub mod error;
pub mod extract;
pub mod geometry;
pub mod model;
pub mod par;
pub mod perturb;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};
pub use geometry::{ImageSpec, Patch, PatchSet};
pub use rng::Rng;
