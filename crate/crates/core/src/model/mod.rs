//! A small pre-norm vision transformer that takes elastic tokens: each token
//! is an `r x r x C` pixel patch plus its four-corner positional encoding.
//!
//! Forward and backward passes are written by hand and run per sample, so a
//! sequence may have any token count. Batches fan samples out through
//! [`crate::par::Exec`] and sum gradients in sample order.

pub(crate) mod checkpoint;
mod optim;
pub mod tensor;
mod train;
mod vit;

use serde::{Deserialize, Serialize};

use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use tensor::Scalar;
pub use train::{
    batch_step, evaluate, evaluate_detailed, train, train_from, write_history, EpochStats,
    EvalReport, EvalSpec, SetTransform, TrainConfig, TrainState,
};
pub use vit::{backward, forward, loss_softmax_ce, Cache, ModelInput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub r: usize,
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_base")]
    pub pe_base: f64,
}

fn default_base() -> f64 {
    10_000.0
}

impl Default for ModelConfig {
    /// Desk-scale default: 64 px images, `r = 8`, width 64, 4 heads, depth 4.
    fn default() -> Self {
        Self {
            r: 8,
            channels: 1,
            dim: 64,
            heads: 4,
            depth: 4,
            mlp_ratio: 2,
            classes: 4,
            dropout: 0.0,
            pe_base: default_base(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r < 2 || self.channels == 0 || self.classes < 2 || self.depth == 0 {
            return Err(Error::Config(format!("invalid model config {self:?}")));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("invalid model config {self:?}")));
        }
        self.encoding()
            .map_err(|e| Error::Config(format!("width {}: {e}", self.dim)))?;
        Ok(())
    }

    /// Positional encoding whose `4 l` equals the model width.
    pub fn encoding(&self) -> Result<EncodingConfig> {
        if self.dim % 4 != 0 {
            return Err(Error::invalid(format!("width {} is not 4 * l", self.dim)));
        }
        EncodingConfig::with_base(self.dim / 4, self.pe_base)
    }

    pub fn token_len(&self) -> usize {
        self.r * self.r * self.channels
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    /// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    fn xavier(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Self {
            shape: vec![rows, cols],
            data: (0..rows * cols).map(|_| T::of(rng.range(-a, a))).collect(),
        }
    }

    fn normal(len: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            shape: vec![len],
            data: (0..len).map(|_| T::of(std * rng.normal())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub qkv_w: Tensor<T>,
    pub qkv_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

/// All trainable tensors. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub cls: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_g: Tensor<T>,
    pub norm_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

pub type Gradients<T> = ModelParams<T>;

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, f, p, c) = (config.dim, config.hidden(), config.token_len(), config.classes);
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                ln1_g: Tensor::filled(&[d], T::one()),
                ln1_b: Tensor::zeros(&[d]),
                qkv_w: Tensor::xavier(d, 3 * d, rng),
                qkv_b: Tensor::zeros(&[3 * d]),
                proj_w: Tensor::xavier(d, d, rng),
                proj_b: Tensor::zeros(&[d]),
                ln2_g: Tensor::filled(&[d], T::one()),
                ln2_b: Tensor::zeros(&[d]),
                fc1_w: Tensor::xavier(d, f, rng),
                fc1_b: Tensor::zeros(&[f]),
                fc2_w: Tensor::xavier(f, d, rng),
                fc2_b: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            config,
            patch_w: Tensor::xavier(p, d, rng),
            patch_b: Tensor::zeros(&[d]),
            cls: Tensor::normal(d, 0.02, rng),
            blocks,
            norm_g: Tensor::filled(&[d], T::one()),
            norm_b: Tensor::zeros(&[d]),
            head_w: Tensor::xavier(d, c, rng),
            head_b: Tensor::zeros(&[c]),
        })
    }

    /// Same layout with every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|_, t| t.data.iter_mut().for_each(|v| *v = T::zero()));
        out
    }

    /// Named tensors in layout order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("patch_embed.w".into(), &self.patch_w),
            ("patch_embed.b".into(), &self.patch_b),
            ("cls_token".into(), &self.cls),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in block_entries(b) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("norm.g".into(), &self.norm_g));
        out.push(("norm.b".into(), &self.norm_b));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("patch_embed.w".into(), &mut self.patch_w),
            ("patch_embed.b".into(), &mut self.patch_b),
            ("cls_token".into(), &mut self.cls),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in block_entries_mut(b) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("norm.g".into(), &mut self.norm_g));
        out.push(("norm.b".into(), &mut self.norm_b));
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for (name, t) in self.tensors_mut() {
            f(&name, t);
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors().into_iter().map(|(n, _)| n).collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor in layout order.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + *y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.for_each_mut(|_, t| t.data.iter_mut().for_each(|v| *v = *v * factor));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            cls: self.cls.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_g: b.ln1_g.cast(),
                    ln1_b: b.ln1_b.cast(),
                    qkv_w: b.qkv_w.cast(),
                    qkv_b: b.qkv_b.cast(),
                    proj_w: b.proj_w.cast(),
                    proj_b: b.proj_b.cast(),
                    ln2_g: b.ln2_g.cast(),
                    ln2_b: b.ln2_b.cast(),
                    fc1_w: b.fc1_w.cast(),
                    fc1_b: b.fc1_b.cast(),
                    fc2_w: b.fc2_w.cast(),
                    fc2_b: b.fc2_b.cast(),
                })
                .collect(),
            norm_g: self.norm_g.cast(),
            norm_b: self.norm_b.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }
}

fn block_entries<T>(b: &BlockParams<T>) -> [(&'static str, &Tensor<T>); 12] {
    [
        ("ln1.g", &b.ln1_g),
        ("ln1.b", &b.ln1_b),
        ("attn.qkv.w", &b.qkv_w),
        ("attn.qkv.b", &b.qkv_b),
        ("attn.proj.w", &b.proj_w),
        ("attn.proj.b", &b.proj_b),
        ("ln2.g", &b.ln2_g),
        ("ln2.b", &b.ln2_b),
        ("mlp.fc1.w", &b.fc1_w),
        ("mlp.fc1.b", &b.fc1_b),
        ("mlp.fc2.w", &b.fc2_w),
        ("mlp.fc2.b", &b.fc2_b),
    ]
}

fn block_entries_mut<T>(b: &mut BlockParams<T>) -> [(&'static str, &mut Tensor<T>); 12] {
    [
        ("ln1.g", &mut b.ln1_g),
        ("ln1.b", &mut b.ln1_b),
        ("attn.qkv.w", &mut b.qkv_w),
        ("attn.qkv.b", &mut b.qkv_b),
        ("attn.proj.w", &mut b.proj_w),
        ("attn.proj.b", &mut b.proj_b),
        ("ln2.g", &mut b.ln2_g),
        ("ln2.b", &mut b.ln2_b),
        ("mlp.fc1.w", &mut b.fc1_w),
        ("mlp.fc1.b", &mut b.fc1_b),
        ("mlp.fc2.w", &mut b.fc2_w),
        ("mlp.fc2.b", &mut b.fc2_b),
    ]
}
