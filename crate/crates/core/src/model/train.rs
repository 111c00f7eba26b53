//! Mini-batch training with elastic sampling, and evaluation under a
//! sampler plus perturbation pipeline.
//!
//! Every sample draws from its own generator derived from
//! `(seed, epoch, batch, slot)`, and batch gradients are summed in slot
//! order. A run is therefore a pure function of its seed whatever the
//! execution mode or thread count.

use std::ops::ControlFlow;
use std::path::Path;

use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::augment::{
    mixup_elastic, patchmix, to_native, training_sampler, training_sampler_with_scales,
    AugmentConfig, SoftLabel,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::extract::{extract_tokens, extract_tokens_scaled, Image, Token, TokenBatch};
use crate::geometry::{
    add_redundant_patches, block_drop, block_rescale, grid_blocks, make_grid, BlockIndex, PatchSet,
};
use crate::par::Exec;
use crate::perturb::{apply_pipeline, PerturbConfig};
use crate::rng::{hash_words, Rng};
use crate::sampling::Sampler;

use super::optim::{AdamW, AdamWConfig, LrSchedule};
use super::tensor::Scalar;
use super::vit::{backward, forward, loss_softmax_ce, ModelInput};
use super::{Gradients, ModelConfig, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Probability that a batch uses the elastic training pipeline instead
    /// of the native grid.
    pub elastic_fraction: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 2e-3,
            min_lr: 1e-5,
            warmup_steps: 100,
            weight_decay: 0.05,
            elastic_fraction: 0.0,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(Error::Config(format!(
                "learning rates lr={} min_lr={} are invalid",
                self.lr, self.min_lr
            )));
        }
        if !(0.0..=1.0).contains(&self.elastic_fraction) {
            return Err(Error::Config(format!(
                "elastic_fraction {} not in [0, 1]",
                self.elastic_fraction
            )));
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.patchmix_prob)
            || !(0.0..=1.0).contains(&a.mixup_prob)
            || a.patchmix_prob + a.mixup_prob > 1.0
        {
            return Err(Error::Config(
                "patchmix_prob and mixup_prob must be probabilities summing to at most 1".into(),
            ));
        }
        if !(a.mixup_alpha > 0.0) {
            return Err(Error::Config("mixup_alpha must be positive".into()));
        }
        Ok(())
    }

    fn schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.epochs * steps_per_epoch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    pub opt: AdamW<T>,
    pub epochs_done: usize,
    pub history: Vec<EpochStats>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: ModelConfig, train: &TrainConfig) -> Result<Self> {
        let mut rng = Rng::derive(train.seed, INIT_STREAM);
        let params = ModelParams::init(config, &mut rng)?;
        let opt = AdamW::new(
            &params,
            AdamWConfig {
                weight_decay: train.weight_decay,
                ..AdamWConfig::default()
            },
        );
        Ok(Self {
            params,
            opt,
            epochs_done: 0,
            history: Vec::new(),
        })
    }
}

const INIT_STREAM: u64 = 0x1d1d;
const SHUFFLE_STREAM: u64 = 0x5a5a;
const BATCH_STREAM: u64 = u64::MAX;

/// Tokens and target for one training example. Elastic examples draw their
/// PatchMix or MixUp partner from `batch`.
fn training_example(
    data: &Dataset,
    index: usize,
    batch: &[usize],
    elastic: bool,
    config: &ModelConfig,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Vec<Token>, SoftLabel)> {
    let sample = &data.samples[index];
    let label = SoftLabel::one_hot(sample.label, data.classes);
    let enc = config.encoding()?;
    let r = config.r;
    if !elastic {
        let grid = make_grid(sample.image.spec, r)?;
        return Ok((extract_tokens(&sample.image, &grid, &enc), label));
    }

    let aug = &cfg.augment;
    let native = sample.image.spec;
    let factor = aug.oversample_factor as f64;
    let upsample = |img: &Image| img.resize(native.width * aug.oversample_factor, native.height * aug.oversample_factor);
    let source = upsample(&sample.image)?;
    let src_set = training_sampler(&native, r, aug, rng)?;
    let set = to_native(&src_set, &native, r)?;
    let tokens = TokenBatch::from(extract_tokens_scaled(&source, factor, &set, &enc));

    let mix = rng.uniform();
    if mix >= aug.patchmix_prob + aug.mixup_prob {
        return Ok((tokens.tokens, label));
    }
    let partner = &data.samples[batch[rng.below(batch.len())]];
    let partner_label = SoftLabel::one_hot(partner.label, data.classes);
    let partner_source = upsample(&partner.image)?;
    let (mixed, mixed_label) = if mix < aug.patchmix_prob {
        let other_src = training_sampler(&native, r, aug, rng)?;
        let other = to_native(&other_src, &native, r)?;
        let b = TokenBatch::from(extract_tokens_scaled(&partner_source, factor, &other, &enc));
        let fraction = rng.uniform();
        patchmix(&tokens, &b, &label, &partner_label, fraction, &native, r, rng)?
    } else {
        let scales: Vec<f64> = src_set.patches.iter().map(|p| p.s).collect();
        let other_src = training_sampler_with_scales(&native, r, aug, &scales, rng)?;
        let other = to_native(&other_src, &native, r)?;
        let b = TokenBatch::from(extract_tokens_scaled(&partner_source, factor, &other, &enc));
        let beta = Beta::new(aug.mixup_alpha, aug.mixup_alpha)
            .map_err(|e| Error::Config(format!("mixup_alpha: {e}")))?;
        let lambda = beta.sample(rng);
        mixup_elastic(&tokens, &b, &label, &partner_label, lambda)?
    };
    Ok((mixed.tokens, mixed_label))
}

struct SampleResult<T> {
    loss: f64,
    correct: bool,
    grads: Gradients<T>,
}

struct BatchContext<'a> {
    data: &'a Dataset,
    batch: &'a [usize],
    elastic: bool,
    cfg: &'a TrainConfig,
}

fn sample_step<T: Scalar>(
    params: &ModelParams<T>,
    ctx: &BatchContext<'_>,
    index: usize,
    mut rng: Rng,
) -> Result<SampleResult<T>> {
    let (tokens, label) = training_example(
        ctx.data,
        index,
        ctx.batch,
        ctx.elastic,
        &params.config,
        ctx.cfg,
        &mut rng,
    )?;
    let input = ModelInput::from_tokens(&tokens, &params.config)?;
    let drop_rng = (params.config.dropout > 0.0).then_some(&mut rng);
    let (logits, cache) = forward(params, &input, drop_rng)?;
    let (loss, d_logits) = loss_softmax_ce(&logits, &label);
    let grads = backward(params, &cache, &d_logits)?;
    Ok(SampleResult {
        loss,
        correct: argmax(&logits) == label.argmax(),
        grads,
    })
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// One optimizer step on `indices`. The whole batch takes the elastic
/// pipeline with probability `cfg.elastic_fraction`. Returns the summed loss
/// and the number of correct argmax predictions.
pub fn batch_step<T: Scalar>(
    state: &mut TrainState<T>,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    stream: u64,
    exec: Exec,
) -> Result<(f64, usize)> {
    if indices.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let params = &state.params;
    let ctx = BatchContext {
        data,
        batch: indices,
        elastic: Rng::derive(stream, BATCH_STREAM).bernoulli(cfg.elastic_fraction),
        cfg,
    };
    let results = exec.map(indices, |slot, &index| {
        sample_step(params, &ctx, index, Rng::derive(stream, slot as u64))
    });
    let mut total = params.zeros_like();
    let (mut loss, mut correct) = (0.0, 0);
    for res in results {
        let res = res?;
        loss += res.loss;
        correct += res.correct as usize;
        total.add_assign(&res.grads);
    }
    total.scale(T::of(1.0 / indices.len() as f64));
    state.opt.step(&mut state.params, &total, lr);
    if !state.params.is_finite() {
        return Err(Error::Contract("parameters diverged to non-finite values".into()));
    }
    Ok((loss, correct))
}

/// Train a freshly initialized model for `cfg.epochs` epochs.
pub fn train<T: Scalar>(
    config: ModelConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    exec: Exec,
    on_epoch: impl FnMut(&TrainState<T>) -> ControlFlow<()>,
) -> Result<TrainState<T>> {
    let state = TrainState::new(config, cfg)?;
    train_from(state, train_set, val_set, cfg, exec, on_epoch)
}

/// Continue from `state` until `cfg.epochs` epochs are done or `on_epoch`
/// breaks. Resuming a stopped run with the same config reproduces the
/// uninterrupted run exactly.
pub fn train_from<T: Scalar>(
    mut state: TrainState<T>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&TrainState<T>) -> ControlFlow<()>,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    state.params.config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if train_set.classes != state.params.config.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            train_set.classes, state.params.config.classes
        )));
    }
    let batches = train_set.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule(batches);
    let grid = EvalSpec::default();
    // val accuracy is measured on the identity grid
    while state.epochs_done < cfg.epochs {
        let epoch = state.epochs_done;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::seed_from_u64(hash_words(&[cfg.seed, SHUFFLE_STREAM, epoch as u64]))
            .shuffle(&mut order);
        let (mut loss, mut correct) = (0.0, 0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = schedule.lr(state.opt.step as usize);
            let stream = hash_words(&[cfg.seed, epoch as u64, b as u64]);
            let (l, c) = batch_step(&mut state, train_set, chunk, cfg, lr, stream, exec)?;
            loss += l;
            correct += c;
        }
        let val_acc = match val_set {
            Some(v) => evaluate(&state.params, v, &grid, cfg.seed, exec)?,
            None => f64::NAN,
        };
        state.epochs_done += 1;
        let stats = EpochStats {
            epoch: state.epochs_done,
            loss: loss / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
        };
        state.history.push(stats);
        if on_epoch(&state).is_break() {
            break;
        }
    }
    Ok(state)
}

/// `epoch,loss,train_acc,val_acc` rows.
pub fn write_history(history: &[EpochStats], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Structural edit applied to the sampled set before perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SetTransform {
    #[default]
    None,
    /// Drop three patches from each of `blocks` random 2x2 grid blocks.
    BlockDrop { blocks: usize },
    /// Merge each of `blocks` random 2x2 grid blocks into one patch.
    BlockRescale { blocks: usize },
    /// Append `count` patches with scale `U[s_min, s_max]`.
    Redundant { count: usize, s_min: f64, s_max: f64 },
}

impl SetTransform {
    pub fn apply(&self, set: &PatchSet, rng: &mut Rng) -> Result<PatchSet> {
        match *self {
            SetTransform::None => Ok(set.clone()),
            SetTransform::BlockDrop { blocks } => {
                let mut out = set.clone();
                for b in pick_blocks(set, blocks, rng)? {
                    out = block_drop(&out, b, rng)?;
                }
                Ok(out)
            }
            SetTransform::BlockRescale { blocks } => {
                let mut out = set.clone();
                for b in pick_blocks(set, blocks, rng)? {
                    out = block_rescale(&out, b)?;
                }
                Ok(out)
            }
            SetTransform::Redundant {
                count,
                s_min,
                s_max,
            } => add_redundant_patches(set, count, s_min, s_max, rng),
        }
    }
}

fn pick_blocks(set: &PatchSet, k: usize, rng: &mut Rng) -> Result<Vec<BlockIndex>> {
    let mut all = grid_blocks(&set.image, set.r);
    if k > all.len() {
        return Err(Error::invalid(format!(
            "{k} blocks requested, the grid has {}",
            all.len()
        )));
    }
    // partial Fisher-Yates
    for i in 0..k {
        let j = i + rng.below(all.len() - i);
        all.swap(i, j);
    }
    all.truncate(k);
    Ok(all)
}

/// Inference-time patch selection and perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalSpec {
    #[serde(flatten)]
    pub sampler: Sampler,
    #[serde(default)]
    pub transform: SetTransform,
    #[serde(default)]
    pub perturb: PerturbConfig,
}

impl EvalSpec {
    pub fn new(sampler: Sampler, perturb: PerturbConfig) -> Self {
        Self {
            sampler,
            transform: SetTransform::None,
            perturb,
        }
    }

    pub fn with_transform(self, transform: SetTransform) -> Self {
        Self { transform, ..self }
    }

    /// Patch set for one image: sampler, then transform, then the
    /// perturbation pipeline, all drawing from `rng` in that order.
    pub fn patch_set(&self, img: &Image, r: usize, rng: &mut Rng) -> Result<PatchSet> {
        let set = self.sampler.sample(img, r)?;
        let set = self.transform.apply(&set, rng)?;
        apply_pipeline(&set, &self.perturb, rng)
    }

    pub fn tokens(&self, img: &Image, config: &ModelConfig, rng: &mut Rng) -> Result<Vec<Token>> {
        let set = self.patch_set(img, config.r, rng)?;
        Ok(extract_tokens(img, &set, &config.encoding()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub mean_tokens: f64,
    pub predictions: Vec<usize>,
}

/// Top-1 accuracy; sample `i` perturbs with `Rng::derive(seed, i)`.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    data: &Dataset,
    spec: &EvalSpec,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    Ok(evaluate_detailed(params, data, spec, seed, exec)?.accuracy)
}

pub fn evaluate_detailed<T: Scalar>(
    params: &ModelParams<T>,
    data: &Dataset,
    spec: &EvalSpec,
    seed: u64,
    exec: Exec,
) -> Result<EvalReport> {
    spec.perturb.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let outcomes = exec.map(&data.samples, |i, sample| -> Result<(usize, usize)> {
        let mut rng = Rng::derive(seed, i as u64);
        let tokens = spec.tokens(&sample.image, &params.config, &mut rng)?;
        let input = ModelInput::from_tokens(&tokens, &params.config)?;
        let (logits, _) = forward(params, &input, None)?;
        Ok((argmax(&logits), tokens.len()))
    });
    let mut predictions = Vec::with_capacity(data.len());
    let (mut correct, mut tokens) = (0, 0);
    for (sample, out) in data.samples.iter().zip(outcomes) {
        let (pred, n) = out?;
        correct += (pred == sample.label) as usize;
        tokens += n;
        predictions.push(pred);
    }
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        correct,
        total: data.len(),
        mean_tokens: tokens as f64 / data.len() as f64,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_shapes, DatasetSpec};
    use crate::model::{read_checkpoint, write_checkpoint, Checkpoint};

    fn go<T>(_: &T) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    fn small() -> (ModelConfig, Dataset, TrainConfig) {
        let model = ModelConfig {
            r: 8,
            channels: 1,
            dim: 16,
            heads: 2,
            depth: 1,
            mlp_ratio: 2,
            classes: 2,
            dropout: 0.1,
            pe_base: 10_000.0,
        };
        let data = synth_shapes(&DatasetSpec::new(2, 12, 32, 5)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 5,
            warmup_steps: 2,
            elastic_fraction: 0.5,
            augment: AugmentConfig {
                patchmix_prob: 0.4,
                mixup_prob: 0.4,
                ..AugmentConfig::default()
            },
            seed: 9,
            ..TrainConfig::default()
        };
        (model, data, cfg)
    }

    #[test]
    fn modes_agree_bitwise() {
        let (model, data, cfg) = small();
        let a = train::<f64>(model, &data, Some(&data), &cfg, Exec::Parallel, go).unwrap();
        let b = train::<f64>(model, &data, Some(&data), &cfg, Exec::Sequential, go).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 2);
        assert_eq!(a.opt.step, 6);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (model, data, cfg) = small();
        let full = train::<f32>(model, &data, Some(&data), &cfg, Exec::Sequential, go).unwrap();
        let stopped =
            train::<f32>(model, &data, Some(&data), &cfg, Exec::Sequential, |_| ControlFlow::Break(()))
                .unwrap();
        assert_eq!(stopped.epochs_done, 1);
        let ck = Checkpoint::with_state(&stopped.params, &stopped.opt, stopped.epochs_done);
        let ck = read_checkpoint(&write_checkpoint(&ck)).unwrap();
        let params = ck.params::<f32>().unwrap();
        let (opt, epochs_done) = ck.train_state(&params).unwrap().unwrap();
        let state = TrainState {
            params,
            opt,
            epochs_done,
            history: Vec::new(),
        };
        let resumed = train_from(state, &data, Some(&data), &cfg, Exec::Sequential, go).unwrap();
        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.opt, full.opt);
        assert_eq!(resumed.history[0], full.history[1]);
    }

    #[test]
    fn loss_decreases_on_tiny_problem() {
        let (model, data, mut cfg) = small();
        cfg.epochs = 15;
        cfg.elastic_fraction = 0.0;
        cfg.lr = 3e-3;
        let state = train::<f64>(
            ModelConfig { dropout: 0.0, ..model },
            &data,
            None,
            &cfg,
            Exec::Sequential,
            go,
        )
        .unwrap();
        let first = state.history.first().unwrap().loss;
        let last = state.history.last().unwrap().loss;
        assert!(last < first * 0.7, "loss {first} -> {last}");
    }

    #[test]
    fn evaluation_is_mode_independent() {
        let (model, data, _) = small();
        let params = ModelParams::<f64>::init(model, &mut Rng::seed_from_u64(1)).unwrap();
        let spec = EvalSpec::new(Sampler::Grid, PerturbConfig::new(0.5, 1.5, 1.0, crate::perturb::Dropout::Fraction(0.25)));
        let a = evaluate_detailed(&params, &data, &spec, 4, Exec::Parallel).unwrap();
        let b = evaluate_detailed(&params, &data, &spec, 4, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mean_tokens, 12.0);
    }

    #[test]
    fn class_mismatch_is_config_error() {
        let (model, data, cfg) = small();
        let model = ModelConfig { classes: 3, ..model };
        assert!(matches!(
            train::<f64>(model, &data, None, &cfg, Exec::Sequential, go),
            Err(Error::Config(_))
        ));
    }
}
