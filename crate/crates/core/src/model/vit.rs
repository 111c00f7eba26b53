use crate::augment::SoftLabel;
use crate::error::{Error, Result};
use crate::extract::Token;
use crate::rng::{mix64, Rng};

use super::tensor::{add_row, col_sum_into, gemm, Scalar, View, ViewMut};
use super::{Gradients, ModelConfig, ModelParams};

const LN_EPS: f64 = 1e-6;

/// Token pixels (`n x r r C`) and encodings (`n x D`) in model precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<T> {
    pub n: usize,
    pub pixels: Vec<T>,
    pub encodings: Vec<T>,
}

impl<T: Scalar> ModelInput<T> {
    pub fn from_tokens(tokens: &[Token], config: &ModelConfig) -> Result<Self> {
        let (p, d) = (config.token_len(), config.dim);
        let mut pixels = Vec::with_capacity(tokens.len() * p);
        let mut encodings = Vec::with_capacity(tokens.len() * d);
        for (i, t) in tokens.iter().enumerate() {
            if t.pixels.len() != p || t.encoding.len() != d {
                return Err(Error::Contract(format!(
                    "token {i} has {} pixels / {} encoding values, model expects {p} / {d}",
                    t.pixels.len(),
                    t.encoding.len()
                )));
            }
            pixels.extend(t.pixels.iter().map(|&v| T::of(v)));
            encodings.extend(t.encoding.iter().map(|&v| T::of(v)));
        }
        Ok(Self {
            n: tokens.len(),
            pixels,
            encodings,
        })
    }
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    a1: Vec<T>,
    qkv: Vec<T>,
    /// Softmax probabilities per head, `H x T x T`.
    probs: Vec<T>,
    /// Inverted-dropout multipliers on `probs` (0 or `1 / (1 - p)`).
    attn_mask: Option<Vec<T>>,
    o: Vec<T>,
    ln2: LnCache<T>,
    a2: Vec<T>,
    m1: Vec<T>,
    mlp_mask: Option<Vec<T>>,
    g: Vec<T>,
}

/// Activations saved by [`forward`] for [`backward`].
pub struct Cache<T> {
    config: ModelConfig,
    stamp: u64,
    n: usize,
    pixels: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    norm: LnCache<T>,
    z: Vec<T>,
}

impl<T> Cache<T> {
    pub fn tokens(&self) -> usize {
        self.n
    }
}

/// Cheap fingerprint of the parameters, used to reject stale caches.
fn stamp<T: Scalar>(params: &ModelParams<T>) -> u64 {
    let mut h = 0u64;
    for (_, t) in params.tensors() {
        for v in &t.data {
            h = mix64(h ^ v.f64().to_bits());
        }
    }
    h
}

fn layer_norm<T: Scalar>(x: &[T], d: usize, g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::of(1.0 / d as f64);
    for i in 0..rows {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[i] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[i * d + j] = xh;
            y[i * d + j] = xh * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns `dx` and accumulates `dg`, `db`.
fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LnCache<T>,
    d: usize,
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let rows = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let inv_d = T::of(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..rows {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for j in 0..d {
            dg[j] = dg[j] + dyr[j] * xh[j];
            db[j] = db[j] + dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_dxh = mean_dxh + dxhat[j];
            mean_dxh_xh = mean_dxh_xh + dxhat[j] * xh[j];
        }
        mean_dxh = mean_dxh * inv_d;
        mean_dxh_xh = mean_dxh_xh * inv_d;
        let rs = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] = rs * (dxhat[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn dropout_mask<T: Scalar>(len: usize, p: f64, rng: &mut Rng) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
        .collect()
}

/// Run the network on one token sequence. With `dropout_rng`, dropout is
/// applied to attention weights and the MLP hidden layer.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    input: &ModelInput<T>,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<(Vec<T>, Cache<T>)> {
    let cfg = params.config;
    let (d, hd, heads, f, p) = (cfg.dim, cfg.head_dim(), cfg.heads, cfg.hidden(), cfg.token_len());
    let n = input.n;
    if n == 0 {
        return Err(Error::Contract("at least one token is required".into()));
    }
    if input.pixels.len() != n * p || input.encodings.len() != n * d {
        return Err(Error::Contract(format!(
            "input shape mismatch: {} pixels and {} encoding values for {n} tokens",
            input.pixels.len(),
            input.encodings.len()
        )));
    }
    let t = n + 1;
    let drop_p = if dropout_rng.is_some() { cfg.dropout } else { 0.0 };

    let mut h = vec![T::zero(); t * d];
    h[..d].copy_from_slice(&params.cls.data);
    gemm(
        T::one(),
        View::mat(&input.pixels, n, p),
        View::mat(&params.patch_w.data, p, d),
        T::zero(),
        ViewMut {
            data: &mut h,
            offset: d,
            rows: n,
            cols: d,
            rs: d,
            cs: 1,
        },
    );
    for (row, pe) in h[d..].chunks_exact_mut(d).zip(input.encodings.chunks_exact(d)) {
        for j in 0..d {
            row[j] = row[j] + params.patch_b.data[j] + pe[j];
        }
    }

    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut blocks = Vec::with_capacity(cfg.depth);
    for bp in &params.blocks {
        let (a1, ln1) = layer_norm(&h, d, &bp.ln1_g.data, &bp.ln1_b.data);
        let mut qkv = vec![T::zero(); t * 3 * d];
        gemm(
            T::one(),
            View::mat(&a1, t, d),
            View::mat(&bp.qkv_w.data, d, 3 * d),
            T::zero(),
            ViewMut::mat(&mut qkv, t, 3 * d),
        );
        add_row(&mut qkv, &bp.qkv_b.data);

        let mut probs = vec![T::zero(); heads * t * t];
        for hh in 0..heads {
            let s = &mut probs[hh * t * t..(hh + 1) * t * t];
            let q = View::cols(&qkv, t, 3 * d, hh * hd, hd);
            let k = View::cols(&qkv, t, 3 * d, d + hh * hd, hd);
            gemm(scale, q, k.t(), T::zero(), ViewMut::mat(s, t, t));
            for row in s.chunks_exact_mut(t) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|v| *v = *v * inv);
            }
        }
        let attn_mask = match dropout_rng.as_deref_mut() {
            Some(rng) if drop_p > 0.0 => Some(dropout_mask::<T>(probs.len(), drop_p, rng)),
            _ => None,
        };
        let used: std::borrow::Cow<'_, [T]> = match &attn_mask {
            Some(m) => probs.iter().zip(m).map(|(a, b)| *a * *b).collect(),
            None => std::borrow::Cow::Borrowed(&probs),
        };

        let mut o = vec![T::zero(); t * d];
        for hh in 0..heads {
            let pa = View::mat(&used[hh * t * t..(hh + 1) * t * t], t, t);
            let v = View::cols(&qkv, t, 3 * d, 2 * d + hh * hd, hd);
            gemm(T::one(), pa, v, T::zero(), ViewMut::cols(&mut o, t, d, hh * hd, hd));
        }
        drop(used);
        // h += o @ proj_w + proj_b
        gemm(
            T::one(),
            View::mat(&o, t, d),
            View::mat(&bp.proj_w.data, d, d),
            T::one(),
            ViewMut::mat(&mut h, t, d),
        );
        add_row(&mut h, &bp.proj_b.data);

        let (a2, ln2) = layer_norm(&h, d, &bp.ln2_g.data, &bp.ln2_b.data);
        let mut m1 = vec![T::zero(); t * f];
        gemm(
            T::one(),
            View::mat(&a2, t, d),
            View::mat(&bp.fc1_w.data, d, f),
            T::zero(),
            ViewMut::mat(&mut m1, t, f),
        );
        add_row(&mut m1, &bp.fc1_b.data);
        let mut g: Vec<T> = m1.iter().map(|&v| gelu(v)).collect();
        let mlp_mask = match dropout_rng.as_deref_mut() {
            Some(rng) if drop_p > 0.0 => {
                let m = dropout_mask::<T>(g.len(), drop_p, rng);
                g.iter_mut().zip(&m).for_each(|(v, k)| *v = *v * *k);
                Some(m)
            }
            _ => None,
        };
        gemm(
            T::one(),
            View::mat(&g, t, f),
            View::mat(&bp.fc2_w.data, f, d),
            T::one(),
            ViewMut::mat(&mut h, t, d),
        );
        add_row(&mut h, &bp.fc2_b.data);

        blocks.push(BlockCache {
            ln1,
            a1,
            qkv,
            probs,
            attn_mask,
            o,
            ln2,
            a2,
            m1,
            mlp_mask,
            g,
        });
    }

    let (z, norm) = layer_norm(&h[..d], d, &params.norm_g.data, &params.norm_b.data);
    let mut logits = params.head_b.data.clone();
    gemm(
        T::one(),
        View::mat(&z, 1, d),
        View::mat(&params.head_w.data, d, cfg.classes),
        T::one(),
        ViewMut::mat(&mut logits, 1, cfg.classes),
    );
    let cache = Cache {
        config: cfg,
        stamp: stamp(params),
        n,
        pixels: input.pixels.clone(),
        blocks,
        norm,
        z,
    };
    Ok((logits, cache))
}

/// Analytic gradients of `sum(d_logits * logits)` with respect to every
/// parameter.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &Cache<T>,
    d_logits: &[T],
) -> Result<Gradients<T>> {
    let cfg = params.config;
    if cache.config != cfg || cache.stamp != stamp(params) {
        return Err(Error::Contract(
            "cache was produced with different parameters".into(),
        ));
    }
    if d_logits.len() != cfg.classes {
        return Err(Error::Contract(format!(
            "expected {} logit gradients, got {}",
            cfg.classes,
            d_logits.len()
        )));
    }
    let (d, hd, heads, f, p) = (cfg.dim, cfg.head_dim(), cfg.heads, cfg.hidden(), cfg.token_len());
    let n = cache.n;
    let t = n + 1;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut grads = params.zeros_like();

    // head
    gemm(
        T::one(),
        View::mat(&cache.z, d, 1),
        View::mat(d_logits, 1, cfg.classes),
        T::zero(),
        ViewMut::mat(&mut grads.head_w.data, d, cfg.classes),
    );
    grads.head_b.data.copy_from_slice(d_logits);
    let mut dz = vec![T::zero(); d];
    gemm(
        T::one(),
        View::mat(&params.head_w.data, d, cfg.classes),
        View::mat(d_logits, cfg.classes, 1),
        T::zero(),
        ViewMut::mat(&mut dz, d, 1),
    );
    let dcls = layer_norm_backward(
        &dz,
        &cache.norm,
        d,
        &params.norm_g.data,
        &mut grads.norm_g.data,
        &mut grads.norm_b.data,
    );
    let mut dh = vec![T::zero(); t * d];
    dh[..d].copy_from_slice(&dcls);

    for (li, (bp, bc)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let gb = &mut grads.blocks[li];

        // MLP branch: h += fc2(gelu(fc1(ln2(h))))
        gemm(
            T::one(),
            View::mat(&bc.g, t, f).t(),
            View::mat(&dh, t, d),
            T::zero(),
            ViewMut::mat(&mut gb.fc2_w.data, f, d),
        );
        col_sum_into(&dh, &mut gb.fc2_b.data);
        let mut dg = vec![T::zero(); t * f];
        gemm(
            T::one(),
            View::mat(&dh, t, d),
            View::mat(&bp.fc2_w.data, f, d).t(),
            T::zero(),
            ViewMut::mat(&mut dg, t, f),
        );
        if let Some(mask) = &bc.mlp_mask {
            dg.iter_mut().zip(mask).for_each(|(v, k)| *v = *v * *k);
        }
        let dm1: Vec<T> = dg
            .iter()
            .zip(&bc.m1)
            .map(|(&g, &x)| g * gelu_grad(x))
            .collect();
        gemm(
            T::one(),
            View::mat(&bc.a2, t, d).t(),
            View::mat(&dm1, t, f),
            T::zero(),
            ViewMut::mat(&mut gb.fc1_w.data, d, f),
        );
        col_sum_into(&dm1, &mut gb.fc1_b.data);
        let mut da2 = vec![T::zero(); t * d];
        gemm(
            T::one(),
            View::mat(&dm1, t, f),
            View::mat(&bp.fc1_w.data, d, f).t(),
            T::zero(),
            ViewMut::mat(&mut da2, t, d),
        );
        let dx = layer_norm_backward(
            &da2,
            &bc.ln2,
            d,
            &bp.ln2_g.data,
            &mut gb.ln2_g.data,
            &mut gb.ln2_b.data,
        );
        dh.iter_mut().zip(&dx).for_each(|(a, b)| *a = *a + *b);

        // attention branch: h += proj(attn(ln1(h)))
        gemm(
            T::one(),
            View::mat(&bc.o, t, d).t(),
            View::mat(&dh, t, d),
            T::zero(),
            ViewMut::mat(&mut gb.proj_w.data, d, d),
        );
        col_sum_into(&dh, &mut gb.proj_b.data);
        let mut d_o = vec![T::zero(); t * d];
        gemm(
            T::one(),
            View::mat(&dh, t, d),
            View::mat(&bp.proj_w.data, d, d).t(),
            T::zero(),
            ViewMut::mat(&mut d_o, t, d),
        );
        let mut dqkv = vec![T::zero(); t * 3 * d];
        let mut dp = vec![T::zero(); t * t];
        for hh in 0..heads {
            let probs = &bc.probs[hh * t * t..(hh + 1) * t * t];
            let used: std::borrow::Cow<'_, [T]> = match &bc.attn_mask {
                Some(m) => probs
                    .iter()
                    .zip(&m[hh * t * t..(hh + 1) * t * t])
                    .map(|(a, b)| *a * *b)
                    .collect(),
                None => std::borrow::Cow::Borrowed(probs),
            };
            let doh = View::cols(&d_o, t, d, hh * hd, hd);
            let v = View::cols(&bc.qkv, t, 3 * d, 2 * d + hh * hd, hd);
            // dV = P^T dO
            gemm(
                T::one(),
                View::mat(&used, t, t).t(),
                doh,
                T::zero(),
                ViewMut::cols(&mut dqkv, t, 3 * d, 2 * d + hh * hd, hd),
            );
            // dP = dO V^T
            gemm(T::one(), doh, v.t(), T::zero(), ViewMut::mat(&mut dp, t, t));
            if let Some(m) = &bc.attn_mask {
                dp.iter_mut()
                    .zip(&m[hh * t * t..(hh + 1) * t * t])
                    .for_each(|(a, b)| *a = *a * *b);
            }
            // softmax backward, in place: dS = P * (dP - rowsum(dP * P))
            for (drow, prow) in dp.chunks_exact_mut(t).zip(probs.chunks_exact(t)) {
                let dot = drow.iter().zip(prow).map(|(a, b)| *a * *b).sum::<T>();
                for (dv, &pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot);
                }
            }
            let q = View::cols(&bc.qkv, t, 3 * d, hh * hd, hd);
            let k = View::cols(&bc.qkv, t, 3 * d, d + hh * hd, hd);
            // dQ = scale dS K ; dK = scale dS^T Q
            gemm(
                scale,
                View::mat(&dp, t, t),
                k,
                T::zero(),
                ViewMut::cols(&mut dqkv, t, 3 * d, hh * hd, hd),
            );
            gemm(
                scale,
                View::mat(&dp, t, t).t(),
                q,
                T::zero(),
                ViewMut::cols(&mut dqkv, t, 3 * d, d + hh * hd, hd),
            );
        }
        gemm(
            T::one(),
            View::mat(&bc.a1, t, d).t(),
            View::mat(&dqkv, t, 3 * d),
            T::zero(),
            ViewMut::mat(&mut gb.qkv_w.data, d, 3 * d),
        );
        col_sum_into(&dqkv, &mut gb.qkv_b.data);
        let mut da1 = vec![T::zero(); t * d];
        gemm(
            T::one(),
            View::mat(&dqkv, t, 3 * d),
            View::mat(&bp.qkv_w.data, d, 3 * d).t(),
            T::zero(),
            ViewMut::mat(&mut da1, t, d),
        );
        let dx = layer_norm_backward(
            &da1,
            &bc.ln1,
            d,
            &bp.ln1_g.data,
            &mut gb.ln1_g.data,
            &mut gb.ln1_b.data,
        );
        dh.iter_mut().zip(&dx).for_each(|(a, b)| *a = *a + *b);
    }

    grads.cls.data.copy_from_slice(&dh[..d]);
    let demb = &dh[d..];
    gemm(
        T::one(),
        View::mat(&cache.pixels, n, p).t(),
        View::mat(demb, n, d),
        T::zero(),
        ViewMut::mat(&mut grads.patch_w.data, p, d),
    );
    col_sum_into(demb, &mut grads.patch_b.data);
    Ok(grads)
}

/// Cross-entropy against soft targets; the gradient is `softmax - label`.
pub fn loss_softmax_ce<T: Scalar>(logits: &[T], label: &SoftLabel) -> (f64, Vec<T>) {
    assert_eq!(logits.len(), label.classes(), "class count mismatch");
    let max = logits.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v.f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let log_sum = sum.ln();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for ((e, v), y) in exps.iter().zip(logits).zip(&label.weights) {
        let log_p = v.f64() - max - log_sum;
        if *y > 0.0 {
            loss -= y * log_p;
        }
        grad.push(T::of(e / sum - y));
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            r: 2,
            channels: 1,
            dim: 8,
            heads: 2,
            depth: 1,
            mlp_ratio: 2,
            classes: 3,
            dropout: 0.0,
            pe_base: 10_000.0,
        }
    }

    fn random_input(n: usize, cfg: &ModelConfig, rng: &mut Rng) -> ModelInput<f64> {
        ModelInput {
            n,
            pixels: (0..n * cfg.token_len()).map(|_| rng.uniform()).collect(),
            encodings: (0..n * cfg.dim).map(|_| rng.range(-1.0, 1.0)).collect(),
        }
    }

    #[test]
    fn zero_network_outputs_head_bias() {
        let cfg = config();
        let mut params = ModelParams::<f64>::init(cfg, &mut Rng::seed_from_u64(0)).unwrap();
        params.for_each_mut(|_, t| t.data.iter_mut().for_each(|v| *v = 0.0));
        params.head_b.data = vec![0.5, -1.0, 2.0];
        let input = random_input(1, &cfg, &mut Rng::seed_from_u64(1));
        let (logits, _) = forward(&params, &input, None).unwrap();
        assert_eq!(logits, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let cfg = config();
        let params = ModelParams::<f64>::init(cfg, &mut Rng::seed_from_u64(2)).unwrap();
        let input = random_input(3, &cfg, &mut Rng::seed_from_u64(3));
        let (_, cache) = forward(&params, &input, None).unwrap();
        let g = backward(&params, &cache, &[0.0; 3]).unwrap();
        assert_eq!(g, params.zeros_like());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let cfg = config();
        let mut params = ModelParams::<f64>::init(cfg, &mut Rng::seed_from_u64(4)).unwrap();
        let input = random_input(2, &cfg, &mut Rng::seed_from_u64(5));
        let (_, cache) = forward(&params, &input, None).unwrap();
        params.head_b.data[0] += 1.0;
        assert!(matches!(
            backward(&params, &cache, &[1.0, 0.0, 0.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn empty_or_misshaped_input_is_rejected() {
        let cfg = config();
        let params = ModelParams::<f64>::init(cfg, &mut Rng::seed_from_u64(6)).unwrap();
        let empty = ModelInput {
            n: 0,
            pixels: vec![],
            encodings: vec![],
        };
        assert!(forward(&params, &empty, None).is_err());
        let mut bad = random_input(2, &cfg, &mut Rng::seed_from_u64(7));
        bad.encodings.pop();
        assert!(forward(&params, &bad, None).is_err());
    }

    #[test]
    fn loss_values() {
        let (loss, grad) = loss_softmax_ce(&[0.0f64; 4], &SoftLabel::one_hot(2, 4));
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!((grad[2] + 0.75).abs() < 1e-15);
        let logits = [0.3f64, -1.2, 2.0];
        let max = 2.0f64;
        let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        let label = SoftLabel {
            weights: e.iter().map(|v| v / s).collect(),
        };
        let (_, grad) = loss_softmax_ce(&logits, &label);
        assert!(grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for x in [-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
