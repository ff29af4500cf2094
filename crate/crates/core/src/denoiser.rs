//! Fixed-weight toy denoiser: pre-norm blocks of causal multi-head attention
//! and a pointwise MLP, both with residual connections.
//!
//! Attention context is supplied per layer by the caller, which is how pruned
//! runs substitute recovered or direct key/value sets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{exact_attention_par, matmul, HeadConfig, RoPEConfig, Rotator, TokenRows, TokenSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDenoiserConfig {
    pub n_blocks: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub n_denoise_steps: usize,
    /// Noise level of the first step, in `(0, 1)`.
    pub initial_noise: f64,
    pub rope: RoPEConfig,
    /// Clean frames retained in the cache.
    pub window: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            model_dim: 64,
            n_heads: 4,
            mlp_hidden: 128,
            n_denoise_steps: 4,
            initial_noise: 0.4,
            rope: RoPEConfig::default(),
            window: 6,
            seed: 0,
            threads: 1,
        }
    }
}

impl ToyDenoiserConfig {
    pub fn heads(&self) -> Result<HeadConfig> {
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::Invalid(format!(
                "model_dim {} is not divisible into {} heads",
                self.model_dim, self.n_heads
            )));
        }
        HeadConfig::new(self.n_heads, self.model_dim / self.n_heads)
    }

    pub fn validate(&self) -> Result<()> {
        let heads = self.heads()?;
        self.rope.validate(heads.head_dim)?;
        if self.n_blocks == 0 || self.mlp_hidden == 0 || self.n_denoise_steps == 0 || self.window == 0 {
            return Err(Error::Invalid("blocks, mlp width, steps and window must be >= 1".into()));
        }
        if !(self.initial_noise > 0.0 && self.initial_noise < 1.0) {
            return Err(Error::Invalid(format!("initial noise {} outside (0, 1)", self.initial_noise)));
        }
        Ok(())
    }

    /// Noise level of each step: `initial * (1 - i / steps)`.
    pub fn schedule(&self) -> Vec<f64> {
        (0..self.n_denoise_steps)
            .map(|i| self.initial_noise * (1.0 - i as f64 / self.n_denoise_steps as f64))
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Layer {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    w1: Vec<f32>,
    w2: Vec<f32>,
}

/// Per-layer unrotated keys and values computed during a forward pass.
pub type LayerKv = Vec<(TokenRows, TokenRows)>;

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    cfg: ToyDenoiserConfig,
    heads: HeadConfig,
    rot: Rotator,
    layers: Vec<Layer>,
    patch_len: usize,
    /// `patch_len x model_dim`, orthonormal rows times `embed_scale`.
    embed: Vec<f32>,
    embed_scale: f32,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * s) as f32
        })
        .collect()
}

fn rms_norm(x: &[f32], dim: usize) -> Vec<f32> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(dim) {
        let ms = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / dim as f64;
        let inv = (1.0 / (ms + 1e-6).sqrt()) as f32;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

impl ToyDenoiser {
    pub fn new(cfg: ToyDenoiserConfig, patch_len: usize) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.model_dim;
        if patch_len == 0 || patch_len > m {
            return Err(Error::Invalid(format!(
                "patch length {patch_len} must be in 1..={m} for an invertible embedding"
            )));
        }
        let heads = cfg.heads()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let inv_m = 1.0 / (m as f64).sqrt();
        let inv_h = 1.0 / (cfg.mlp_hidden as f64).sqrt();
        let layers = (0..cfg.n_blocks)
            .map(|_| {
                let wq = gaussian(&mut rng, m * m, inv_m);
                // W_K = W_Q + R/2 keeps Tr(W_Q^T W_K) positive.
                let wk = wq
                    .iter()
                    .zip(gaussian(&mut rng, m * m, 0.5 * inv_m))
                    .map(|(a, b)| a + b)
                    .collect();
                Layer {
                    wq,
                    wk,
                    wv: gaussian(&mut rng, m * m, inv_m),
                    wo: gaussian(&mut rng, m * m, 0.5 * inv_m),
                    w1: gaussian(&mut rng, m * cfg.mlp_hidden, inv_m),
                    w2: gaussian(&mut rng, cfg.mlp_hidden * m, 0.5 * inv_h),
                }
            })
            .collect();

        // Gram-Schmidt on random rows gives an embedding with orthonormal rows.
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(patch_len);
        while rows.len() < patch_len {
            let mut v: Vec<f64> = gaussian(&mut rng, m, 1.0).into_iter().map(f64::from).collect();
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                rows.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        let embed_scale = (m as f64 / patch_len as f64).sqrt() as f32;
        let embed = rows.iter().flatten().map(|&v| v as f32 * embed_scale).collect();

        Ok(Self {
            rot: cfg.rope.rotator(),
            cfg,
            heads,
            layers,
            patch_len,
            embed,
            embed_scale,
        })
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.cfg
    }

    pub fn heads(&self) -> HeadConfig {
        self.heads
    }

    pub fn rotator(&self) -> &Rotator {
        &self.rot
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    /// Patch rows (`n x patch_len`) to token rows (`n x model_dim`).
    pub fn embed(&self, patches: &[f32]) -> Vec<f32> {
        matmul(patches, self.patch_len, &self.embed, self.cfg.model_dim)
    }

    /// Pseudo-inverse of [`embed`](Self::embed).
    pub fn unembed(&self, tokens: &[f32]) -> Vec<f32> {
        let m = self.cfg.model_dim;
        let p = self.patch_len;
        let s2 = self.embed_scale * self.embed_scale;
        let mut out = Vec::with_capacity(tokens.len() / m * p);
        for row in tokens.chunks_exact(m) {
            for e in self.embed.chunks_exact(m) {
                out.push(row.iter().zip(e).map(|(a, b)| a * b).sum::<f32>() / s2);
            }
        }
        out
    }

    /// Rotated keys and values of the given rows: plain self-attention context.
    pub fn self_context(&self, k: &TokenRows, v: &TokenRows) -> (TokenRows, TokenRows) {
        (k.rotated(&self.rot, self.heads.head_dim), v.clone())
    }

    /// Runs every block. `context(layer, k, v)` receives the unrotated keys and
    /// values of the input tokens and returns the rotated keys and values they
    /// attend to. Returns the output tokens and each layer's unrotated K/V.
    pub fn forward(
        &self,
        x: &TokenSequence,
        context: &mut dyn FnMut(usize, &TokenRows, &TokenRows) -> Result<(TokenRows, TokenRows)>,
    ) -> Result<(TokenSequence, LayerKv)> {
        let m = self.cfg.model_dim;
        if x.model_dim != m {
            return Err(Error::Shape(format!("tokens have dim {}, model has {m}", x.model_dim)));
        }
        let mut h = x.clone();
        let mut kvs = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let normed = TokenSequence {
                positions: h.positions.clone(),
                model_dim: m,
                embeddings: rms_norm(&h.embeddings, m),
            };
            let q = normed.project(&layer.wq, m).rotated(&self.rot, self.heads.head_dim);
            let k = normed.project(&layer.wk, m);
            let v = normed.project(&layer.wv, m);
            let (ck, cv) = context(li, &k, &v)?;
            let attn = exact_attention_par(&q, &ck, &cv, &self.heads, true, self.cfg.threads)?;
            let delta = matmul(&attn.data, m, &layer.wo, m);
            h.embeddings.iter_mut().zip(&delta).for_each(|(a, d)| *a += d);

            let normed = rms_norm(&h.embeddings, m);
            let mut hidden = matmul(&normed, m, &layer.w1, self.cfg.mlp_hidden);
            hidden.iter_mut().for_each(|a| *a = a.tanh());
            let delta = matmul(&hidden, self.cfg.mlp_hidden, &layer.w2, m);
            h.embeddings.iter_mut().zip(&delta).for_each(|(a, d)| *a += d);
            kvs.push((k, v));
        }
        Ok((h, kvs))
    }

    /// Full self-attention forward over `x` alone.
    pub fn forward_exact(&self, x: &TokenSequence) -> Result<TokenSequence> {
        self.forward(x, &mut |_, k, v| Ok(self.self_context(k, v))).map(|r| r.0)
    }
}
