//! Prune, block-wise denoise with attention recovery, restore.
//!
//! Latents are patchified, pruned once, embedded, and generated block by block
//! (`block_size` patch frames at a time). Each block runs the step schedule on
//! its kept tokens, then one extra pass at zero noise whose keys and values are
//! written to a per-layer clean cache. Later blocks attend to that cache plus
//! their own tokens. Outputs are projected back to patches and forward-filled.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{Position, TokenRows, TokenSequence};
use crate::denoiser::{ToyDenoiser, ToyDenoiserConfig};
use crate::domain::{patchify, unpatchify, KeepMaskSequence, LatentGrid, PatchGrid, PruneConfig};
use crate::error::{Error, Result};
use crate::kv_cache::{CleanFrame, KvCache, KvPair};
use crate::prune::{lif_prune, prune_rate};
use crate::recovery::{build_plan, expand_duplicates, Degree, KeptKv, RecoveryConfig};
use crate::restore::{restore, PrunedPatchSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub prune: PruneConfig,
    pub denoiser: ToyDenoiserConfig,
    /// `None` runs direct pruning: kept tokens attend to kept tokens only.
    pub recovery: Option<RecoveryConfig>,
    /// Also run the unpruned baseline and report distances to it.
    pub compare_baseline: bool,
    pub noise_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            prune: PruneConfig::default(),
            denoiser: ToyDenoiserConfig::default(),
            recovery: Some(RecoveryConfig::default()),
            compare_baseline: true,
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub prune_ms: f64,
    pub denoise_ms: f64,
    pub restore_ms: f64,
    pub baseline_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub mode: String,
    pub prune_rate: f64,
    pub kept_tokens: usize,
    pub total_tokens: usize,
    pub timings: StageTimings,
    /// Relative L2 between pruned-run and baseline outputs over kept tokens.
    pub commutation_gap: Option<f64>,
    /// Relative L2 between the restored output and the baseline output.
    pub baseline_distance: Option<f64>,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Diffusion noise for one token at one step, identical across runs that
/// share `seed` regardless of which other tokens are processed.
fn token_noise(seed: u64, pos: Position, step: usize, dim: usize, out: &mut Vec<f32>) {
    let key = mix(seed ^ mix(pos.0 as u64 ^ mix(pos.1 as u64 ^ mix(pos.2 as u64 ^ mix(step as u64 + 1)))));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    for _ in 0..dim {
        let z: f64 = StandardNormal.sample(&mut rng);
        out.push(z as f32);
    }
}

fn rel_l2(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    let den: f64 = b.iter().map(|&y| (y as f64).powi(2)).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Block-wise generator over a fixed patch grid.
pub struct Generator<'a> {
    pub denoiser: &'a ToyDenoiser,
    pub grid: [usize; 3],
    pub block_size: usize,
    pub noise_seed: u64,
}

impl Generator<'_> {
    /// Output tokens (canonical order, `N x model_dim`) for the kept positions
    /// of `mask`; pruned rows are left zero.
    pub fn generate(&self, x0: &[f32], mask: &KeepMaskSequence, recovery: Option<&RecoveryConfig>) -> Result<Vec<f32>> {
        let d = self.denoiser;
        let m = d.config().model_dim;
        let [tp, hp, wp] = self.grid;
        let per = hp * wp;
        if mask.dims() != self.grid || x0.len() != tp * per * m {
            return Err(Error::Shape("tokens or mask do not match the generator grid".into()));
        }
        if self.block_size == 0 {
            return Err(Error::Invalid("block size must be >= 1".into()));
        }
        let window = d.config().window;
        let mut caches = (0..d.config().n_blocks)
            .map(|_| KvCache::new(hp, wp, window))
            .collect::<Result<Vec<_>>>()?;
        let schedule = d.config().schedule();
        let mut out = vec![0.0f32; tp * per * m];

        for bs in (0..tp).step_by(self.block_size) {
            let be = (bs + self.block_size).min(tp);
            let positions: Vec<Position> = (bs..be)
                .flat_map(|t| (0..hp).flat_map(move |y| (0..wp).map(move |x| (t, y, x))))
                .filter(|&(t, y, x)| mask.get(t, y, x))
                .collect();
            if positions.is_empty() {
                continue;
            }
            let clean: Vec<f32> = positions
                .iter()
                .flat_map(|&(t, y, x)| {
                    let i = (t * per + y * wp + x) * m;
                    x0[i..i + m].iter().copied()
                })
                .collect();

            let mut context = |layer: usize, k: &TokenRows, v: &TokenRows| {
                self.context(&caches[layer], mask, bs, be, k, v, recovery)
            };
            let mut noise = Vec::with_capacity(m);
            let noisy = |base: &[f32], s: f64, step: usize, noise: &mut Vec<f32>| -> Vec<f32> {
                let mut x = Vec::with_capacity(base.len());
                for (i, &pos) in positions.iter().enumerate() {
                    noise.clear();
                    token_noise(self.noise_seed, pos, step, m, noise);
                    for (&b, &e) in base[i * m..(i + 1) * m].iter().zip(noise.iter()) {
                        x.push(((1.0 - s) * b as f64 + s * e as f64) as f32);
                    }
                }
                x
            };
            let mut x = noisy(&clean, schedule[0], 0, &mut noise);
            let mut pred = Vec::new();
            for (step, _) in schedule.iter().enumerate() {
                let seq = TokenSequence::new(positions.clone(), m, x)?;
                pred = d.forward(&seq, &mut context)?.0.embeddings;
                x = match schedule.get(step + 1) {
                    Some(&s) => noisy(&pred, s, step + 1, &mut noise),
                    None => Vec::new(),
                };
            }
            let seq = TokenSequence::new(positions.clone(), m, pred.clone())?;
            let (_, kvs) = d.forward(&seq, &mut context)?;

            for (layer, (k, v)) in kvs.iter().enumerate() {
                for t in bs..be {
                    let mut entries: Vec<Option<KvPair>> = vec![None; per];
                    for (i, &(pt, y, x)) in k.positions.iter().enumerate() {
                        if pt == t {
                            entries[y * wp + x] = Some(KvPair {
                                k: k.row(i).to_vec(),
                                v: v.row(i).to_vec(),
                            });
                        }
                    }
                    if t > 0 {
                        for (l, e) in entries.iter_mut().enumerate() {
                            if e.is_none() {
                                *e = caches[layer].get(t - 1, l / wp, l % wp).cloned();
                            }
                        }
                    }
                    caches[layer].append(CleanFrame { t, clean: true, entries })?;
                }
            }
            for (i, &(t, y, x)) in positions.iter().enumerate() {
                let o = (t * per + y * wp + x) * m;
                out[o..o + m].copy_from_slice(&pred[i * m..(i + 1) * m]);
            }
        }
        Ok(out)
    }

    /// Rotated keys and values visible to the current block at one layer.
    #[allow(clippy::too_many_arguments)]
    fn context(
        &self,
        cache: &KvCache,
        mask: &KeepMaskSequence,
        bs: usize,
        be: usize,
        k: &TokenRows,
        v: &TokenRows,
        recovery: Option<&RecoveryConfig>,
    ) -> Result<(TokenRows, TokenRows)> {
        let d = self.denoiser;
        let hd = d.heads().head_dim;
        let [_, hp, wp] = self.grid;
        let cs = bs.saturating_sub(d.config().window);
        // Window-local keep mask; its first frame acts as the anchor.
        let keep = |t: usize, y: usize, x: usize| t == cs || mask.get(t, y, x);
        let mut kept = KeptKv {
            keys: TokenRows::with_capacity(k.width, k.len()),
            values: TokenRows::with_capacity(k.width, k.len()),
        };
        for t in cs..bs {
            for y in 0..hp {
                for x in 0..wp {
                    let use_it = match recovery {
                        Some(_) => keep(t, y, x),
                        None => mask.get(t, y, x),
                    };
                    if !use_it {
                        continue;
                    }
                    let e = cache.get(t, y, x).ok_or(Error::CacheMiss { t, y, x })?;
                    kept.keys.push((t, y, x), &e.k);
                    kept.values.push((t, y, x), &e.v);
                }
            }
        }
        for i in 0..k.len() {
            kept.keys.push(k.positions[i], k.row(i));
            kept.values.push(v.positions[i], v.row(i));
        }
        let Some(cfg) = recovery else {
            return Ok((kept.keys.rotated(d.rotator(), hd), kept.values));
        };
        let frames = be - cs;
        let mut local = Vec::with_capacity(frames * hp * wp);
        for t in cs..be {
            for y in 0..hp {
                for x in 0..wp {
                    local.push(keep(t, y, x));
                }
            }
        }
        let plan = build_plan(&KeepMaskSequence::new([frames, hp, wp], local)?)?.shifted(cs);
        let e = expand_duplicates(&kept, &plan, Some(cache), cfg, d.rotator(), hd)?;
        Ok((e.keys, e.values))
    }
}

fn mode_name(recovery: Option<&RecoveryConfig>) -> String {
    match recovery {
        None => "direct".into(),
        Some(c) if c.noise_aware => format!("noise-aware(m={})", c.m),
        Some(c) => format!("naive(m={})", c.m),
    }
}

/// Runs the pipeline with the mask computed from `latents` by `lif_prune`.
pub fn run_pipeline(latents: &LatentGrid, cfg: &PipelineConfig) -> Result<(LatentGrid, PipelineStats)> {
    let start = Instant::now();
    let patches = patchify(latents, cfg.prune.patch_dims)?;
    let mask = lif_prune(&patches, &cfg.prune)?;
    let prune_ms = start.elapsed().as_secs_f64() * 1e3;
    let (out, mut stats) = run_pipeline_with_mask(&patches, &mask, cfg)?;
    stats.timings.prune_ms = prune_ms;
    Ok((out, stats))
}

/// Runs the pipeline on already patchified latents with a given keep mask.
pub fn run_pipeline_with_mask(patches: &PatchGrid, mask: &KeepMaskSequence, cfg: &PipelineConfig) -> Result<(LatentGrid, PipelineStats)> {
    cfg.prune.validate()?;
    if !mask.matches(patches) {
        return Err(Error::Shape(format!("mask {:?} vs patch grid {:?}", mask.dims(), patches.grid())));
    }
    let denoiser = ToyDenoiser::new(cfg.denoiser, patches.patch_len())?;
    let m = cfg.denoiser.model_dim;
    let gen = Generator {
        denoiser: &denoiser,
        grid: patches.grid(),
        block_size: cfg.prune.block_size,
        noise_seed: cfg.noise_seed,
    };
    let x0 = denoiser.embed(patches.data());

    let t = Instant::now();
    let tokens = gen.generate(&x0, mask, cfg.recovery.as_ref())?;
    let denoise_ms = t.elapsed().as_secs_f64() * 1e3;

    let t = Instant::now();
    let kept_rows: Vec<f32> = mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &keep)| keep)
        .flat_map(|(i, _)| tokens[i * m..(i + 1) * m].iter().copied())
        .collect();
    let kept = PrunedPatchSet::new(mask.clone(), patches.patch_dims(), patches.channels(), denoiser.unembed(&kept_rows))?;
    let restored = unpatchify(&restore(&kept)?)?;
    let restore_ms = t.elapsed().as_secs_f64() * 1e3;

    let mut stats = PipelineStats {
        mode: mode_name(cfg.recovery.as_ref()),
        prune_rate: prune_rate(mask),
        kept_tokens: mask.kept_count(),
        total_tokens: mask.data().len(),
        timings: StageTimings {
            denoise_ms,
            restore_ms,
            ..Default::default()
        },
        commutation_gap: None,
        baseline_distance: None,
    };
    if cfg.compare_baseline {
        let t = Instant::now();
        let (baseline_tokens, baseline) = baseline_run(&gen, &x0, patches)?;
        stats.timings.baseline_ms = t.elapsed().as_secs_f64() * 1e3;
        let base_kept: Vec<f32> = mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &keep)| keep)
            .flat_map(|(i, _)| baseline_tokens[i * m..(i + 1) * m].iter().copied())
            .collect();
        stats.commutation_gap = Some(rel_l2(&kept_rows, &base_kept));
        stats.baseline_distance = Some(rel_l2(restored.data(), baseline.data()));
    }
    Ok((restored, stats))
}

fn baseline_run(gen: &Generator, x0: &[f32], patches: &PatchGrid) -> Result<(Vec<f32>, LatentGrid)> {
    let all = KeepMaskSequence::all_true(patches.grid());
    let tokens = gen.generate(x0, &all, None)?;
    let grid = PatchGrid::new(patches.patch_dims(), patches.channels(), patches.grid(), gen.denoiser.unembed(&tokens))?;
    Ok((tokens, unpatchify(&grid)?))
}

/// Unpruned pipeline output for the same configuration.
pub fn run_baseline(latents: &LatentGrid, cfg: &PipelineConfig) -> Result<LatentGrid> {
    let patches = patchify(latents, cfg.prune.patch_dims)?;
    let denoiser = ToyDenoiser::new(cfg.denoiser, patches.patch_len())?;
    let gen = Generator {
        denoiser: &denoiser,
        grid: patches.grid(),
        block_size: cfg.prune.block_size,
        noise_seed: cfg.noise_seed,
    };
    baseline_run(&gen, &denoiser.embed(patches.data()), &patches).map(|r| r.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub kept_tokens: usize,
    pub total_tokens: usize,
    /// Gap with kept keys duplicated over their pruned runs.
    pub recovered: f64,
    /// Gap with kept tokens attending to kept tokens only.
    pub direct: f64,
}

/// `|D(P(x)) - P(D(x))| / |P(D(x))|` over kept tokens for one application of
/// the denoiser to the whole sequence, with and without recovery. Duplicates
/// are sourced from the kept tokens themselves.
pub fn commutation_gap(x: &TokenSequence, mask: &KeepMaskSequence, denoiser: &ToyDenoiser, m: Degree) -> Result<GapReport> {
    let [tp, hp, wp] = mask.dims();
    let canonical = x.positions.len() == tp * hp * wp
        && x.positions.iter().enumerate().all(|(i, &p)| p == (i / (hp * wp), (i / wp) % hp, i % wp));
    if !canonical {
        return Err(Error::Shape("sequence must cover the mask grid in (t, y, x) order".into()));
    }
    let plan = build_plan(mask)?;
    let dim = x.model_dim;
    let full = denoiser.forward_exact(x)?;
    let mut pruned = TokenSequence {
        positions: Vec::with_capacity(mask.kept_count()),
        model_dim: dim,
        embeddings: Vec::with_capacity(mask.kept_count() * dim),
    };
    let mut target = Vec::with_capacity(mask.kept_count() * dim);
    for (i, &keep) in mask.data().iter().enumerate() {
        if keep {
            pruned.positions.push(x.positions[i]);
            pruned.embeddings.extend_from_slice(&x.embeddings[i * dim..(i + 1) * dim]);
            target.extend_from_slice(&full.embeddings[i * dim..(i + 1) * dim]);
        }
    }
    let cfg = RecoveryConfig { m, noise_aware: false };
    let hd = denoiser.heads().head_dim;
    let recovered = denoiser
        .forward(&pruned, &mut |_, k, v| {
            let kept = KeptKv {
                keys: k.clone(),
                values: v.clone(),
            };
            let e = expand_duplicates(&kept, &plan, None, &cfg, denoiser.rotator(), hd)?;
            Ok((e.keys, e.values))
        })?
        .0;
    let direct = denoiser.forward_exact(&pruned)?;
    Ok(GapReport {
        kept_tokens: mask.kept_count(),
        total_tokens: mask.data().len(),
        recovered: rel_l2(&recovered.embeddings, &target),
        direct: rel_l2(&direct.embeddings, &target),
    })
}

/// Embedded tokens of a patch grid in canonical order.
pub fn embed_sequence(denoiser: &ToyDenoiser, patches: &PatchGrid) -> Result<TokenSequence> {
    let [tp, hp, wp] = patches.grid();
    let positions = (0..tp)
        .flat_map(|t| (0..hp).flat_map(move |y| (0..wp).map(move |x| (t, y, x))))
        .collect();
    TokenSequence::new(positions, denoiser.config().model_dim, denoiser.embed(patches.data()))
}
