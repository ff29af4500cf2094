//! Wall-clock latency of the pruned denoiser against the kept-token fraction.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{Position, TokenSequence};
use crate::denoiser::{ToyDenoiser, ToyDenoiserConfig};
use crate::domain::KeepMaskSequence;
use crate::error::{Error, Result};
use crate::noise::linear_fit;
use crate::redundancy::pearson;
use crate::recovery::{build_plan, expand_duplicates, Degree, KeptKv, RecoveryConfig};

/// Runs shorter than this cannot be told apart from timer noise.
const MIN_RUN_MS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub kept_fraction: f64,
    pub kept_tokens: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyCurve {
    pub samples: Vec<LatencySample>,
    pub pearson_r: f64,
    pub slope_ms: f64,
    pub intercept_ms: f64,
    /// Means never drop by more than 2% as the kept fraction grows.
    pub monotone: bool,
}

/// The 12-block, 64-dim configuration used for latency measurements.
pub fn latency_denoiser() -> ToyDenoiserConfig {
    ToyDenoiserConfig {
        n_blocks: 12,
        model_dim: 64,
        n_heads: 1,
        mlp_hidden: 128,
        threads: 1,
        ..Default::default()
    }
}

/// Splits `n` tokens into `frames` frames of a near-square location grid.
pub fn token_grid(n: usize, frames: usize) -> Result<[usize; 3]> {
    if frames == 0 || n == 0 || n % frames != 0 {
        return Err(Error::Invalid(format!("{n} tokens do not split into {frames} frames")));
    }
    let per = n / frames;
    let hp = (1..=per).filter(|h| per % h == 0 && h * h <= per).max().unwrap_or(1);
    Ok([frames, hp, per / hp])
}

/// Frame 0 plus a seeded random set of other positions, `round(f * N)` in total
/// (never fewer than frame 0).
pub fn synthetic_mask(grid: [usize; 3], fraction: f64, seed: u64) -> Result<KeepMaskSequence> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("kept fraction {fraction} outside (0, 1]")));
    }
    let per = grid[1] * grid[2];
    let n = grid[0] * per;
    let target = ((fraction * n as f64).round() as usize).clamp(per, n);
    let mut rest: Vec<usize> = (per..n).collect();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut data = vec![false; n];
    data[..per].iter_mut().for_each(|d| *d = true);
    for &i in &rest[..target - per] {
        data[i] = true;
    }
    KeepMaskSequence::new(grid, data)
}

/// One pruned forward: kept tokens as queries, keys duplicated over every
/// pruned position (m = ALL), so attention cost scales with `kept * N`.
pub struct PrunedForward {
    denoiser: ToyDenoiser,
    x: TokenSequence,
    plan: crate::recovery::RunLengthPlan,
}

impl PrunedForward {
    pub fn new(cfg: ToyDenoiserConfig, mask: &KeepMaskSequence, seed: u64) -> Result<Self> {
        let denoiser = ToyDenoiser::new(cfg, 1)?;
        let [_, hp, wp] = mask.dims();
        let m = cfg.model_dim;
        let positions: Vec<Position> = mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| (i / (hp * wp), (i / wp) % hp, i % wp))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..positions.len() * m)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect();
        Ok(Self {
            x: TokenSequence::new(positions, m, data)?,
            plan: build_plan(mask)?,
            denoiser,
        })
    }

    pub fn run(&self) -> Result<TokenSequence> {
        let cfg = RecoveryConfig {
            m: Degree::All,
            noise_aware: false,
        };
        let d = &self.denoiser;
        let hd = d.heads().head_dim;
        let out = d.forward(&self.x, &mut |_, k, v| {
            let kept = KeptKv {
                keys: k.clone(),
                values: v.clone(),
            };
            let e = expand_duplicates(&kept, &self.plan, None, &cfg, d.rotator(), hd)?;
            Ok((e.keys, e.values))
        })?;
        Ok(out.0)
    }
}

/// Times `runs` pruned forwards per kept fraction (after one discarded
/// warm-up each) and fits a line of mean latency on kept tokens.
pub fn latency_sweep(cfg: &ToyDenoiserConfig, grid: [usize; 3], fractions: &[f64], runs: usize) -> Result<LatencyCurve> {
    if fractions.len() < 5 {
        return Err(Error::Invalid(format!("need at least 5 fractions, got {}", fractions.len())));
    }
    if runs < 1 {
        return Err(Error::Invalid("runs must be >= 1".into()));
    }
    let cfg = ToyDenoiserConfig { threads: 1, ..*cfg };
    let mut forwards = Vec::with_capacity(fractions.len());
    for (i, &f) in fractions.iter().enumerate() {
        let mask = synthetic_mask(grid, f, cfg.seed ^ i as u64)?;
        let fwd = PrunedForward::new(cfg, &mask, cfg.seed)?;
        fwd.run()?;
        forwards.push((f, mask.kept_count(), fwd));
    }
    // Fractions are interleaved within each round so slow drift in machine
    // speed spreads evenly over them.
    let mut times = vec![Vec::with_capacity(runs); fractions.len()];
    for _ in 0..runs {
        for ((_, _, fwd), ts) in forwards.iter().zip(&mut times) {
            let t = Instant::now();
            std::hint::black_box(fwd.run()?);
            ts.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mut samples = Vec::with_capacity(fractions.len());
    for ((f, kept, _), mut times) in forwards.into_iter().zip(times) {
        let mean = times.iter().sum::<f64>() / runs as f64;
        if mean < MIN_RUN_MS {
            return Err(Error::TimerResolution(format!(
                "{mean:.4} ms per run at kept fraction {f}; increase the token count"
            )));
        }
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (runs.max(2) - 1) as f64;
        times.sort_by(f64::total_cmp);
        let median = if runs % 2 == 1 {
            times[runs / 2]
        } else {
            0.5 * (times[runs / 2 - 1] + times[runs / 2])
        };
        samples.push(LatencySample {
            kept_fraction: f,
            kept_tokens: kept,
            mean_ms: mean,
            std_ms: var.sqrt(),
            median_ms: median,
            runs,
        });
    }
    samples.sort_by(|a, b| a.kept_fraction.total_cmp(&b.kept_fraction));
    let xs: Vec<f64> = samples.iter().map(|s| s.kept_tokens as f64).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.mean_ms).collect();
    let (slope, intercept) = linear_fit(&xs, &ys);
    Ok(LatencyCurve {
        pearson_r: pearson(&xs, &ys)?.r,
        slope_ms: slope,
        intercept_ms: intercept,
        monotone: ys.windows(2).all(|w| w[1] >= w[0] * 0.98),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_near_square() {
        assert_eq!(token_grid(4096, 16).unwrap(), [16, 16, 16]);
        assert_eq!(token_grid(96, 4).unwrap(), [4, 4, 6]);
        assert!(token_grid(100, 16).is_err());
    }

    #[test]
    fn synthetic_mask_hits_target() {
        let g = [8, 4, 4];
        for f in [0.2, 0.5, 1.0] {
            let m = synthetic_mask(g, f, 3).unwrap();
            assert_eq!(m.kept_count(), ((f * 128.0).round() as usize).max(16));
            assert!(m.frame(0).iter().all(|&k| k));
        }
        assert_eq!(synthetic_mask(g, 0.01, 0).unwrap().kept_count(), 16);
        assert!(synthetic_mask(g, 0.0, 0).is_err());
        assert!(synthetic_mask(g, 1.5, 0).is_err());
    }

    #[test]
    fn full_fraction_runs_the_unpruned_forward() {
        let cfg = ToyDenoiserConfig {
            n_blocks: 2,
            model_dim: 16,
            n_heads: 1,
            mlp_hidden: 16,
            rope: crate::attention::RoPEConfig::for_head(16),
            ..Default::default()
        };
        let mask = synthetic_mask([4, 2, 2], 1.0, 0).unwrap();
        let fwd = PrunedForward::new(cfg, &mask, 1).unwrap();
        let a = fwd.run().unwrap();
        let b = fwd.denoiser.forward_exact(&fwd.x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_fractions_rejected() {
        let r = latency_sweep(&latency_denoiser(), [4, 2, 2], &[0.5, 1.0], 1);
        assert!(matches!(r, Err(Error::Invalid(_))));
    }
}
