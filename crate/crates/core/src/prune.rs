//! Latent inter-frame pruning.
//!
//! Per frame, a short-term mask compares each patch with the previous frame
//! (threshold `tau1`) and a long-term mask compares it with the frame `k` steps
//! back (threshold `tau2`), where `k` is anchored to the denoising block size.
//! A token is kept when either difference is large. The union is then passed
//! through a 3D majority median, per-frame closing and a 3D dilation.

use serde::{Deserialize, Serialize};

use crate::domain::{KeepMaskSequence, PatchGrid, PruneConfig};
use crate::error::{Error, Result};
use crate::filters;
use crate::redundancy::l1_distance;

/// Intermediate output of [`diff_mask_stage`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiffMaskStage {
    pub dims: [usize; 3],
    pub raw_diff: Vec<f64>,
    pub smoothed_diff: Vec<f64>,
    /// `true` where the smoothed diff exceeds the threshold (changed, keep).
    pub mask: Vec<bool>,
}

/// Thresholds the Gaussian-smoothed per-location L1 difference of two equally
/// shaped frame windows.
pub fn diff_mask_stage(a: &PatchGrid, b: &PatchGrid, tau: f64, cfg: &PruneConfig) -> Result<DiffMaskStage> {
    if a.grid() != b.grid() || a.patch_len() != b.patch_len() {
        return Err(Error::Shape(format!(
            "diff windows differ: {:?}x{} vs {:?}x{}",
            a.grid(),
            a.patch_len(),
            b.grid(),
            b.patch_len()
        )));
    }
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::Invalid(format!("threshold must be >= 0, got {tau}")));
    }
    let dims = a.grid();
    let mut raw = Vec::with_capacity(dims.iter().product());
    for t in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                raw.push(l1_distance(a.patch(t, y, x), b.patch(t, y, x)));
            }
        }
    }
    let smoothed = filters::gaussian_blur_3d(&raw, dims, cfg.gaussian_extent, cfg.gaussian_sigma);
    let mask = smoothed.iter().map(|&d| d > tau).collect();
    Ok(DiffMaskStage {
        dims,
        raw_diff: raw,
        smoothed_diff: smoothed,
        mask,
    })
}

pub fn diff_mask(a: &PatchGrid, b: &PatchGrid, tau: f64, cfg: &PruneConfig) -> Result<Vec<bool>> {
    diff_mask_stage(a, b, tau, cfg).map(|s| s.mask)
}

/// Long-term comparison offset for frame `t` with denoising block size `s`.
pub fn long_term_offset(t: usize, s: usize) -> usize {
    assert!(s >= 1, "block size must be >= 1");
    if t % s == 0 {
        1
    } else {
        t - s * (t / s)
    }
}

/// All intermediate masks of [`lif_prune`], each `(T, Hp, Wp)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneStages {
    pub dims: [usize; 3],
    pub short: Vec<bool>,
    pub long: Vec<bool>,
    pub combined: Vec<bool>,
    pub median: Vec<bool>,
    pub closed: Vec<bool>,
    pub dilated: Vec<bool>,
    pub short_stage: Option<DiffMaskStage>,
    pub long_stage: Option<DiffMaskStage>,
}

pub fn lif_prune_stages(patches: &PatchGrid, cfg: &PruneConfig) -> Result<PruneStages> {
    cfg.validate()?;
    let dims = patches.grid();
    let [tp, hp, wp] = dims;
    let per = hp * wp;
    let mut short = vec![true; tp * per];
    let mut long = vec![true; tp * per];

    let short_stage = if tp >= 2 {
        let later: Vec<usize> = (1..tp).collect();
        let earlier: Vec<usize> = (0..tp - 1).collect();
        let stage = diff_mask_stage(
            &patches.select_frames(&later)?,
            &patches.select_frames(&earlier)?,
            cfg.tau1,
            cfg,
        )?;
        short[per..].copy_from_slice(&stage.mask);
        Some(stage)
    } else {
        None
    };

    let (current, anchors): (Vec<usize>, Vec<usize>) = (0..tp)
        .filter_map(|t| {
            let k = long_term_offset(t, cfg.block_size);
            (t > k).then(|| (t, t - k))
        })
        .unzip();
    let long_stage = if current.is_empty() {
        None
    } else {
        let stage = diff_mask_stage(
            &patches.select_frames(&current)?,
            &patches.select_frames(&anchors)?,
            cfg.tau2,
            cfg,
        )?;
        for (i, &t) in current.iter().enumerate() {
            long[t * per..(t + 1) * per].copy_from_slice(&stage.mask[i * per..(i + 1) * per]);
        }
        Some(stage)
    };

    let combined: Vec<bool> = short.iter().zip(&long).map(|(&s, &l)| s || l).collect();
    let median = filters::median_3d(&combined, dims, cfg.median_extent);
    let closed = filters::closing_2d(&median, dims, cfg.closing_extent);
    let mut dilated = filters::dilate_3d(&closed, dims, cfg.dilation_extent, cfg.dilation_iterations);
    dilated[..per].iter_mut().for_each(|b| *b = true);

    Ok(PruneStages {
        dims,
        short,
        long,
        combined,
        median,
        closed,
        dilated,
        short_stage,
        long_stage,
    })
}

/// Computes the keep mask for a patch grid.
pub fn lif_prune(patches: &PatchGrid, cfg: &PruneConfig) -> Result<KeepMaskSequence> {
    let stages = lif_prune_stages(patches, cfg)?;
    KeepMaskSequence::new(stages.dims, stages.dilated)
}

/// Fraction of pruned (false) entries.
pub fn prune_rate(mask: &KeepMaskSequence) -> f64 {
    let total = mask.data().len();
    (total - mask.kept_count()) as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneStats {
    pub prune_rate: f64,
    pub per_frame: Vec<f64>,
    pub kept_tokens: usize,
    pub total_tokens: usize,
}

impl PruneStats {
    pub fn from_mask(mask: &KeepMaskSequence) -> Self {
        let per_frame = (0..mask.frames())
            .map(|t| {
                let f = mask.frame(t);
                f.iter().filter(|&&b| !b).count() as f64 / f.len() as f64
            })
            .collect();
        Self {
            prune_rate: prune_rate(mask),
            per_frame,
            kept_tokens: mask.kept_count(),
            total_tokens: mask.data().len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{patchify, LatentGrid, PatchDims};
    use crate::fixtures::{static_grid, FixtureSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn unit_cfg() -> PruneConfig {
        PruneConfig {
            patch_dims: PatchDims::unit(),
            ..Default::default()
        }
    }

    fn grid_from(frames: usize, h: usize, w: usize, f: impl FnMut(usize, usize, usize, usize) -> f32) -> PatchGrid {
        patchify(&LatentGrid::from_fn([frames, h, w, 1], f).unwrap(), PatchDims::unit()).unwrap()
    }

    #[test]
    fn offset_table() {
        assert_eq!(long_term_offset(6, 3), 1);
        assert_eq!(long_term_offset(7, 3), 1);
        assert_eq!(long_term_offset(8, 3), 2);
        assert_eq!(long_term_offset(0, 3), 1);
        assert_eq!(long_term_offset(5, 1), 1);
    }

    #[test]
    fn identical_windows_give_empty_mask() {
        let a = grid_from(2, 4, 4, |t, y, x, _| (t + y * x) as f32);
        assert!(diff_mask(&a, &a, 0.0, &unit_cfg()).unwrap().iter().all(|&b| !b));
    }

    #[test]
    fn infinite_threshold_keeps_nothing() {
        let a = grid_from(1, 4, 4, |_, y, x, _| (y + x) as f32 * 100.0);
        let b = grid_from(1, 4, 4, |_, _, _, _| 0.0);
        assert!(diff_mask(&a, &b, f64::INFINITY, &unit_cfg()).unwrap().iter().all(|&v| !v));
    }

    #[test]
    fn isolated_spike_spreads_by_gaussian() {
        let a = grid_from(1, 5, 5, |_, y, x, _| if (y, x) == (2, 2) { 100.0 } else { 0.0 });
        let b = grid_from(1, 5, 5, |_, _, _, _| 0.0);
        let cfg = unit_cfg();
        // direct oracle: single frame, zero temporal padding => center weight g0^3, edge g0^2 g1
        let k = filters::gaussian_kernel(3, 1.0);
        let center = 100.0 * k[1] * k[1] * k[1];
        let edge = 100.0 * k[0] * k[1] * k[1];
        let corner = 100.0 * k[0] * k[0] * k[1];
        let stage = diff_mask_stage(&a, &b, 0.0, &cfg).unwrap();
        assert!((stage.smoothed_diff[12] - center).abs() < 1e-9);
        assert!((stage.smoothed_diff[7] - edge).abs() < 1e-9);
        assert!((stage.smoothed_diff[6] - corner).abs() < 1e-9);
        let m = diff_mask(&a, &b, (center + edge) / 2.0, &cfg).unwrap();
        assert_eq!(m.iter().filter(|&&v| v).count(), 1);
        assert!(m[12]);
        let m = diff_mask(&a, &b, corner * 0.5, &cfg).unwrap();
        assert_eq!(m.iter().filter(|&&v| v).count(), 9);
    }

    #[test]
    fn mismatched_windows_error() {
        let a = grid_from(1, 4, 4, |_, _, _, _| 0.0);
        let b = grid_from(1, 4, 5, |_, _, _, _| 0.0);
        assert!(diff_mask(&a, &b, 0.1, &unit_cfg()).is_err());
    }

    #[test]
    fn constant_video_keeps_only_guarded_frames() {
        // S = 4: frames 0..=3 satisfy t <= k and are forced kept by the long-term
        // guard; dilation extends that by one frame.
        let spec = FixtureSpec {
            dims: [16, 8, 8, 1],
            patch_dims: PatchDims::unit(),
            ..Default::default()
        };
        let p = patchify(&static_grid(&spec).unwrap(), PatchDims::unit()).unwrap();
        let cfg = PruneConfig {
            block_size: 4,
            ..unit_cfg()
        };
        let m = lif_prune(&p, &cfg).unwrap();
        let kept: Vec<bool> = (0..16).map(|t| m.frame(t).iter().all(|&b| b)).collect();
        let empty: Vec<bool> = (0..16).map(|t| m.frame(t).iter().all(|&b| !b)).collect();
        for t in 0..=4 {
            assert!(kept[t], "frame {t}");
        }
        for t in 5..16 {
            assert!(empty[t], "frame {t}");
        }
    }

    #[test]
    fn zero_thresholds_keep_changing_video() {
        let p = grid_from(6, 5, 5, |t, y, x, _| (t * 3 + y + x) as f32);
        let cfg = PruneConfig {
            tau1: 0.0,
            tau2: 0.0,
            ..unit_cfg()
        };
        assert_eq!(prune_rate(&lif_prune(&p, &cfg).unwrap()), 0.0);
    }

    #[test]
    fn prune_rate_counts() {
        assert_eq!(prune_rate(&KeepMaskSequence::all_true([3, 2, 2])), 0.0);
        assert_eq!(prune_rate(&KeepMaskSequence::first_frame_only([16, 4, 4])), 15.0 / 16.0);
        let stats = PruneStats::from_mask(&KeepMaskSequence::first_frame_only([2, 2, 2]));
        assert_eq!(stats.per_frame, vec![0.0, 1.0]);
        assert_eq!(stats.kept_tokens, 4);
    }

    #[test]
    fn single_frame_video() {
        let p = grid_from(1, 3, 3, |_, _, _, _| 1.0);
        let m = lif_prune(&p, &unit_cfg()).unwrap();
        assert_eq!(m.kept_count(), 9);
    }

    fn random_video(seed: u64, t: usize, h: usize, w: usize) -> PatchGrid {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        grid_from(t, h, w, |_, _, _, _| rng.random::<f32>())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn first_frame_always_kept(seed in any::<u64>(), tau1 in 0.0f64..2.0, tau2 in 0.0f64..2.0, s in 1usize..5) {
            let p = random_video(seed, 7, 5, 6);
            let cfg = PruneConfig { tau1, tau2, block_size: s, ..unit_cfg() };
            let m = lif_prune(&p, &cfg).unwrap();
            prop_assert!(m.frame(0).iter().all(|&b| b));
        }

        #[test]
        fn raising_thresholds_never_keeps_more(
            seed in any::<u64>(),
            tau1 in 0.0f64..1.0, tau2 in 0.0f64..1.0,
            d1 in 0.0f64..0.5, d2 in 0.0f64..0.5,
            s in 1usize..4,
        ) {
            let p = random_video(seed, 8, 6, 6);
            let lo = PruneConfig { tau1, tau2, block_size: s, ..unit_cfg() };
            let hi = PruneConfig { tau1: tau1 + d1, tau2: tau2 + d2, ..lo.clone() };
            let m_lo = lif_prune(&p, &lo).unwrap();
            let m_hi = lif_prune(&p, &hi).unwrap();
            prop_assert!(prune_rate(&m_hi) >= prune_rate(&m_lo));
            for (a, b) in m_hi.data().iter().zip(m_lo.data()) {
                prop_assert!(!*a || *b, "higher thresholds kept a token the lower ones pruned");
            }
        }

        #[test]
        fn diff_mask_commutes_with_transpose(seed in any::<u64>(), tau in 0.0f64..1.5) {
            let a = random_video(seed, 3, 4, 6);
            let b = random_video(seed.wrapping_add(1), 3, 4, 6);
            let cfg = unit_cfg();
            let m = diff_mask(&a, &b, tau, &cfg).unwrap();
            let mt = diff_mask(&a.transpose_spatial(), &b.transpose_spatial(), tau, &cfg).unwrap();
            for t in 0..3 { for y in 0..4 { for x in 0..6 {
                prop_assert_eq!(m[(t * 4 + y) * 6 + x], mt[(t * 6 + x) * 4 + y]);
            }}}
        }
    }
}
