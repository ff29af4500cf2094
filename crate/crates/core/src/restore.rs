//! Extraction of kept patches and forward-fill restoration of pruned ones.

use crate::domain::{KeepMaskSequence, PatchDims, PatchGrid};
use crate::error::{Error, Result};

/// Kept patch vectors in frame-major, row-major order of the `true` mask entries.
///
/// This ordering is the on-disk contract for kept-patch files.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedPatchSet {
    pub mask: KeepMaskSequence,
    pub patch_dims: PatchDims,
    pub channels: usize,
    /// `kept_count * patch_len` values.
    pub kept: Vec<f32>,
}

impl PrunedPatchSet {
    pub fn new(mask: KeepMaskSequence, patch_dims: PatchDims, channels: usize, kept: Vec<f32>) -> Result<Self> {
        let patch_len = patch_dims.volume() * channels;
        if patch_len == 0 || kept.len() != mask.kept_count() * patch_len {
            return Err(Error::Shape(format!(
                "{} kept values do not match {} kept tokens of length {patch_len}",
                kept.len(),
                mask.kept_count()
            )));
        }
        Ok(Self {
            mask,
            patch_dims,
            channels,
            kept,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.patch_dims.volume() * self.channels
    }

    pub fn kept_len(&self) -> usize {
        self.mask.kept_count()
    }
}

pub fn extract_kept(patches: &PatchGrid, mask: &KeepMaskSequence) -> Result<PrunedPatchSet> {
    if !mask.matches(patches) {
        return Err(Error::Shape(format!(
            "mask {:?} vs patch grid {:?}",
            mask.dims(),
            patches.grid()
        )));
    }
    let n = patches.patch_len();
    let mut kept = Vec::with_capacity(mask.kept_count() * n);
    for (i, &keep) in mask.data().iter().enumerate() {
        if keep {
            kept.extend_from_slice(&patches.data()[i * n..(i + 1) * n]);
        }
    }
    PrunedPatchSet::new(mask.clone(), patches.patch_dims(), patches.channels(), kept)
}

/// Scatters kept patches back and forward-fills every pruned position from the
/// restored value one frame earlier at the same location.
pub fn restore(pruned: &PrunedPatchSet) -> Result<PatchGrid> {
    let mask = &pruned.mask;
    if !mask.frame(0).iter().all(|&b| b) {
        return Err(Error::FirstFrameNotKept);
    }
    let [tp, hp, wp] = mask.dims();
    let n = pruned.patch_len();
    let per = hp * wp;
    let mut data = vec![0.0f32; tp * per * n];
    let mut src = pruned.kept.chunks_exact(n);
    for (i, &keep) in mask.data().iter().enumerate() {
        if keep {
            let chunk = src.next().expect("kept count checked on construction");
            data[i * n..(i + 1) * n].copy_from_slice(chunk);
        } else {
            // frame 0 is all-true, so i >= per here
            let prev = i - per;
            data.copy_within(prev * n..(prev + 1) * n, i * n);
        }
    }
    PatchGrid::new(pruned.patch_dims, pruned.channels, [tp, hp, wp], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{patchify, LatentGrid};
    use rand::{Rng, SeedableRng};

    fn random_patches(seed: u64) -> PatchGrid {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = LatentGrid::from_fn([6, 4, 4, 2], |_, _, _, _| rng.random::<f32>()).unwrap();
        patchify(&g, PatchDims::default()).unwrap()
    }

    fn random_mask(seed: u64, dims: [usize; 3]) -> KeepMaskSequence {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let per = dims[1] * dims[2];
        let data = (0..dims.iter().product::<usize>())
            .map(|i| i < per || rng.random::<f32>() < 0.4)
            .collect();
        KeepMaskSequence::new(dims, data).unwrap()
    }

    #[test]
    fn all_true_is_identity() {
        let p = random_patches(1);
        let set = extract_kept(&p, &KeepMaskSequence::all_true(p.grid())).unwrap();
        assert_eq!(set.kept, p.data());
        assert_eq!(restore(&set).unwrap(), p);
    }

    #[test]
    fn first_frame_only_extracts_frame_zero() {
        let p = random_patches(2);
        let set = extract_kept(&p, &KeepMaskSequence::first_frame_only(p.grid())).unwrap();
        let per = p.locations() * p.patch_len();
        assert_eq!(set.kept.as_slice(), &p.data()[..per]);
    }

    #[test]
    fn exact_redundancy_restores_bit_exact() {
        let g = LatentGrid::from_fn([4, 2, 2, 1], |t, y, x, _| if x == 0 { (y + 1) as f32 } else { (t * 10 + y) as f32 })
            .unwrap();
        let p = patchify(&g, PatchDims::unit()).unwrap();
        let mut mask = KeepMaskSequence::all_true(p.grid());
        for t in 1..4 {
            for y in 0..2 {
                mask.set(t, y, 0, false);
            }
        }
        assert_eq!(restore(&extract_kept(&p, &mask).unwrap()).unwrap(), p);
    }

    #[test]
    fn forward_fill_chain() {
        let p = random_patches(3);
        let mut mask = KeepMaskSequence::all_true(p.grid());
        for t in 1..3 {
            mask.set(t, 1, 0, false);
        }
        let r = restore(&extract_kept(&p, &mask).unwrap()).unwrap();
        for t in 1..3 {
            assert_eq!(r.patch(t, 1, 0), p.patch(0, 1, 0));
        }
    }

    #[test]
    fn long_pruned_run() {
        let g = LatentGrid::from_fn([5, 1, 2, 1], |t, _, x, _| (t * 2 + x) as f32).unwrap();
        let p = patchify(&g, PatchDims::unit()).unwrap();
        let mut mask = KeepMaskSequence::all_true(p.grid());
        for t in 1..5 {
            mask.set(t, 0, 1, false);
        }
        let r = restore(&extract_kept(&p, &mask).unwrap()).unwrap();
        for t in 1..5 {
            assert_eq!(r.patch(t, 0, 1), p.patch(0, 0, 1));
            assert_eq!(r.patch(t, 0, 0), p.patch(t, 0, 0));
        }
    }

    #[test]
    fn kept_positions_roundtrip_for_random_masks() {
        for seed in 0..20 {
            let p = random_patches(seed);
            let mask = random_mask(seed + 100, p.grid());
            let r = restore(&extract_kept(&p, &mask).unwrap()).unwrap();
            let [tp, hp, wp] = p.grid();
            for t in 0..tp {
                for y in 0..hp {
                    for x in 0..wp {
                        if mask.get(t, y, x) {
                            assert_eq!(r.patch(t, y, x), p.patch(t, y, x));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_missing_first_frame_and_mismatch() {
        let p = random_patches(4);
        let mut data = vec![true; p.grid().iter().product()];
        data[0] = false;
        let mask = KeepMaskSequence::new_unchecked(p.grid(), data).unwrap();
        let set = extract_kept(&p, &mask).unwrap();
        assert!(matches!(restore(&set), Err(Error::FirstFrameNotKept)));
        let other = KeepMaskSequence::all_true([1, 1, 1]);
        assert!(extract_kept(&p, &other).is_err());
    }
}
