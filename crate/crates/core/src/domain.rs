//! Core value types: latent grids, patch grids, keep masks and pruning configuration.
//!
//! A [`LatentGrid`] is a dense `(T, H, W, C)` tensor stored frame-major, row-major,
//! channels innermost. [`patchify`] groups `(pt, ph, pw)` blocks of it into patch
//! vectors; channels are never split. Inside a patch vector the element order is
//! time, then row, then column, then channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `(T, H, W, C)` tensor of video latents or pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl LatentGrid {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("all dims must be >= 1, got {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {dims:?} ({len})",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        Self::new(dims, vec![0.0; dims.iter().product()])
    }

    /// Builds a grid by evaluating `f(t, y, x, c)` at every element.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for t in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    for c in 0..dims[3] {
                        data.push(f(t, y, x, c));
                    }
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn frames(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.dims[1] + y) * self.dims[2] + x) * self.dims[3] + c
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(t, y, x, c)]
    }
}

/// Per-axis patch extent over (time, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchDims {
    pub pt: usize,
    pub ph: usize,
    pub pw: usize,
}

impl PatchDims {
    pub fn new(pt: usize, ph: usize, pw: usize) -> Result<Self> {
        if pt == 0 || ph == 0 || pw == 0 {
            return Err(Error::Invalid(format!("patch dims must be positive, got ({pt}, {ph}, {pw})")));
        }
        Ok(Self { pt, ph, pw })
    }

    pub fn unit() -> Self {
        Self { pt: 1, ph: 1, pw: 1 }
    }

    pub fn volume(&self) -> usize {
        self.pt * self.ph * self.pw
    }
}

impl Default for PatchDims {
    fn default() -> Self {
        Self { pt: 2, ph: 2, pw: 2 }
    }
}

impl std::str::FromStr for PatchDims {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("patch dims '{s}': {e}")))?;
        match parts.as_slice() {
            [t, h, w] => Self::new(*t, *h, *w),
            _ => Err(Error::Invalid(format!("patch dims '{s}' must be t,h,w"))),
        }
    }
}

/// Grid of patch vectors indexed `(t, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    patch_dims: PatchDims,
    channels: usize,
    /// (frames, rows, cols) at patch resolution
    grid: [usize; 3],
    data: Vec<f32>,
}

impl PatchGrid {
    pub fn new(patch_dims: PatchDims, channels: usize, grid: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if channels == 0 || grid.iter().any(|&g| g == 0) {
            return Err(Error::Shape(format!("empty patch grid {grid:?} with {channels} channels")));
        }
        let expect = grid.iter().product::<usize>() * patch_dims.volume() * channels;
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "patch data length {} does not match {expect}",
                data.len()
            )));
        }
        Ok(Self {
            patch_dims,
            channels,
            grid,
            data,
        })
    }

    pub fn patch_dims(&self) -> PatchDims {
        self.patch_dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(frames, rows, cols)` at patch resolution.
    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn frames(&self) -> usize {
        self.grid[0]
    }

    pub fn locations(&self) -> usize {
        self.grid[1] * self.grid[2]
    }

    pub fn patch_len(&self) -> usize {
        self.patch_dims.volume() * self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn offset(&self, t: usize, y: usize, x: usize) -> usize {
        ((t * self.grid[1] + y) * self.grid[2] + x) * self.patch_len()
    }

    #[inline]
    pub fn patch(&self, t: usize, y: usize, x: usize) -> &[f32] {
        let o = self.offset(t, y, x);
        &self.data[o..o + self.patch_len()]
    }

    #[inline]
    pub fn patch_mut(&mut self, t: usize, y: usize, x: usize) -> &mut [f32] {
        let o = self.offset(t, y, x);
        let n = self.patch_len();
        &mut self.data[o..o + n]
    }

    /// New grid holding the listed frames, in the given order.
    pub fn select_frames(&self, frames: &[usize]) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Invalid("frame selection is empty".into()));
        }
        let frame_len = self.locations() * self.patch_len();
        let mut data = Vec::with_capacity(frames.len() * frame_len);
        for &t in frames {
            if t >= self.frames() {
                return Err(Error::Shape(format!("frame {t} out of range {}", self.frames())));
            }
            data.extend_from_slice(&self.data[t * frame_len..(t + 1) * frame_len]);
        }
        Self::new(
            self.patch_dims,
            self.channels,
            [frames.len(), self.grid[1], self.grid[2]],
            data,
        )
    }

    /// Swaps the row and column axes of the patch grid (patch contents untouched).
    pub fn transpose_spatial(&self) -> Self {
        let [tp, hp, wp] = self.grid;
        let n = self.patch_len();
        let mut data = vec![0.0; self.data.len()];
        for t in 0..tp {
            for y in 0..hp {
                for x in 0..wp {
                    let dst = ((t * wp + x) * hp + y) * n;
                    data[dst..dst + n].copy_from_slice(self.patch(t, y, x));
                }
            }
        }
        Self {
            patch_dims: self.patch_dims,
            channels: self.channels,
            grid: [tp, wp, hp],
            data,
        }
    }
}

/// Splits a latent grid into patches of `patch_dims`.
pub fn patchify(grid: &LatentGrid, patch_dims: PatchDims) -> Result<PatchGrid> {
    let [t, h, w, c] = grid.dims();
    for (axis, extent, patch) in [
        ("time", t, patch_dims.pt),
        ("height", h, patch_dims.ph),
        ("width", w, patch_dims.pw),
    ] {
        if extent % patch != 0 {
            return Err(Error::PatchDivisibility { axis, extent, patch });
        }
    }
    let PatchDims { pt, ph, pw } = patch_dims;
    let shape = [t / pt, h / ph, w / pw];
    let mut data = Vec::with_capacity(grid.data().len());
    for bt in 0..shape[0] {
        for by in 0..shape[1] {
            for bx in 0..shape[2] {
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let i = grid.index(bt * pt + dt, by * ph + dy, bx * pw + dx, 0);
                            data.extend_from_slice(&grid.data()[i..i + c]);
                        }
                    }
                }
            }
        }
    }
    PatchGrid::new(patch_dims, c, shape, data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &PatchGrid) -> Result<LatentGrid> {
    let PatchDims { pt, ph, pw } = patches.patch_dims();
    let [tp, hp, wp] = patches.grid();
    let c = patches.channels();
    let dims = [tp * pt, hp * ph, wp * pw, c];
    let mut data = vec![0.0f32; dims.iter().product()];
    for bt in 0..tp {
        for by in 0..hp {
            for bx in 0..wp {
                let patch = patches.patch(bt, by, bx);
                let mut k = 0;
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let i = (((bt * pt + dt) * dims[1] + by * ph + dy) * dims[2] + bx * pw + dx) * c;
                            data[i..i + c].copy_from_slice(&patch[k..k + c]);
                            k += c;
                        }
                    }
                }
            }
        }
    }
    LatentGrid::new(dims, data)
}

/// Boolean keep mask at patch resolution; `true` keeps the token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeepMaskSequence {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl KeepMaskSequence {
    /// Mask from raw values. Frame 0 must be all-true.
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        let mask = Self::new_unchecked(dims, data)?;
        if !mask.frame(0).iter().all(|&b| b) {
            return Err(Error::FirstFrameNotKept);
        }
        Ok(mask)
    }

    /// Mask without the frame-0 check, used for intermediate stages and for
    /// validating external input with a dedicated error.
    pub fn new_unchecked(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("mask dims must be >= 1, got {dims:?}")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "mask length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn all_true(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![true; dims.iter().product()],
        }
    }

    /// Keeps frame 0 and nothing else.
    pub fn first_frame_only(dims: [usize; 3]) -> Self {
        let per = dims[1] * dims[2];
        let data = (0..dims.iter().product::<usize>()).map(|i| i < per).collect();
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn frames(&self) -> usize {
        self.dims[0]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize) -> bool {
        self.data[(t * self.dims[1] + y) * self.dims[2] + x]
    }

    #[inline]
    pub fn set(&mut self, t: usize, y: usize, x: usize, keep: bool) {
        let i = (t * self.dims[1] + y) * self.dims[2] + x;
        self.data[i] = keep;
    }

    pub fn frame(&self, t: usize) -> &[bool] {
        let per = self.dims[1] * self.dims[2];
        &self.data[t * per..(t + 1) * per]
    }

    pub fn kept_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn matches(&self, patches: &PatchGrid) -> bool {
        self.dims == patches.grid()
    }
}

/// Thresholds, block size and smoothing parameters for latent inter-frame pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    /// Short-term (consecutive frame) threshold.
    pub tau1: f64,
    /// Long-term threshold against the block-anchored frame.
    pub tau2: f64,
    /// Denoising block size in patch frames.
    pub block_size: usize,
    pub patch_dims: PatchDims,
    pub gaussian_extent: usize,
    pub gaussian_sigma: f64,
    pub median_extent: usize,
    pub closing_extent: usize,
    pub dilation_extent: usize,
    pub dilation_iterations: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            tau1: 0.15,
            tau2: 0.3,
            block_size: 3,
            patch_dims: PatchDims::default(),
            gaussian_extent: 3,
            gaussian_sigma: 1.0,
            median_extent: 3,
            closing_extent: 3,
            dilation_extent: 3,
            dilation_iterations: 1,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 >= 0.0) || !(self.tau2 >= 0.0) {
            return Err(Error::Invalid(format!(
                "thresholds must be >= 0, got tau1={} tau2={}",
                self.tau1, self.tau2
            )));
        }
        if self.block_size == 0 {
            return Err(Error::Invalid("block size must be >= 1".into()));
        }
        for (name, e) in [
            ("gaussian", self.gaussian_extent),
            ("median", self.median_extent),
            ("closing", self.closing_extent),
            ("dilation", self.dilation_extent),
        ] {
            if e == 0 || e % 2 == 0 {
                return Err(Error::Invalid(format!("{name} extent must be odd and >= 1, got {e}")));
            }
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::Invalid("gaussian sigma must be > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: [usize; 4]) -> LatentGrid {
        let n: usize = dims.iter().product();
        LatentGrid::new(dims, (0..n).map(|i| i as f32 * 0.25 - 3.0).collect()).unwrap()
    }

    #[test]
    fn patchify_shape() {
        let p = patchify(&ramp([4, 4, 4, 2]), PatchDims::default()).unwrap();
        assert_eq!(p.grid(), [2, 2, 2]);
        assert_eq!(p.patch_len(), 16);
    }

    #[test]
    fn unit_patch_is_identity_layout() {
        let g = ramp([3, 2, 5, 3]);
        let p = patchify(&g, PatchDims::unit()).unwrap();
        assert_eq!(p.data(), g.data());
        assert_eq!(p.patch(1, 1, 4), &g.data()[g.index(1, 1, 4, 0)..g.index(1, 1, 4, 0) + 3]);
    }

    #[test]
    fn indivisible_time_axis_is_named() {
        let err = patchify(&ramp([3, 4, 4, 2]), PatchDims::default()).unwrap_err();
        match err {
            Error::PatchDivisibility { axis, .. } => assert_eq!(axis, "time"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn patch_order_is_time_row_col_channel() {
        let g = LatentGrid::from_fn([2, 2, 2, 2], |t, y, x, c| (t * 1000 + y * 100 + x * 10 + c) as f32).unwrap();
        let p = patchify(&g, PatchDims::default()).unwrap();
        let expect: Vec<f32> = [0, 1, 10, 11, 100, 101, 110, 111, 1000, 1001, 1010, 1011, 1100, 1101, 1110, 1111]
            .iter()
            .map(|&v| v as f32)
            .collect();
        assert_eq!(p.patch(0, 0, 0), expect.as_slice());
    }

    #[test]
    fn single_patch_roundtrip() {
        let g = ramp([1, 1, 1, 4]);
        let back = unpatchify(&patchify(&g, PatchDims::unit()).unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn random_grid_roundtrip_is_bit_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let dims = [6, 8, 8, 4];
        let data = (0..dims.iter().product::<usize>()).map(|_| rng.random::<f32>() * 10.0 - 5.0).collect();
        let g = LatentGrid::new(dims, data).unwrap();
        let back = unpatchify(&patchify(&g, PatchDims::default()).unwrap()).unwrap();
        assert!(g.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(LatentGrid::new([0, 1, 1, 1], vec![]).is_err());
        assert!(LatentGrid::new([1, 1, 1, 2], vec![1.0]).is_err());
        assert!(LatentGrid::new([1, 1, 1, 1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn mask_requires_first_frame() {
        let mut data = vec![true; 2 * 2 * 2];
        data[1] = false;
        assert!(matches!(KeepMaskSequence::new([2, 2, 2], data), Err(Error::FirstFrameNotKept)));
    }

    #[test]
    fn config_validation() {
        assert!(PruneConfig::default().validate().is_ok());
        let bad = PruneConfig {
            median_extent: 2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PruneConfig {
            tau1: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patch_dims_parse() {
        assert_eq!("2,2,2".parse::<PatchDims>().unwrap(), PatchDims::default());
        assert!("2,2".parse::<PatchDims>().is_err());
        assert!("0,1,1".parse::<PatchDims>().is_err());
    }

    proptest! {
        #[test]
        fn patchify_is_bijective(
            (pt, ph, pw) in (1usize..3, 1usize..3, 1usize..4),
            (nt, nh, nw, c) in (1usize..4, 1usize..4, 1usize..3, 1usize..4),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let dims = [nt * pt, nh * ph, nw * pw, c];
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = (0..dims.iter().product::<usize>()).map(|_| rng.random::<f32>()).collect();
            let g = LatentGrid::new(dims, data).unwrap();
            let pd = PatchDims::new(pt, ph, pw).unwrap();
            let p = patchify(&g, pd).unwrap();
            prop_assert_eq!(p.grid(), [nt, nh, nw]);
            prop_assert_eq!(unpatchify(&p).unwrap(), g.clone());

            // patch L1 against a nested-loop block sum
            for bt in 0..nt { for by in 0..nh { for bx in 0..nw {
                let l1: f64 = p.patch(bt, by, bx).iter().map(|v| v.abs() as f64).sum();
                let mut oracle = 0.0f64;
                for t in bt * pt..(bt + 1) * pt { for y in by * ph..(by + 1) * ph {
                    for x in bx * pw..(bx + 1) * pw { for ch in 0..c {
                        oracle += g.get(t, y, x, ch).abs() as f64;
                    }}
                }}
                prop_assert!((l1 - oracle).abs() <= 1e-9 * oracle.max(1.0));
            }}}
        }
    }
}
