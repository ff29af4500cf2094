//! Deterministic synthetic latents standing in for encoded videos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{LatentGrid, PatchDims};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixtureKind {
    Static,
    MovingSquare,
    Staircase,
    RedundantNoisy,
    LinearGaussianPair,
}

impl std::str::FromStr for FixtureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "static" => Self::Static,
            "moving-square" => Self::MovingSquare,
            "staircase" => Self::Staircase,
            "redundant-noisy" => Self::RedundantNoisy,
            "linear-gaussian-pair" => Self::LinearGaussianPair,
            other => return Err(Error::Invalid(format!("unknown fixture kind '{other}'"))),
        })
    }
}

/// Parameters for [`synth_fixture`]. Unused fields are ignored by kinds that
/// do not need them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureSpec {
    pub kind: FixtureKind,
    /// Latent dims `(T, H, W, C)`.
    pub dims: [usize; 4],
    pub patch_dims: PatchDims,
    /// Element value inside the moving square.
    pub square_value: f32,
    /// Gaussian noise sigma (per element) for noisy kinds.
    pub noise_sigma: f32,
    /// Slope of the latent delta on the pixel delta (linear-gaussian-pair).
    pub slope: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            kind: FixtureKind::Static,
            dims: [16, 16, 16, 2],
            patch_dims: PatchDims::default(),
            square_value: 1.0,
            noise_sigma: 0.0,
            slope: 0.8,
            seed: 0,
        }
    }
}

impl FixtureSpec {
    pub fn staircase(dims: [usize; 4], seed: u64) -> Self {
        Self {
            kind: FixtureKind::Staircase,
            dims,
            seed,
            ..Default::default()
        }
    }

    pub fn moving_square(dims: [usize; 4], square_value: f32, noise_sigma: f32, seed: u64) -> Self {
        Self {
            kind: FixtureKind::MovingSquare,
            dims,
            square_value,
            noise_sigma,
            seed,
            ..Default::default()
        }
    }

    fn patch_grid(&self) -> Result<[usize; 3]> {
        let p = self.patch_dims;
        let [t, h, w, c] = self.dims;
        if c == 0 || t == 0 {
            return Err(Error::Invalid(format!("fixture dims {:?} must be positive", self.dims)));
        }
        for (axis, extent, patch) in [("time", t, p.pt), ("height", h, p.ph), ("width", w, p.pw)] {
            if extent == 0 || extent % patch != 0 {
                return Err(Error::PatchDivisibility { axis, extent, patch });
            }
        }
        Ok([t / p.pt, h / p.ph, w / p.pw])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fixture {
    Single(LatentGrid),
    /// `(pixel, latent)` grids of identical dims.
    Pair(LatentGrid, LatentGrid),
}

pub fn synth_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    match spec.kind {
        FixtureKind::Static => static_grid(spec).map(Fixture::Single),
        FixtureKind::MovingSquare => moving_square(spec).map(Fixture::Single),
        FixtureKind::Staircase => staircase(spec).map(Fixture::Single),
        FixtureKind::RedundantNoisy => redundant_noisy(spec).map(Fixture::Single),
        FixtureKind::LinearGaussianPair => linear_gaussian_pair(spec).map(|(a, b)| Fixture::Pair(a, b)),
    }
}

/// Temporally constant grid; frame content is uniform in `[-1, 1)`.
pub fn static_grid(spec: &FixtureSpec) -> Result<LatentGrid> {
    let [_, h, w, c] = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let frame: Vec<f32> = (0..h * w * c).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
    LatentGrid::from_fn(spec.dims, |_, y, x, ch| frame[(y * w + x) * c + ch])
}

/// Top-left patch coordinate of the moving square in patch frame `t`.
///
/// The square is 2x2 patches, sits on row `(Hp - 2) / 2` and advances one
/// patch column per frame, wrapping after `Wp - 1` positions.
pub fn square_origin(t: usize, grid: [usize; 3]) -> (usize, usize) {
    let path = grid[2].saturating_sub(1).max(1);
    (grid[1].saturating_sub(2) / 2, t % path)
}

/// Zero background with a `square_value` block of 2x2 patches translating one
/// patch per patch frame, plus optional i.i.d. Gaussian noise.
pub fn moving_square(spec: &FixtureSpec) -> Result<LatentGrid> {
    let grid = spec.patch_grid()?;
    if grid[1] < 2 || grid[2] < 2 {
        return Err(Error::Invalid("moving square needs at least 2x2 patches".into()));
    }
    let p = spec.patch_dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    LatentGrid::from_fn(spec.dims, |t, y, x, _| {
        let (sy, sx) = square_origin(t / p.pt, grid);
        let (py, px) = (y / p.ph, x / p.pw);
        let inside = (sy..sy + 2).contains(&py) && (sx..sx + 2).contains(&px);
        let base = if inside { spec.square_value } else { 0.0 };
        if spec.noise_sigma > 0.0 {
            base + spec.noise_sigma * rng.sample::<f32, _>(StandardNormal)
        } else {
            base
        }
    })
}

/// Patches in the left half of the patch columns toggle between 0 and a level
/// whose patch L1 norm is exactly 1 on every patch frame; the right half is
/// static zero. Consecutive patch deltas are therefore exactly 1 (moving half)
/// or 0 (static half) when the patch length is a power of two.
pub fn staircase(spec: &FixtureSpec) -> Result<LatentGrid> {
    let grid = spec.patch_grid()?;
    let p = spec.patch_dims;
    let patch_len = p.volume() * spec.dims[3];
    let level = 1.0 / patch_len as f32;
    let half = grid[2] / 2;
    LatentGrid::from_fn(spec.dims, |t, _, x, _| {
        if x / p.pw < half && (t / p.pt) % 2 == 1 {
            level
        } else {
            0.0
        }
    })
}

/// Static random content (uniform in `[-1, 1)`), an optional moving square of
/// `square_value` added on top, and fresh i.i.d. Gaussian noise every frame.
pub fn redundant_noisy(spec: &FixtureSpec) -> Result<LatentGrid> {
    let grid = spec.patch_grid()?;
    let base = static_grid(spec)?;
    let p = spec.patch_dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    LatentGrid::from_fn(spec.dims, |t, y, x, c| {
        let mut v = base.get(t, y, x, c);
        if spec.square_value != 0.0 && grid[1] >= 2 && grid[2] >= 2 {
            let (sy, sx) = square_origin(t / p.pt, grid);
            let (py, px) = (y / p.ph, x / p.pw);
            if (sy..sy + 2).contains(&py) && (sx..sx + 2).contains(&px) {
                v += spec.square_value;
            }
        }
        if spec.noise_sigma > 0.0 {
            v += spec.noise_sigma * rng.sample::<f32, _>(StandardNormal);
        }
        v
    })
}

/// Pixel grid whose consecutive single-element deltas are `X ~ 10 + N(0, 1)`,
/// and a latent grid whose deltas are `slope * X + 10 + noise_sigma * N(0, 1)`.
///
/// Values alternate direction frame to frame so the grids stay bounded. With
/// unit patches and one channel, the delta fields are the generated samples
/// (up to f32 rounding), so their Pearson correlation tends to
/// [`linear_gaussian_rho`].
pub fn linear_gaussian_pair(spec: &FixtureSpec) -> Result<(LatentGrid, LatentGrid)> {
    let [t, h, w, c] = spec.dims;
    if c != 1 || t < 2 {
        return Err(Error::Invalid("linear-gaussian-pair needs one channel and >= 2 frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut px = vec![0.0f64; t * h * w];
    let mut lx = vec![0.0f64; t * h * w];
    let per = h * w;
    for f in 1..t {
        let sign = if f % 2 == 1 { 1.0 } else { -1.0 };
        for i in 0..per {
            let x: f64 = 10.0 + rng.sample::<f64, _>(StandardNormal);
            let y: f64 = spec.slope * x + 10.0 + spec.noise_sigma as f64 * rng.sample::<f64, _>(StandardNormal);
            px[f * per + i] = px[(f - 1) * per + i] + sign * x;
            lx[f * per + i] = lx[(f - 1) * per + i] + sign * y;
        }
    }
    let pixel = LatentGrid::new(spec.dims, px.iter().map(|&v| v as f32).collect())?;
    let latent = LatentGrid::new(spec.dims, lx.iter().map(|&v| v as f32).collect())?;
    Ok((pixel, latent))
}

/// Closed-form correlation of `X` and `slope * X + sigma * Z` with unit-variance `X`.
pub fn linear_gaussian_rho(slope: f64, sigma: f64) -> f64 {
    slope / (slope * slope + sigma * sigma).sqrt()
}
