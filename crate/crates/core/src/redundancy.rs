//! Temporal redundancy measurements: pixel/latent delta correlation and the
//! predecessor-substitution compression probe.

use serde::{Deserialize, Serialize};

use crate::domain::PatchGrid;
use crate::error::{Error, Result};

/// Per-location L1 distance between temporally consecutive patches, dims `(T-1, Hp, Wp)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaField {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl DeltaField {
    pub fn get(&self, t: usize, y: usize, x: usize) -> f64 {
        self.data[(t * self.dims[1] + y) * self.dims[2] + x]
    }
}

#[inline]
pub(crate) fn l1_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&p, &q)| (p as f64 - q as f64).abs()).sum()
}

pub fn temporal_delta_l1(patches: &PatchGrid) -> Result<DeltaField> {
    let [tp, hp, wp] = patches.grid();
    if tp < 2 {
        return Err(Error::TooFewFrames(tp));
    }
    let mut data = Vec::with_capacity((tp - 1) * hp * wp);
    for t in 0..tp - 1 {
        for y in 0..hp {
            for x in 0..wp {
                data.push(l1_distance(patches.patch(t, y, x), patches.patch(t + 1, y, x)));
            }
        }
    }
    Ok(DeltaField {
        dims: [tp - 1, hp, wp],
        data,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PearsonReport {
    pub r: f64,
    pub n_samples: usize,
    pub mean_pixel: f64,
    pub mean_latent: f64,
    pub var_pixel: f64,
    pub var_latent: f64,
}

/// Pearson correlation between two delta populations.
///
/// Single pass over the pairs with Welford-style co-moment updates in f64.
pub fn pixel_latent_correlation(pixel: &DeltaField, latent: &DeltaField) -> Result<PearsonReport> {
    if pixel.dims != latent.dims {
        return Err(Error::Shape(format!(
            "pixel deltas {:?} vs latent deltas {:?}",
            pixel.dims, latent.dims
        )));
    }
    pearson(&pixel.data, &latent.data)
}

pub(crate) fn pearson(xs: &[f64], ys: &[f64]) -> Result<PearsonReport> {
    let n = xs.len();
    if n != ys.len() || n < 2 {
        return Err(Error::Shape(format!("need >= 2 paired samples, got {n} and {}", ys.len())));
    }
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let k = (i + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / k;
        my += dy / k;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    if !(sxx > 0.0) {
        return Err(Error::ZeroVariance("pixel"));
    }
    if !(syy > 0.0) {
        return Err(Error::ZeroVariance("latent"));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let denom = (n - 1) as f64;
    Ok(PearsonReport {
        r,
        n_samples: n,
        mean_pixel: mx,
        mean_latent: my,
        var_pixel: sxx / denom,
        var_latent: syy / denom,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    #[serde(with = "crate::report::extended_f64")]
    pub theta: f64,
    pub compressed_fraction: f64,
    /// Latent-space MSE between the original and compressed grids. Decoder-free
    /// proxy for perceptual fidelity.
    pub fidelity: f64,
}

/// Replaces each patch whose L1 distance to the original predecessor is
/// strictly below `theta` by the already compressed predecessor, so static runs
/// collapse to the value of their first frame. Frame 0 is never replaced.
pub fn compress_latents(patches: &PatchGrid, theta: f64) -> Result<(PatchGrid, CompressionReport)> {
    if theta.is_nan() || theta < 0.0 {
        return Err(Error::Invalid(format!("theta must be >= 0, got {theta}")));
    }
    let [tp, hp, wp] = patches.grid();
    let mut out = patches.clone();
    let mut replaced = 0usize;
    let n = out.patch_len();
    for t in 1..tp {
        for y in 0..hp {
            for x in 0..wp {
                let prev = out.offset(t - 1, y, x);
                let cur = out.offset(t, y, x);
                let d = l1_distance(&patches.data()[prev..prev + n], &patches.data()[cur..cur + n]);
                if d < theta {
                    out.data_mut().copy_within(prev..prev + n, cur);
                    replaced += 1;
                }
            }
        }
    }
    let candidates = (tp - 1) * hp * wp;
    let compressed_fraction = if candidates == 0 {
        0.0
    } else {
        replaced as f64 / candidates as f64
    };
    let fidelity = patches
        .data()
        .iter()
        .zip(out.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / patches.data().len() as f64;
    Ok((
        out,
        CompressionReport {
            theta,
            compressed_fraction,
            fidelity,
        },
    ))
}

pub fn compression_sweep(patches: &PatchGrid, thetas: &[f64]) -> Result<Vec<CompressionReport>> {
    if thetas.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Invalid("thetas must be sorted ascending".into()));
    }
    thetas
        .iter()
        .map(|&th| compress_latents(patches, th).map(|(_, r)| r))
        .collect()
}
