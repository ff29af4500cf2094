//! Monte-Carlo moments of Gaussian quadratic forms and of summed value noise,
//! comparing independent draws against a single duplicated draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SHARD: usize = 4096;

/// Square interaction matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum WMatrix {
    Identity,
    /// Row-major `dim x dim`.
    Dense(Vec<f64>),
}

impl WMatrix {
    /// `I + G / sqrt(dim)` with standard normal `G`: asymmetric with a positive trace.
    pub fn random(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (dim as f64).sqrt();
        let mut w: Vec<f64> = (0..dim * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * s
            })
            .collect();
        for i in 0..dim {
            w[i * dim + i] += 1.0;
        }
        WMatrix::Dense(w)
    }

    fn check(&self, dim: usize) -> Result<()> {
        match self {
            WMatrix::Dense(w) if w.len() != dim * dim => Err(Error::Shape(format!(
                "W has {} entries, expected {dim}x{dim}",
                w.len()
            ))),
            _ => Ok(()),
        }
    }

    pub fn trace(&self, dim: usize) -> f64 {
        match self {
            WMatrix::Identity => dim as f64,
            WMatrix::Dense(w) => (0..dim).map(|i| w[i * dim + i]).sum(),
        }
    }

    pub fn frobenius_sq(&self, dim: usize) -> f64 {
        match self {
            WMatrix::Identity => dim as f64,
            WMatrix::Dense(w) => w.iter().map(|v| v * v).sum(),
        }
    }

    /// `Tr(S^2)` for `S = (W + W^T) / 2`, i.e. the squared Frobenius norm of `S`.
    pub fn sym_trace_sq(&self, dim: usize) -> f64 {
        match self {
            WMatrix::Identity => dim as f64,
            WMatrix::Dense(w) => {
                let mut s = 0.0;
                for i in 0..dim {
                    for j in 0..dim {
                        let v = 0.5 * (w[i * dim + j] + w[j * dim + i]);
                        s += v * v;
                    }
                }
                s
            }
        }
    }

    fn apply(&self, dim: usize, x: &[f64], out: &mut [f64]) {
        match self {
            WMatrix::Identity => out.copy_from_slice(x),
            WMatrix::Dense(w) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = w[i * dim..(i + 1) * dim].iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    fn bilinear(&self, dim: usize, a: &[f64], b: &[f64], tmp: &mut [f64]) -> f64 {
        match self {
            WMatrix::Identity => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            WMatrix::Dense(_) => {
                self.apply(dim, b, tmp);
                a.iter().zip(tmp.iter()).map(|(x, y)| x * y).sum()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub dim: usize,
    pub w: WMatrix,
    pub n_samples: usize,
    pub seed: u64,
    /// Worker cap; results do not depend on it.
    pub threads: usize,
}

impl NoiseModel {
    pub fn new(dim: usize, w: WMatrix, n_samples: usize, seed: u64) -> Result<Self> {
        let m = Self {
            dim,
            w,
            n_samples,
            seed,
            threads: 1,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Invalid("noise dim must be >= 1".into()));
        }
        if self.n_samples < 1000 {
            return Err(Error::Invalid(format!("need at least 1000 samples, got {}", self.n_samples)));
        }
        self.w.check(self.dim)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Moments) -> Moments {
        if self.n == 0.0 {
            return o;
        }
        if o.n == 0.0 {
            return self;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * o.n / n,
            m2: self.m2 + o.m2 + d * d * self.n * o.n / n,
        }
    }

    fn variance(&self) -> f64 {
        self.m2 / (self.n - 1.0)
    }
}

/// Runs `draw` over `n` samples split in fixed-size shards, each with its own
/// stream of the seeded generator, and merges shard moments in shard order.
fn sharded<F>(n: usize, seed: u64, threads: usize, draw: F) -> Moments
where
    F: Fn(&mut ChaCha8Rng, &mut Moments) + Sync,
{
    let shards = n.div_ceil(SHARD);
    let run = |s: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        let mut m = Moments::default();
        for _ in 0..SHARD.min(n - s * SHARD) {
            draw(&mut rng, &mut m);
        }
        m
    };
    let threads = threads.clamp(1, shards.max(1));
    let parts: Vec<Moments> = if threads == 1 {
        (0..shards).map(run).collect()
    } else {
        let mut parts = vec![Moments::default(); shards];
        std::thread::scope(|sc| {
            for (w, chunk) in parts.chunks_mut(shards.div_ceil(threads)).enumerate() {
                let run = &run;
                let base = w * shards.div_ceil(threads);
                sc.spawn(move || {
                    for (i, slot) in chunk.iter_mut().enumerate() {
                        *slot = run(base + i);
                    }
                });
            }
        });
        parts
    };
    parts.into_iter().fold(Moments::default(), Moments::merge)
}

fn normal_vec(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub duplicated: bool,
    pub n_samples: usize,
    pub mean: f64,
    pub variance: f64,
    pub target_mean: f64,
    pub target_variance: f64,
    /// Standard error of the empirical mean, from the target variance.
    pub mean_std_error: f64,
    /// `(mean - target_mean) / mean_std_error`.
    pub mean_z: f64,
    /// `|mean - target_mean| / |target_mean|`, or `null` for a zero target.
    pub mean_rel_dev: Option<f64>,
    pub variance_rel_dev: f64,
}

impl MomentReport {
    fn new(duplicated: bool, n_samples: usize, m: Moments, target_mean: f64, target_variance: f64, per_draw: f64) -> Self {
        let variance = m.variance();
        let se = (target_variance / (n_samples as f64 * per_draw)).sqrt();
        MomentReport {
            duplicated,
            n_samples,
            mean: m.mean,
            variance,
            target_mean,
            target_variance,
            mean_std_error: se,
            mean_z: (m.mean - target_mean) / se,
            mean_rel_dev: (target_mean != 0.0).then(|| (m.mean - target_mean).abs() / target_mean.abs()),
            variance_rel_dev: (variance - target_variance).abs() / target_variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub dim: usize,
    pub independent: MomentReport,
    pub duplicated: MomentReport,
}

/// Samples `e_i^T W e_j` with `e_j` drawn independently or set equal to `e_i`.
pub fn quadratic_form_moments(model: &NoiseModel, duplicated: bool) -> Result<MomentReport> {
    model.validate()?;
    let d = model.dim;
    let m = sharded(model.n_samples, model.seed, model.threads, |rng, acc| {
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        normal_vec(rng, &mut a);
        let v = if duplicated {
            model.w.bilinear(d, &a, &a, &mut tmp)
        } else {
            normal_vec(rng, &mut b);
            model.w.bilinear(d, &a, &b, &mut tmp)
        };
        acc.push(v);
    });
    let (tm, tv) = if duplicated {
        (model.w.trace(d), 2.0 * model.w.sym_trace_sq(d))
    } else {
        (0.0, model.w.frobenius_sq(d))
    };
    Ok(MomentReport::new(duplicated, model.n_samples, m, tm, tv, 1.0))
}

pub fn moment_pair(model: &NoiseModel) -> Result<MomentPair> {
    Ok(MomentPair {
        dim: model.dim,
        independent: quadratic_form_moments(model, false)?,
        duplicated: quadratic_form_moments(model, true)?,
    })
}

/// Per-coordinate moments of summed value noise over `n` tokens:
/// `W (e_1 + ... + e_n)` when independent, `n W e` when duplicated.
pub fn aggregation_variance(model: &NoiseModel, n: usize, duplicated: bool) -> Result<MomentReport> {
    model.validate()?;
    if n == 0 {
        return Err(Error::Invalid("token count must be >= 1".into()));
    }
    let d = model.dim;
    let m = sharded(model.n_samples, model.seed, model.threads, |rng, acc| {
        let mut sum = vec![0.0; d];
        let mut e = vec![0.0; d];
        let mut out = vec![0.0; d];
        let draws = if duplicated { 1 } else { n };
        for _ in 0..draws {
            normal_vec(rng, &mut e);
            for (s, v) in sum.iter_mut().zip(&e) {
                *s += v;
            }
        }
        if duplicated {
            sum.iter_mut().for_each(|s| *s *= n as f64);
        }
        model.w.apply(d, &sum, &mut out);
        out.iter().for_each(|&v| acc.push(v));
    });
    let per_coord = model.w.frobenius_sq(d) / d as f64;
    let scale = if duplicated { (n * n) as f64 } else { n as f64 };
    Ok(MomentReport::new(duplicated, model.n_samples, m, 0.0, scale * per_coord, d as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationReport {
    pub duplicated: bool,
    pub ns: Vec<usize>,
    pub reports: Vec<MomentReport>,
    /// Least-squares slope of `ln variance` against `ln n`.
    pub exponent: f64,
}

pub fn aggregation_sweep(model: &NoiseModel, ns: &[usize], duplicated: bool) -> Result<AggregationReport> {
    if ns.len() < 2 {
        return Err(Error::Invalid("an exponent fit needs at least two token counts".into()));
    }
    let reports = ns
        .iter()
        .map(|&n| aggregation_variance(model, n, duplicated))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = reports.iter().map(|r| r.variance.ln()).collect();
    Ok(AggregationReport {
        duplicated,
        ns: ns.to_vec(),
        reports,
        exponent: linear_fit(&xs, &ys).0,
    })
}

/// Ordinary least squares `(slope, intercept)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(dim: usize, w: WMatrix, n: usize) -> NoiseModel {
        NoiseModel::new(dim, w, n, 11).unwrap()
    }

    #[test]
    fn rejects_small_models() {
        assert!(NoiseModel::new(0, WMatrix::Identity, 1000, 0).is_err());
        assert!(NoiseModel::new(4, WMatrix::Identity, 999, 0).is_err());
        assert!(NoiseModel::new(4, WMatrix::Dense(vec![0.0; 15]), 1000, 0).is_err());
    }

    #[test]
    fn identity_quadratic_form() {
        let m = model(32, WMatrix::Identity, 20_000);
        let dup = quadratic_form_moments(&m, true).unwrap();
        assert_eq!(dup.target_mean, 32.0);
        assert_eq!(dup.target_variance, 64.0);
        assert!(dup.mean_rel_dev.unwrap() < 0.02);
        assert!(dup.variance_rel_dev < 0.05);
        let ind = quadratic_form_moments(&m, false).unwrap();
        assert!(ind.mean_z.abs() < 5.0);
        assert!(ind.variance_rel_dev < 0.05);
    }

    #[test]
    fn dense_identity_matches_fast_path_targets() {
        let d = 6;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let w = WMatrix::Dense(eye);
        assert_eq!(w.trace(d), 6.0);
        assert_eq!(w.sym_trace_sq(d), 6.0);
        assert_eq!(w.frobenius_sq(d), 6.0);
        let a = quadratic_form_moments(&model(d, w, 5000), true).unwrap();
        let b = quadratic_form_moments(&model(d, WMatrix::Identity, 5000), true).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-9);
    }

    #[test]
    fn sym_trace_oracle() {
        // W = [[1, 2], [0, 3]] -> S = [[1, 1], [1, 3]], Tr(S^2) = 1 + 1 + 1 + 9
        let w = WMatrix::Dense(vec![1.0, 2.0, 0.0, 3.0]);
        assert_eq!(w.sym_trace_sq(2), 12.0);
        assert_eq!(w.frobenius_sq(2), 14.0);
        assert_eq!(w.trace(2), 4.0);
    }

    #[test]
    fn random_w_has_positive_trace() {
        let w = WMatrix::random(64, 3);
        assert!(w.trace(64) > 32.0);
    }

    #[test]
    fn single_token_aggregation_is_identical() {
        let m = model(8, WMatrix::Identity, 2000);
        let a = aggregation_variance(&m, 1, true).unwrap();
        let b = aggregation_variance(&m, 1, false).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.variance, b.variance);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut m = model(8, WMatrix::random(8, 1), 10_000);
        let one = quadratic_form_moments(&m, true).unwrap();
        m.threads = 3;
        assert_eq!(quadratic_form_moments(&m, true).unwrap(), one);
    }

    #[test]
    fn moment_merge_matches_direct() {
        let xs: Vec<f64> = (0..50).map(|i| ((i * 37) % 17) as f64 * 0.3).collect();
        let mut all = Moments::default();
        xs.iter().for_each(|&x| all.push(x));
        let (mut a, mut b) = (Moments::default(), Moments::default());
        xs[..13].iter().for_each(|&x| a.push(x));
        xs[13..].iter().for_each(|&x| b.push(x));
        let m = a.merge(b);
        assert!((m.mean - all.mean).abs() < 1e-12);
        assert!((m.variance() - all.variance()).abs() < 1e-12);
    }

    #[test]
    fn fit_recovers_line() {
        let (s, c) = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]);
        assert!((s - 2.0).abs() < 1e-12 && (c - 1.0).abs() < 1e-12);
    }
}
