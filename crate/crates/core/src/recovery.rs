//! Attention recovery: rebuilding the full key/value set of a pruned sequence
//! by duplicating kept (or cached clean) tokens at the positions they cover,
//! with keys rotated to each materialized position.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{exact_attention, AttentionSpec, HeadConfig, Position, RoPEConfig, Rotator, TokenRows};
use crate::domain::KeepMaskSequence;
use crate::error::{Error, Result};
use crate::kv_cache::{CleanFrame, KvCache, KvPair};

/// A kept frame index and the number of positions it stands for
/// (itself plus the pruned run after it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub kept_t: usize,
    pub count: usize,
}

impl Run {
    pub fn covered(&self) -> std::ops::Range<usize> {
        self.kept_t..self.kept_t + self.count
    }
}

/// Per-location run-length encoding of a keep mask along time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLengthPlan {
    dims: [usize; 3],
    runs: Vec<Vec<Run>>,
}

impl RunLengthPlan {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn runs(&self, y: usize, x: usize) -> &[Run] {
        &self.runs[y * self.dims[2] + x]
    }

    /// Same plan with every frame index moved forward by `offset`.
    pub fn shifted(&self, offset: usize) -> Self {
        let mut out = self.clone();
        out.dims[0] += offset;
        for runs in &mut out.runs {
            for r in runs.iter_mut() {
                r.kept_t += offset;
            }
        }
        out
    }

    pub fn kept_count(&self) -> usize {
        self.runs.iter().map(Vec::len).sum()
    }
}

pub fn build_plan(mask: &KeepMaskSequence) -> Result<RunLengthPlan> {
    if !mask.frame(0).iter().all(|&b| b) {
        return Err(Error::FirstFrameNotKept);
    }
    let [tp, hp, wp] = mask.dims();
    let mut runs = Vec::with_capacity(hp * wp);
    for y in 0..hp {
        for x in 0..wp {
            let mut loc: Vec<Run> = Vec::new();
            for t in 0..tp {
                if mask.get(t, y, x) {
                    loc.push(Run { kept_t: t, count: 1 });
                } else {
                    loc.last_mut().expect("frame 0 is kept").count += 1;
                }
            }
            runs.push(loc);
        }
    }
    Ok(RunLengthPlan { dims: [tp, hp, wp], runs })
}

/// Number of most-recent covered positions materialized per kept token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Degree {
    #[default]
    All,
    #[serde(untagged)]
    Count(usize),
}

impl Degree {
    pub fn take(&self, count: usize) -> usize {
        match *self {
            Degree::All => count,
            Degree::Count(m) => m.min(count),
        }
    }
}

impl FromStr for Degree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Degree::All);
        }
        match s.parse::<usize>() {
            Ok(m) if m >= 1 => Ok(Degree::Count(m)),
            _ => Err(Error::Invalid(format!("degree must be 'all' or an integer >= 1, got '{s}'"))),
        }
    }
}

impl fmt::Display for Degree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Degree::All => write!(f, "all"),
            Degree::Count(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConfig {
    pub m: Degree,
    /// Source duplicates from clean cache entries instead of the kept token.
    pub noise_aware: bool,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            m: Degree::All,
            noise_aware: true,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == Degree::Count(0) {
            return Err(Error::Invalid("recovery degree must be >= 1".into()));
        }
        Ok(())
    }
}

/// Unrotated keys and values of the kept tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct KeptKv {
    pub keys: TokenRows,
    pub values: TokenRows,
}

/// Rotated keys and unrotated values of the expanded set, sorted by position.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedKv {
    pub keys: TokenRows,
    pub values: TokenRows,
}

pub fn expand_duplicates(
    kept: &KeptKv,
    plan: &RunLengthPlan,
    cache: Option<&KvCache>,
    cfg: &RecoveryConfig,
    rope: &Rotator,
    head_dim: usize,
) -> Result<ExpandedKv> {
    cfg.validate()?;
    if kept.keys.positions != kept.values.positions || kept.keys.width != kept.values.width {
        return Err(Error::Shape("kept keys and values disagree".into()));
    }
    if kept.keys.len() != plan.kept_count() {
        return Err(Error::Shape(format!(
            "{} kept tokens but the plan has {} runs",
            kept.keys.len(),
            plan.kept_count()
        )));
    }
    let index: HashMap<Position, usize> = kept.keys.positions.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let [_, hp, wp] = plan.dims();
    let width = kept.keys.width;
    let mut entries: Vec<(Position, &[f32], &[f32])> = Vec::new();
    for y in 0..hp {
        for x in 0..wp {
            for run in plan.runs(y, x) {
                let &i = index.get(&(run.kept_t, y, x)).ok_or_else(|| {
                    Error::Shape(format!("plan run at {:?} has no kept token", (run.kept_t, y, x)))
                })?;
                let own = (kept.keys.row(i), kept.values.row(i));
                let n = cfg.m.take(run.count);
                for p in run.kept_t + run.count - n..run.kept_t + run.count {
                    let (k, v) = if p == run.kept_t || !cfg.noise_aware {
                        own
                    } else {
                        let cache = cache.ok_or(Error::CacheMiss { t: p, y, x })?;
                        let (_, pair) = cache.closest(y, x, p).ok_or(Error::CacheMiss { t: p, y, x })?;
                        if pair.k.len() != width || pair.v.len() != width {
                            return Err(Error::Shape("cache entry width differs from kept tokens".into()));
                        }
                        (pair.k.as_slice(), pair.v.as_slice())
                    };
                    entries.push(((p, y, x), k, v));
                }
            }
        }
    }
    entries.sort_unstable_by_key(|e| e.0);
    let mut keys = TokenRows::with_capacity(width, entries.len());
    let mut values = TokenRows::with_capacity(width, entries.len());
    for (pos, k, v) in entries {
        keys.push(pos, k);
        values.push(pos, v);
    }
    let keys = keys.rotated(rope, head_dim);
    Ok(ExpandedKv { keys, values })
}

/// Attention outputs for the kept queries over the expanded key/value set.
///
/// Queries and kept keys are unrotated; the output has one row per query.
pub fn recovered_attention(
    queries: &TokenRows,
    kept: &KeptKv,
    plan: &RunLengthPlan,
    cache: Option<&KvCache>,
    cfg: &RecoveryConfig,
    spec: &AttentionSpec,
) -> Result<TokenRows> {
    spec.rope.validate(spec.heads.head_dim)?;
    let rot = spec.rope.rotator();
    let hd = spec.heads.head_dim;
    let expanded = expand_duplicates(kept, plan, cache, cfg, &rot, hd)?;
    exact_attention(&queries.rotated(&rot, hd), &expanded.keys, &expanded.values, &spec.heads, spec.causal)
}

/// Exponential sums of `q · rot(k_j, l)` over the `m` most recent offsets
/// `l in [c_j - m, c_j)` and over all `l in [0, c_j)`.
pub fn partial_sum_bound_check(q: &[f32], k_j: &[f32], c_j: usize, m: usize, rope: &RoPEConfig) -> Result<(f64, f64)> {
    if m == 0 || m > c_j {
        return Err(Error::Invalid(format!("need 1 <= m <= c_j, got m={m}, c_j={c_j}")));
    }
    if q.len() != k_j.len() {
        return Err(Error::Shape("query and key lengths differ".into()));
    }
    rope.validate(k_j.len())?;
    let rot = rope.rotator();
    let terms: Vec<f64> = (0..c_j)
        .map(|l| {
            let mut k = k_j.to_vec();
            rot.rotate_in_place(&mut k, (l, 0, 0));
            q.iter().zip(&k).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>().exp()
        })
        .collect();
    let partial = terms[c_j - m..].iter().sum();
    let full = terms.iter().sum();
    Ok((partial, full))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryErrorReport {
    pub m: Degree,
    pub noise_aware: bool,
    pub n_queries: usize,
    pub expanded_keys: usize,
    pub full_keys: usize,
    pub max_l2_error: f64,
    pub mean_l2_error: f64,
    /// Largest per-query error divided by the oracle output norm.
    pub max_rel_error: f64,
    /// Largest distance between a true covered key and its unrotated stand-in.
    pub delta: f64,
}

/// Synthetic tokens for recovery experiments.
///
/// Every location has a base query, key and value. The clean token at frame
/// `t` is the base plus `drift * g(t)` with `g` standard normal scaled by
/// `1/sqrt(width)`; observed tokens add independent `noise * e(t)` on top.
/// `qk_coupling` mixes each location's key base into its query base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryFixture {
    pub frames: usize,
    pub hp: usize,
    pub wp: usize,
    pub heads: HeadConfig,
    pub rope: RoPEConfig,
    pub causal: bool,
    pub drift: f64,
    pub noise: f64,
    pub qk_coupling: f64,
    /// Query only the kept tokens of the last frame.
    pub latest_queries: bool,
    pub seed: u64,
}

/// Observed and clean token rows for a whole fixture, in `(t, y, x)` order.
#[derive(Debug, Clone)]
pub struct FixtureTokens {
    pub q: TokenRows,
    pub k: TokenRows,
    pub v: TokenRows,
    pub clean_k: TokenRows,
    pub clean_v: TokenRows,
}

impl RecoveryFixture {
    pub fn spec(&self) -> AttentionSpec {
        AttentionSpec {
            heads: self.heads,
            rope: self.rope,
            causal: self.causal,
        }
    }

    pub fn tokens(&self) -> FixtureTokens {
        let w = self.heads.width();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut gauss = |n: usize, s: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * s
                })
                .collect()
        };
        let locs = self.hp * self.wp;
        let inv = 1.0 / (w as f64).sqrt();
        let mut base: Vec<Vec<f64>> = (0..3).map(|_| gauss(locs * w, 1.0)).collect();
        let c = self.qk_coupling.clamp(-1.0, 1.0);
        let own = (1.0 - c * c).sqrt();
        base[0] = base[0].iter().zip(&base[1]).map(|(q, k)| own * q + c * k).collect();
        let positions: Vec<Position> = (0..self.frames)
            .flat_map(|t| (0..self.hp).flat_map(move |y| (0..self.wp).map(move |x| (t, y, x))))
            .collect();
        let n = positions.len();
        let mut clean = Vec::new();
        let mut observed = Vec::new();
        for b in &base {
            let drift = gauss(n * w, self.drift * inv);
            let noise = gauss(n * w, self.noise * inv);
            let c: Vec<f32> = (0..n * w).map(|i| (b[i % (locs * w)] + drift[i]) as f32).collect();
            let o: Vec<f32> = c.iter().zip(&noise).map(|(&a, &e)| (a as f64 + e) as f32).collect();
            clean.push(c);
            observed.push(o);
        }
        let rows = |d: Vec<f32>| TokenRows::new(positions.clone(), w, d).expect("fixture sizes");
        let mut observed = observed.into_iter();
        let mut clean = clean.into_iter().skip(1);
        FixtureTokens {
            q: rows(observed.next().unwrap()),
            k: rows(observed.next().unwrap()),
            v: rows(observed.next().unwrap()),
            clean_k: rows(clean.next().unwrap()),
            clean_v: rows(clean.next().unwrap()),
        }
    }
}

fn select(rows: &TokenRows, mask: &KeepMaskSequence) -> TokenRows {
    let mut out = TokenRows::with_capacity(rows.width, mask.kept_count());
    for (i, &p) in rows.positions.iter().enumerate() {
        if mask.get(p.0, p.1, p.2) {
            out.push(p, rows.row(i));
        }
    }
    out
}

/// Recovered outputs for the kept queries against exact attention over the
/// full observed sequence. The cache holds the clean versions of kept tokens.
pub fn recovery_error(fixture: &RecoveryFixture, mask: &KeepMaskSequence, cfg: &RecoveryConfig) -> Result<RecoveryErrorReport> {
    if mask.dims() != [fixture.frames, fixture.hp, fixture.wp] {
        return Err(Error::Shape(format!("mask {:?} does not match fixture", mask.dims())));
    }
    let spec = fixture.spec();
    let tok = fixture.tokens();
    let plan = build_plan(mask)?;
    let kept = KeptKv {
        keys: select(&tok.k, mask),
        values: select(&tok.v, mask),
    };
    let mut queries = select(&tok.q, mask);
    if fixture.latest_queries {
        let last = fixture.frames - 1;
        let mut latest = TokenRows::with_capacity(queries.width, fixture.hp * fixture.wp);
        for i in 0..queries.len() {
            if queries.positions[i].0 == last {
                latest.push(queries.positions[i], queries.row(i));
            }
        }
        queries = latest;
    }

    let per = fixture.hp * fixture.wp;
    let mut cache = KvCache::new(fixture.hp, fixture.wp, fixture.frames)?;
    for t in 0..fixture.frames {
        let entries = (0..per)
            .map(|l| {
                let (y, x) = (l / fixture.wp, l % fixture.wp);
                mask.get(t, y, x).then(|| {
                    let i = t * per + l;
                    KvPair {
                        k: tok.clean_k.row(i).to_vec(),
                        v: tok.clean_v.row(i).to_vec(),
                    }
                })
            })
            .collect();
        cache.append(CleanFrame { t, clean: true, entries })?;
    }

    let oracle = spec.run(&queries, &tok.k, &tok.v)?;
    let got = recovered_attention(&queries, &kept, &plan, Some(&cache), cfg, &spec)?;
    let expanded = expand_duplicates(&kept, &plan, Some(&cache), cfg, &spec.rope.rotator(), spec.heads.head_dim)?;

    let mut max_err = 0.0f64;
    let mut sum_err = 0.0f64;
    let mut max_rel = 0.0f64;
    for i in 0..got.len() {
        let (a, b) = (got.row(i), oracle.row(i));
        let err = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt();
        let norm = b.iter().map(|&y| (y as f64).powi(2)).sum::<f64>().sqrt();
        max_err = max_err.max(err);
        sum_err += err;
        max_rel = max_rel.max(if norm > 0.0 { err / norm } else { err });
    }

    let mut delta = 0.0f64;
    for y in 0..fixture.hp {
        for x in 0..fixture.wp {
            for run in plan.runs(y, x) {
                let src = tok.k.row(run.kept_t * per + y * fixture.wp + x);
                for p in run.covered().skip(1) {
                    let truth = tok.k.row(p * per + y * fixture.wp + x);
                    let d = truth.iter().zip(src).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>().sqrt();
                    delta = delta.max(d);
                }
            }
        }
    }

    Ok(RecoveryErrorReport {
        m: cfg.m,
        noise_aware: cfg.noise_aware,
        n_queries: got.len(),
        expanded_keys: expanded.keys.len(),
        full_keys: tok.k.len(),
        max_l2_error: max_err,
        mean_l2_error: if got.is_empty() { 0.0 } else { sum_err / got.len() as f64 },
        max_rel_error: max_rel,
        delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(dims: [usize; 3], mut keep: impl FnMut(usize, usize, usize) -> bool) -> KeepMaskSequence {
        let mut data = Vec::new();
        for t in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(t == 0 || keep(t, y, x));
                }
            }
        }
        KeepMaskSequence::new(dims, data).unwrap()
    }

    fn fixture(frames: usize, causal: bool, drift: f64, noise: f64, seed: u64) -> RecoveryFixture {
        RecoveryFixture {
            frames,
            hp: 2,
            wp: 2,
            heads: HeadConfig::new(2, 8).unwrap(),
            rope: RoPEConfig::for_head(8),
            causal,
            drift,
            noise,
            qk_coupling: 0.0,
            latest_queries: false,
            seed,
        }
    }

    #[test]
    fn plan_without_pruning() {
        let plan = build_plan(&KeepMaskSequence::all_true([5, 1, 2])).unwrap();
        for x in 0..2 {
            assert_eq!(plan.runs(0, x).len(), 5);
            assert!(plan.runs(0, x).iter().all(|r| r.count == 1));
        }
    }

    #[test]
    fn plan_run_lengths() {
        let mask = mask_from([5, 1, 1], |t, _, _| t == 3);
        let plan = build_plan(&mask).unwrap();
        assert_eq!(
            plan.runs(0, 0),
            &[Run { kept_t: 0, count: 3 }, Run { kept_t: 3, count: 2 }]
        );
    }

    #[test]
    fn plan_rejects_missing_first_frame() {
        let mask = KeepMaskSequence::new_unchecked([2, 1, 1], vec![false, true]).unwrap();
        assert!(matches!(build_plan(&mask), Err(Error::FirstFrameNotKept)));
    }

    #[test]
    fn degree_parsing() {
        assert_eq!("all".parse::<Degree>().unwrap(), Degree::All);
        assert_eq!("3".parse::<Degree>().unwrap(), Degree::Count(3));
        assert!("0".parse::<Degree>().is_err());
        assert_eq!(serde_json::to_string(&Degree::All).unwrap(), "\"all\"");
        assert_eq!(serde_json::from_str::<Degree>("4").unwrap(), Degree::Count(4));
        assert_eq!(serde_json::from_str::<Degree>("\"all\"").unwrap(), Degree::All);
    }

    #[test]
    fn expansion_picks_most_recent_positions() {
        let mask = mask_from([4, 1, 1], |_, _, _| false);
        let plan = build_plan(&mask).unwrap();
        let kept = KeptKv {
            keys: TokenRows::new(vec![(0, 0, 0)], 2, vec![1.0, 0.0]).unwrap(),
            values: TokenRows::new(vec![(0, 0, 0)], 2, vec![5.0, 6.0]).unwrap(),
        };
        let cfg = RecoveryConfig {
            m: Degree::Count(2),
            noise_aware: false,
        };
        let rope = RoPEConfig::for_head(2);
        let e = expand_duplicates(&kept, &plan, None, &cfg, &rope.rotator(), 2).unwrap();
        assert_eq!(e.keys.positions, vec![(2, 0, 0), (3, 0, 0)]);
        assert_eq!(e.values.data, vec![5.0, 6.0, 5.0, 6.0]);
        assert_eq!(e.keys.row(1), rope_rotate_for_test(&[1.0, 0.0], 3, &rope).as_slice());
    }

    fn rope_rotate_for_test(v: &[f32], t: usize, rope: &RoPEConfig) -> Vec<f32> {
        crate::attention::rope_rotate(v, (t, 0, 0), rope).unwrap()
    }

    #[test]
    fn noise_aware_reads_cache_and_misses_loudly() {
        let mask = mask_from([3, 1, 1], |_, _, _| false);
        let plan = build_plan(&mask).unwrap();
        let kept = KeptKv {
            keys: TokenRows::new(vec![(0, 0, 0)], 2, vec![1.0, 0.0]).unwrap(),
            values: TokenRows::new(vec![(0, 0, 0)], 2, vec![1.0, 1.0]).unwrap(),
        };
        let cfg = RecoveryConfig::default();
        let rot = RoPEConfig::for_head(2).rotator();
        assert!(matches!(
            expand_duplicates(&kept, &plan, None, &cfg, &rot, 2),
            Err(Error::CacheMiss { t: 1, y: 0, x: 0 })
        ));
        let mut cache = KvCache::new(1, 1, 4).unwrap();
        cache
            .append(CleanFrame {
                t: 0,
                clean: true,
                entries: vec![Some(KvPair {
                    k: vec![0.0, 2.0],
                    v: vec![9.0, 9.0],
                })],
            })
            .unwrap();
        let e = expand_duplicates(&kept, &plan, Some(&cache), &cfg, &rot, 2).unwrap();
        assert_eq!(e.values.data, vec![1.0, 1.0, 9.0, 9.0, 9.0, 9.0]);
    }

    #[test]
    fn no_pruning_is_bit_identical_to_exact() {
        let fx = fixture(4, true, 0.5, 0.3, 1);
        let tok = fx.tokens();
        let mask = KeepMaskSequence::all_true([4, 2, 2]);
        let plan = build_plan(&mask).unwrap();
        let kept = KeptKv {
            keys: tok.k.clone(),
            values: tok.v.clone(),
        };
        let spec = fx.spec();
        let got = recovered_attention(&tok.q, &kept, &plan, None, &RecoveryConfig::default(), &spec).unwrap();
        assert_eq!(got, spec.run(&tok.q, &tok.k, &tok.v).unwrap());
    }

    #[test]
    fn exact_duplication_matches_oracle() {
        let fx = fixture(6, true, 0.0, 0.0, 2);
        let mask = mask_from([6, 2, 2], |t, _, _| t == 5);
        let r = recovery_error(&fx, &mask, &RecoveryConfig::default()).unwrap();
        assert_eq!(r.delta, 0.0);
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        assert_eq!(r.expanded_keys, r.full_keys);
    }

    #[test]
    fn error_shrinks_with_degree() {
        // Keys aligned with their queries and queried from the last frame: the
        // most recent duplicates carry the largest logits.
        for seed in 0..3 {
            let fx = RecoveryFixture {
                hp: 4,
                wp: 4,
                heads: HeadConfig::new(4, 16).unwrap(),
                rope: RoPEConfig::for_head(16),
                qk_coupling: 0.9,
                latest_queries: true,
                ..fixture(16, true, 0.0, 0.0, seed)
            };
            let mask = mask_from([16, 4, 4], |t, _, _| t == 15);
            let mut last = f64::INFINITY;
            for m in [1usize, 2, 4, 8, 16] {
                let cfg = RecoveryConfig {
                    m: Degree::Count(m),
                    noise_aware: false,
                };
                let r = recovery_error(&fx, &mask, &cfg).unwrap();
                assert!(r.mean_l2_error <= last, "seed {seed} m={m}: {} > {last}", r.mean_l2_error);
                last = r.mean_l2_error;
            }
            assert!(last < 1e-5);
        }
    }

    #[test]
    fn partial_equals_full_at_full_degree() {
        let rope = RoPEConfig::for_head(4);
        let (p, f) = partial_sum_bound_check(&[0.1, 0.2, 0.3, 0.4], &[0.5, -0.5, 0.2, 0.1], 5, 5, &rope).unwrap();
        assert_eq!(p, f);
        let (p, f) = partial_sum_bound_check(&[0.1, 0.2, 0.3, 0.4], &[0.5, -0.5, 0.2, 0.1], 5, 2, &rope).unwrap();
        assert!(p < f);
    }

    proptest! {
        #[test]
        fn plan_counts_cover_every_frame(seed in 0u64..1000, t in 1usize..10, h in 1usize..4, w in 1usize..4) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = mask_from([t, h, w], |_, _, _| rng.random::<bool>());
            let plan = build_plan(&mask).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let runs = plan.runs(y, x);
                    prop_assert_eq!(runs.iter().map(|r| r.count).sum::<usize>(), t);
                    let mut next = 0;
                    for r in runs {
                        prop_assert_eq!(r.kept_t, next);
                        prop_assert!(mask.get(r.kept_t, y, x));
                        next += r.count;
                    }
                }
            }
        }

        #[test]
        fn expansion_size_and_value_rotation(seed in 0u64..500, m in 1usize..5) {
            use rand::Rng;
            let fx = fixture(6, false, 0.2, 0.0, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let mask = mask_from([6, 2, 2], |_, _, _| rng.random::<f32>() < 0.3);
            let tok = fx.tokens();
            let plan = build_plan(&mask).unwrap();
            let kept = KeptKv { keys: select(&tok.k, &mask), values: select(&tok.v, &mask) };
            let cfg = RecoveryConfig { m: Degree::Count(m), noise_aware: false };
            let e = expand_duplicates(&kept, &plan, None, &cfg, &fx.rope.rotator(), 8).unwrap();
            let bound: usize = (0..2).flat_map(|y| (0..2).map(move |x| (y, x)))
                .flat_map(|(y, x)| plan.runs(y, x).to_vec())
                .map(|r| 1 + m.min(r.count - 1))
                .sum();
            prop_assert!(e.keys.len() <= bound);
            // values are copies of kept rows, never rotated
            for i in 0..e.values.len() {
                let (t, y, x) = e.values.positions[i];
                let run = plan.runs(y, x).iter().find(|r| r.covered().contains(&t)).unwrap();
                let j = kept.values.positions.iter().position(|&p| p == (run.kept_t, y, x)).unwrap();
                prop_assert_eq!(e.values.row(i), kept.values.row(j));
            }
        }
    }
}
