//! Rotary position embeddings and the reference multi-head attention.
//!
//! [`exact_attention`] is the direct O(Nq * Nk) evaluation every approximation
//! is checked against: per-query max subtraction, f64 accumulation, no tiling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token position `(t, y, x)`: frame index, patch row, patch column.
pub type Position = (usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub n_heads: usize,
    pub head_dim: usize,
    /// Logit scale, `1 / sqrt(head_dim)` by default.
    pub scale: f64,
}

impl HeadConfig {
    pub fn new(n_heads: usize, head_dim: usize) -> Result<Self> {
        let cfg = Self {
            n_heads,
            head_dim,
            scale: 1.0 / (head_dim as f64).sqrt(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Invalid(format!(
                "need n_heads >= 1 and an even head_dim, got {} x {}",
                self.n_heads, self.head_dim
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Invalid("attention scale must be > 0".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RopeMode {
    /// Rotate by the frame index only.
    #[default]
    Temporal,
    /// Split the rotated pairs into three groups driven by `t`, `y` and `x`.
    Factorized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoPEConfig {
    pub base: f64,
    /// Leading dims of each head that receive rotation (even).
    pub rotated_dims: usize,
    pub mode: RopeMode,
}

impl Default for RoPEConfig {
    fn default() -> Self {
        Self {
            base: 10000.0,
            rotated_dims: 16,
            mode: RopeMode::Temporal,
        }
    }
}

impl RoPEConfig {
    pub fn for_head(head_dim: usize) -> Self {
        Self {
            rotated_dims: head_dim,
            ..Default::default()
        }
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if self.rotated_dims % 2 != 0 || self.rotated_dims > head_dim {
            return Err(Error::Invalid(format!(
                "rotated span {} must be even and <= head_dim {head_dim}",
                self.rotated_dims
            )));
        }
        if !(self.base > 1.0) {
            return Err(Error::Invalid("rope base must be > 1".into()));
        }
        Ok(())
    }

    /// `(angle per unit position, axis)` for every rotated pair.
    fn pair_table(&self) -> Vec<(f64, usize)> {
        let pairs = self.rotated_dims / 2;
        match self.mode {
            RopeMode::Temporal => (0..pairs)
                .map(|i| (self.base.powf(-2.0 * i as f64 / self.rotated_dims as f64), 0))
                .collect(),
            RopeMode::Factorized => {
                let spatial = pairs / 3;
                let groups = [pairs - 2 * spatial, spatial, spatial];
                let mut table = Vec::with_capacity(pairs);
                for (axis, &n) in groups.iter().enumerate() {
                    for i in 0..n {
                        table.push((self.base.powf(-(i as f64) / n as f64), axis));
                    }
                }
                table
            }
        }
    }

    /// Precomputed rotation table, reusable across many vectors.
    pub fn rotator(&self) -> Rotator {
        Rotator {
            pairs: self.pair_table(),
        }
    }
}

/// Cached per-pair frequencies for a [`RoPEConfig`].
#[derive(Debug, Clone)]
pub struct Rotator {
    pairs: Vec<(f64, usize)>,
}

impl Rotator {
    /// Rotates `v` in place to `pos`. Dims past the rotated span are untouched.
    pub fn rotate_in_place(&self, v: &mut [f32], pos: Position) {
        let coords = [pos.0 as f64, pos.1 as f64, pos.2 as f64];
        for (i, &(freq, axis)) in self.pairs.iter().enumerate() {
            let angle = coords[axis] * freq;
            if angle == 0.0 {
                continue;
            }
            let (s, c) = angle.sin_cos();
            let a = v[2 * i] as f64;
            let b = v[2 * i + 1] as f64;
            v[2 * i] = (a * c - b * s) as f32;
            v[2 * i + 1] = (a * s + b * c) as f32;
        }
    }

    /// Rotates every head of a packed `n_heads * head_dim` row.
    pub fn rotate_heads(&self, row: &mut [f32], head_dim: usize, pos: Position) {
        for head in row.chunks_exact_mut(head_dim) {
            self.rotate_in_place(head, pos);
        }
    }
}

/// Rotates a single head vector to `position`.
pub fn rope_rotate(v: &[f32], position: Position, cfg: &RoPEConfig) -> Result<Vec<f32>> {
    cfg.validate(v.len())?;
    let mut out = v.to_vec();
    cfg.rotator().rotate_in_place(&mut out, position);
    Ok(out)
}

/// Rows of packed per-head vectors with their token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRows {
    pub positions: Vec<Position>,
    pub width: usize,
    pub data: Vec<f32>,
}

impl TokenRows {
    pub fn new(positions: Vec<Position>, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != positions.len() * width {
            return Err(Error::Shape(format!(
                "{} values for {} rows of width {width}",
                data.len(),
                positions.len()
            )));
        }
        Ok(Self { positions, width, data })
    }

    pub fn with_capacity(width: usize, rows: usize) -> Self {
        Self {
            positions: Vec::with_capacity(rows),
            width,
            data: Vec::with_capacity(rows * width),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn push(&mut self, pos: Position, row: &[f32]) {
        debug_assert_eq!(row.len(), self.width);
        self.positions.push(pos);
        self.data.extend_from_slice(row);
    }

    /// Copy with every row rotated to its own position.
    pub fn rotated(&self, rot: &Rotator, head_dim: usize) -> Self {
        let mut out = self.clone();
        for (i, &pos) in self.positions.iter().enumerate() {
            rot.rotate_heads(&mut out.data[i * self.width..(i + 1) * self.width], head_dim, pos);
        }
        out
    }
}

/// Softmax-weighted value sums for each query, per head.
///
/// `queries` and `keys` are expected to be rotated already; `values` are used
/// as given. With `causal`, a key is visible when its frame index does not
/// exceed the query's.
pub fn exact_attention(
    queries: &TokenRows,
    keys: &TokenRows,
    values: &TokenRows,
    heads: &HeadConfig,
    causal: bool,
) -> Result<TokenRows> {
    exact_attention_par(queries, keys, values, heads, causal, 1)
}

/// [`exact_attention`] with query rows split across up to `threads` workers.
/// The result does not depend on the thread count.
pub fn exact_attention_par(
    queries: &TokenRows,
    keys: &TokenRows,
    values: &TokenRows,
    heads: &HeadConfig,
    causal: bool,
    threads: usize,
) -> Result<TokenRows> {
    heads.validate()?;
    let width = heads.width();
    if queries.width != width || keys.width != width || values.width != width {
        return Err(Error::Shape(format!(
            "row widths q={} k={} v={} do not match heads {width}",
            queries.width, keys.width, values.width
        )));
    }
    if keys.len() != values.len() {
        return Err(Error::Shape(format!("{} keys vs {} values", keys.len(), values.len())));
    }
    let mut out = vec![0.0f32; queries.len() * width];
    let nq = queries.len();
    let threads = threads.clamp(1, nq.max(1));
    if threads == 1 {
        attend_rows(queries, 0, keys, values, heads, causal, &mut out)?;
    } else {
        let per = nq.div_ceil(threads);
        std::thread::scope(|s| -> Result<()> {
            let handles: Vec<_> = out
                .chunks_mut(per * width)
                .enumerate()
                .map(|(i, chunk)| s.spawn(move || attend_rows(queries, i * per, keys, values, heads, causal, chunk)))
                .collect();
            for h in handles {
                h.join().expect("attention worker panicked")?;
            }
            Ok(())
        })?;
    }
    TokenRows::new(queries.positions.clone(), width, out)
}

#[inline(always)]
fn dot64(a: &[f32], b: &[f32]) -> f64 {
    let mut lanes = [0.0f64; 16];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x as f64 * y as f64).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..16 {
            lanes[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut w = 16;
    while w > 1 {
        w /= 2;
        for l in 0..w {
            lanes[l] += lanes[l + w];
        }
    }
    lanes[0] + tail
}

fn attend_rows(
    queries: &TokenRows,
    first: usize,
    keys: &TokenRows,
    values: &TokenRows,
    heads: &HeadConfig,
    causal: bool,
    out: &mut [f32],
) -> Result<()> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { attend_rows_avx2(queries, first, keys, values, heads, causal, out) };
    }
    attend_rows_dispatch(queries, first, keys, values, heads, causal, out)
}

/// Same arithmetic in the same order; only wider registers.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn attend_rows_avx2(
    queries: &TokenRows,
    first: usize,
    keys: &TokenRows,
    values: &TokenRows,
    heads: &HeadConfig,
    causal: bool,
    out: &mut [f32],
) -> Result<()> {
    attend_rows_dispatch(queries, first, keys, values, heads, causal, out)
}

/// Common head sizes get a copy with the head size known at compile time.
#[inline(always)]
fn attend_rows_dispatch(
    queries: &TokenRows,
    first: usize,
    keys: &TokenRows,
    values: &TokenRows,
    heads: &HeadConfig,
    causal: bool,
    out: &mut [f32],
) -> Result<()> {
    match heads.head_dim {
        16 => attend_rows_impl::<16>(queries, first, keys, values, heads, causal, out),
        32 => attend_rows_impl::<32>(queries, first, keys, values, heads, causal, out),
        64 => attend_rows_impl::<64>(queries, first, keys, values, heads, causal, out),
        128 => attend_rows_impl::<128>(queries, first, keys, values, heads, causal, out),
        _ => attend_rows_impl::<0>(queries, first, keys, values, heads, causal, out),
    }
}

#[inline(always)]
fn axpy64(acc: &mut [f64], w: f64, v: &[f32]) {
    let mut ca = acc.chunks_exact_mut(16);
    let mut cv = v.chunks_exact(16);
    for (a, x) in (&mut ca).zip(&mut cv) {
        for l in 0..16 {
            a[l] += w * x[l] as f64;
        }
    }
    for (a, &x) in ca.into_remainder().iter_mut().zip(cv.remainder()) {
        *a += w * x as f64;
    }
}

/// `HD` is the head size, or 0 to read it from `heads`.
#[inline(always)]
fn attend_rows_impl<const HD: usize>(
    queries: &TokenRows,
    first: usize,
    keys: &TokenRows,
    values: &TokenRows,
    heads: &HeadConfig,
    causal: bool,
    out: &mut [f32],
) -> Result<()> {
    let width = heads.width();
    let hd = if HD == 0 { heads.head_dim } else { HD };
    let mut visible = Vec::with_capacity(keys.len());
    let mut weights = vec![0.0f64; keys.len()];
    let mut acc = vec![0.0f64; hd];
    for (r, o_row) in out.chunks_exact_mut(width).enumerate() {
        let qi = first + r;
        let qpos = queries.positions[qi];
        visible.clear();
        visible.extend((0..keys.len()).filter(|&j| !causal || keys.positions[j].0 <= qpos.0));
        if visible.is_empty() {
            return Err(Error::NoVisibleKeys(qpos));
        }
        let weights = &mut weights[..visible.len()];
        let qrow = queries.row(qi);
        for h in 0..heads.n_heads {
            let span = h * hd..(h + 1) * hd;
            let q = &qrow[span.clone()];
            let mut max = f64::NEG_INFINITY;
            for (w, &j) in weights.iter_mut().zip(&visible) {
                let l = dot64(q, &keys.data[j * width + span.start..j * width + span.end]) * heads.scale;
                *w = l;
                max = max.max(l);
            }
            let mut denom = 0.0f64;
            for w in weights.iter_mut() {
                *w = (*w - max).exp();
                denom += *w;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (&w, &j) in weights.iter().zip(&visible) {
                axpy64(&mut acc, w, &values.data[j * width + span.start..j * width + span.end]);
            }
            for (dst, a) in o_row[span].iter_mut().zip(&acc) {
                *dst = (a / denom) as f32;
            }
        }
    }
    Ok(())
}

/// Head layout, rotary config and masking for attention over unrotated rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub heads: HeadConfig,
    pub rope: RoPEConfig,
    pub causal: bool,
}

impl AttentionSpec {
    /// Rotates queries and keys to their own positions, then runs [`exact_attention`].
    pub fn run(&self, q: &TokenRows, k: &TokenRows, v: &TokenRows) -> Result<TokenRows> {
        self.run_par(q, k, v, 1)
    }

    pub fn run_par(&self, q: &TokenRows, k: &TokenRows, v: &TokenRows, threads: usize) -> Result<TokenRows> {
        self.rope.validate(self.heads.head_dim)?;
        let rot = self.rope.rotator();
        let hd = self.heads.head_dim;
        exact_attention_par(&q.rotated(&rot, hd), &k.rotated(&rot, hd), v, &self.heads, self.causal, threads)
    }
}

/// Token embeddings of model width at unique positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub positions: Vec<Position>,
    pub model_dim: usize,
    pub embeddings: Vec<f32>,
}

impl TokenSequence {
    pub fn new(positions: Vec<Position>, model_dim: usize, embeddings: Vec<f32>) -> Result<Self> {
        if embeddings.len() != positions.len() * model_dim {
            return Err(Error::Shape(format!(
                "{} values for {} tokens of dim {model_dim}",
                embeddings.len(),
                positions.len()
            )));
        }
        let mut seen = positions.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid("token positions must be unique".into()));
        }
        Ok(Self {
            positions,
            model_dim,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Rows of `embeddings · w` for a row-major `model_dim x out_dim` matrix.
    pub fn project(&self, w: &[f32], out_dim: usize) -> TokenRows {
        TokenRows {
            positions: self.positions.clone(),
            width: out_dim,
            data: matmul(&self.embeddings, self.model_dim, w, out_dim),
        }
    }
}

/// Row-major `x (rows x inner) · w (inner x out)`, accumulated in f32 per output row.
pub fn matmul(x: &[f32], inner: usize, w: &[f32], out: usize) -> Vec<f32> {
    debug_assert_eq!(w.len(), inner * out);
    let rows = x.len() / inner.max(1);
    let mut y = vec![0.0f32; rows * out];
    for (xr, yr) in x.chunks_exact(inner).zip(y.chunks_exact_mut(out)) {
        for (&a, wr) in xr.iter().zip(w.chunks_exact(out)) {
            for (o, &b) in yr.iter_mut().zip(wr) {
                *o += a * b;
            }
        }
    }
    y
}
