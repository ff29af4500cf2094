//! Inputs shared by the benchmarks.

use lipar::attention::{AttentionSpec, HeadConfig, RoPEConfig, TokenRows};
use lipar::domain::{patchify, KeepMaskSequence, PatchDims, PatchGrid};
use lipar::fixtures::{moving_square, FixtureSpec};
use lipar::recovery::{build_plan, KeptKv, RecoveryFixture, RunLengthPlan};

/// Rotated full-sequence attention inputs.
pub struct FullCase {
    pub q: TokenRows,
    pub k: TokenRows,
    pub v: TokenRows,
    pub spec: AttentionSpec,
}

/// Kept-token inputs for recovered attention.
pub struct PrunedCase {
    pub queries: TokenRows,
    pub kept: KeptKv,
    pub plan: RunLengthPlan,
    pub spec: AttentionSpec,
}

pub fn fixture(grid: [usize; 3], heads: usize, head_dim: usize) -> RecoveryFixture {
    RecoveryFixture {
        frames: grid[0],
        hp: grid[1],
        wp: grid[2],
        heads: HeadConfig::new(heads, head_dim).expect("valid heads"),
        rope: RoPEConfig::for_head(head_dim),
        causal: true,
        drift: 0.05,
        noise: 0.0,
        qk_coupling: 0.0,
        latest_queries: false,
        seed: 1,
    }
}

pub fn full_case(fx: &RecoveryFixture) -> FullCase {
    let tok = fx.tokens();
    let spec = fx.spec();
    FullCase {
        q: tok.q,
        k: tok.k,
        v: tok.v,
        spec,
    }
}

/// Keeps every `stride`-th frame. Attention is made non-causal: with a small
/// degree a run may not materialize its own kept slot, leaving early causal
/// queries without keys.
pub fn pruned_case(fx: &RecoveryFixture, stride: usize) -> PrunedCase {
    let fx = &RecoveryFixture { causal: false, ..*fx };
    let per = fx.hp * fx.wp;
    let grid = [fx.frames, fx.hp, fx.wp];
    let data = (0..fx.frames * per).map(|i| (i / per) % stride == 0).collect();
    let mask = KeepMaskSequence::new(grid, data).expect("frame 0 kept");
    let tok = fx.tokens();
    let pick = |rows: &TokenRows| {
        let mut out = TokenRows::with_capacity(rows.width, mask.kept_count());
        for (i, &p) in rows.positions.iter().enumerate() {
            if mask.get(p.0, p.1, p.2) {
                out.push(p, rows.row(i));
            }
        }
        out
    };
    PrunedCase {
        queries: pick(&tok.q),
        kept: KeptKv {
            keys: pick(&tok.k),
            values: pick(&tok.v),
        },
        plan: build_plan(&mask).expect("valid mask"),
        spec: fx.spec(),
    }
}

pub fn square_patches(dims: [usize; 4], sigma: f32) -> PatchGrid {
    let grid = moving_square(&FixtureSpec::moving_square(dims, 1.0, sigma, 3)).expect("valid fixture");
    patchify(&grid, PatchDims::default()).expect("divisible dims")
}
