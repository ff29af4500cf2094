//! `lipar` command-line tool.
//!
//! Exit codes: 0 on success, 2 for invalid input or arguments, 3 when a
//! numerical check fails.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lipar::attention::{HeadConfig, RoPEConfig};
use lipar::config::RunConfig;
use lipar::denoiser::ToyDenoiserConfig;
use lipar::domain::{patchify, KeepMaskSequence, LatentGrid, PatchDims, PruneConfig};
use lipar::fixtures::{synth_fixture, Fixture, FixtureKind, FixtureSpec};
use lipar::latency::{latency_denoiser, latency_sweep, token_grid};
use lipar::ltns::{Tensor, TensorData};
use lipar::noise::{aggregation_sweep, moment_pair, NoiseModel, WMatrix};
use lipar::prune::{lif_prune_stages, PruneStats};
use lipar::recovery::{recovery_error, Degree, RecoveryConfig, RecoveryFixture};
use lipar::redundancy::{compress_latents, compression_sweep, pixel_latent_correlation, temporal_delta_l1};
use lipar::report::{emit_json, latency_csv, Report};
use lipar::restore::{extract_kept, restore, PrunedPatchSet};
use lipar::Error;

#[derive(Parser)]
#[command(name = "lipar", version, about = "Latent inter-frame pruning with attention recovery")]
struct Cli {
    /// Worker cap for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random draw of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pearson correlation of pixel-space and latent-space temporal deltas.
    AnalyzeCorr(AnalyzeCorr),
    /// Threshold-substitution sweep over a latent grid.
    Compress(Compress),
    /// Keep mask for a latent grid.
    Prune(Prune),
    /// Rebuild a full grid from kept patches and their mask.
    Restore(Restore),
    /// Recovered attention against exact attention on synthetic tokens.
    RecoverBench(RecoverBench),
    /// Moments of noise quadratic forms.
    NoiseStats(NoiseStats),
    /// Prune, denoise with the toy model and restore.
    Pipeline(Pipeline),
    /// Latency of the pruned toy denoiser against the kept fraction.
    LatencySweep(LatencySweep),
    /// Write a synthetic latent grid.
    Synth(Synth),
}

#[derive(Args)]
struct AnalyzeCorr {
    #[arg(long)]
    pixel: PathBuf,
    #[arg(long)]
    latent: PathBuf,
    /// Latent patch extents `t,h,w`.
    #[arg(long, default_value = "2,2,2", value_parser = parse_patch)]
    patch: PatchDims,
    /// Pixel patch extents `t,h,w`.
    #[arg(long, default_value = "2,2,2", value_parser = parse_patch)]
    pixel_patch: PatchDims,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Compress {
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated thresholds; `inf` is accepted.
    #[arg(long, value_delimiter = ',', required = true)]
    thetas: Vec<f64>,
    #[arg(long, default_value = "2,2,2", value_parser = parse_patch)]
    patch: PatchDims,
    /// Write the grid compressed at `--compressed-theta` (default: the last threshold).
    #[arg(long)]
    compressed_out: Option<PathBuf>,
    #[arg(long)]
    compressed_theta: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Prune {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    tau1: f64,
    #[arg(long, default_value_t = 0.3)]
    tau2: f64,
    #[arg(long, default_value_t = 3)]
    block_size: usize,
    #[arg(long, default_value = "2,2,2", value_parser = parse_patch)]
    patch: PatchDims,
    /// Mask destination (u8 LTNS).
    #[arg(long)]
    out: PathBuf,
    /// Kept patches as an LTNS tensor of shape `(K, pt, ph, pw, C)`.
    #[arg(long)]
    kept_out: Option<PathBuf>,
    /// Directory for every intermediate mask.
    #[arg(long)]
    emit_stages: Option<PathBuf>,
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct Restore {
    /// Kept patches, shape `(K, pt, ph, pw, C)`.
    #[arg(long)]
    kept: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecoverBench {
    #[arg(long, default_value_t = 1024)]
    tokens: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// `first-frame`, `ends`, `every:K` or `random:P`.
    #[arg(long, default_value = "first-frame")]
    prune_pattern: String,
    #[arg(long, default_value = "all")]
    m: Degree,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    noise_aware: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    causal: bool,
    /// Temporal drift of the clean tokens.
    #[arg(long, default_value_t = 0.0)]
    drift: f64,
    /// Observation noise on top of the clean tokens.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Fail with exit code 3 when the largest relative error exceeds this.
    #[arg(long)]
    max_rel_error: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NoiseStats {
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// `identity`, `random` or the path of a `(D, D)` f32 LTNS file.
    #[arg(long, default_value = "identity")]
    w: String,
    /// Comma-separated token counts; switches to the aggregation sweep.
    #[arg(long, value_delimiter = ',')]
    aggregate: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Pipeline {
    #[arg(long)]
    input: Option<PathBuf>,
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct LatencySweep {
    #[arg(long, default_value_t = 12)]
    blocks: usize,
    #[arg(long, default_value_t = 4096)]
    tokens: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// `start:end:count`, evenly spaced.
    #[arg(long, default_value = "0.2:1.0:5", value_parser = parse_range)]
    fractions: Fractions,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Synth {
    #[arg(long, default_value = "moving-square")]
    kind: FixtureKind,
    /// `t,h,w,c`.
    #[arg(long, default_value = "16,16,16,2", value_parser = parse_dims)]
    dims: [usize; 4],
    #[arg(long, default_value = "2,2,2", value_parser = parse_patch)]
    patch: PatchDims,
    #[arg(long, default_value_t = 1.0)]
    square_value: f32,
    #[arg(long, default_value_t = 0.0)]
    sigma: f32,
    #[arg(long, default_value_t = 0.8)]
    slope: f64,
    /// Destination; the pixel grid for `linear-gaussian-pair`.
    #[arg(long)]
    out: PathBuf,
    /// Latent grid destination for `linear-gaussian-pair`.
    #[arg(long)]
    latent_out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::ZeroVariance(_) | Error::TimerResolution(_) | Error::NoVisibleKeys(_) | Error::CacheMiss { .. } => {
                Failure::Numerical(e.to_string())
            }
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn parse_patch(s: &str) -> Result<PatchDims, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [pt, ph, pw] => PatchDims::new(pt, ph, pw).map_err(|e| e.to_string()),
        _ => Err(format!("expected t,h,w, got '{s}'")),
    }
}

fn parse_dims(s: &str) -> Result<[usize; 4], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected t,h,w,c, got '{s}'"))
}

#[derive(Debug, Clone)]
struct Fractions(Vec<f64>);

fn parse_range(s: &str) -> Result<Fractions, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, n] = parts[..] else {
        return Err(format!("expected start:end:count, got '{s}'"));
    };
    let a: f64 = a.parse().map_err(|e| format!("'{a}': {e}"))?;
    let b: f64 = b.parse().map_err(|e| format!("'{b}': {e}"))?;
    let n: usize = n.parse().map_err(|e| format!("'{n}': {e}"))?;
    match n {
        0 => Err("count must be >= 1".into()),
        1 => Ok(Fractions(vec![a])),
        _ => Ok(Fractions((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect())),
    }
}

fn read_grid(path: &Path) -> Result<LatentGrid, Failure> {
    Ok(Tensor::read_path(path)?.into_grid()?)
}

fn emit<T: Report>(report: &T, out: Option<&Path>) -> CliResult {
    match out {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            emit_json(report, &mut w)?;
            writeln!(w)?;
            w.flush()?;
        }
        None => {
            let mut w = io::stdout().lock();
            emit_json(report, &mut w)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

fn analyze_corr(a: AnalyzeCorr) -> CliResult {
    let pixel = temporal_delta_l1(&patchify(&read_grid(&a.pixel)?, a.pixel_patch)?)?;
    let latent = temporal_delta_l1(&patchify(&read_grid(&a.latent)?, a.patch)?)?;
    emit(&pixel_latent_correlation(&pixel, &latent)?, a.out.as_deref())
}

fn compress(a: Compress) -> CliResult {
    let patches = patchify(&read_grid(&a.input)?, a.patch)?;
    let sweep = compression_sweep(&patches, &a.thetas)?;
    if let Some(path) = &a.compressed_out {
        let theta = a.compressed_theta.unwrap_or(*a.thetas.last().expect("clap requires one threshold"));
        let (grid, _) = compress_latents(&patches, theta)?;
        Tensor::from_grid(&lipar::unpatchify(&grid)?).write_path(path)?;
    }
    emit(&sweep, a.out.as_deref())
}

fn prune(a: Prune) -> CliResult {
    let cfg = PruneConfig {
        tau1: a.tau1,
        tau2: a.tau2,
        block_size: a.block_size,
        patch_dims: a.patch,
        ..Default::default()
    };
    let patches = patchify(&read_grid(&a.input)?, a.patch)?;
    let stages = lif_prune_stages(&patches, &cfg)?;
    let mask = KeepMaskSequence::new(stages.dims, stages.dilated.clone())?;
    Tensor::from_mask(&mask).write_path(&a.out)?;
    if let Some(path) = &a.kept_out {
        let set = extract_kept(&patches, &mask)?;
        let p = set.patch_dims;
        let shape = vec![mask.kept_count(), p.pt, p.ph, p.pw, set.channels];
        Tensor::new(shape, TensorData::F32(set.kept))?.write_path(path)?;
    }
    if let Some(dir) = &a.emit_stages {
        fs::create_dir_all(dir)?;
        let bools = |v: &[bool]| TensorData::U8(v.iter().map(|&b| b as u8).collect());
        for (name, v) in [
            ("short", &stages.short),
            ("long", &stages.long),
            ("combined", &stages.combined),
            ("median", &stages.median),
            ("closed", &stages.closed),
            ("dilated", &stages.dilated),
        ] {
            Tensor::new(stages.dims.to_vec(), bools(v))?.write_path(dir.join(format!("{name}.ltns")))?;
        }
        for (name, stage) in [("short", &stages.short_stage), ("long", &stages.long_stage)] {
            if let Some(s) = stage {
                let f32s = |v: &[f64]| TensorData::F32(v.iter().map(|&x| x as f32).collect());
                Tensor::new(s.dims.to_vec(), f32s(&s.raw_diff))?.write_path(dir.join(format!("{name}_raw_diff.ltns")))?;
                Tensor::new(s.dims.to_vec(), f32s(&s.smoothed_diff))?
                    .write_path(dir.join(format!("{name}_smoothed_diff.ltns")))?;
            }
        }
    }
    emit(&PruneStats::from_mask(&mask), a.stats.as_deref())
}

fn restore_cmd(a: Restore) -> CliResult {
    let mask = Tensor::read_path(&a.mask)?.into_mask()?;
    let kept = Tensor::read_path(&a.kept)?;
    let [_, pt, ph, pw, c] = kept.shape[..] else {
        return Err(Failure::Validation(format!(
            "kept tensor must have shape (K, pt, ph, pw, C), got {:?}",
            kept.shape
        )));
    };
    let TensorData::F32(data) = kept.data else {
        return Err(Failure::Validation("kept tensor must hold f32 values".into()));
    };
    let set = PrunedPatchSet::new(mask, PatchDims::new(pt, ph, pw)?, c, data)?;
    Tensor::from_grid(&lipar::unpatchify(&restore(&set)?)?).write_path(&a.out)?;
    Ok(())
}

fn pattern_mask(pattern: &str, grid: [usize; 3], seed: u64) -> Result<KeepMaskSequence, Failure> {
    let [t, hp, wp] = grid;
    let per = hp * wp;
    let frame_mask = |keep: &dyn Fn(usize) -> bool| {
        KeepMaskSequence::new(grid, (0..t * per).map(|i| keep(i / per)).collect())
    };
    let (name, arg) = pattern.split_once(':').unwrap_or((pattern, ""));
    let mask = match (name, arg) {
        ("first-frame", "") => KeepMaskSequence::first_frame_only(grid),
        ("ends", "") => frame_mask(&|f| f == 0 || f + 1 == t)?,
        ("every", k) => {
            let k: usize = k.parse().map_err(|_| Failure::Validation(format!("bad frame stride '{k}'")))?;
            if k == 0 {
                return Err(Failure::Validation("frame stride must be >= 1".into()));
            }
            frame_mask(&|f| f % k == 0)?
        }
        ("random", p) => {
            let p: f64 = p.parse().map_err(|_| Failure::Validation(format!("bad keep probability '{p}'")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Failure::Validation(format!("keep probability {p} outside [0, 1]")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            KeepMaskSequence::new(grid, (0..t * per).map(|i| i < per || rng.random_bool(p)).collect())?
        }
        _ => return Err(Failure::Validation(format!("unknown prune pattern '{pattern}'"))),
    };
    Ok(mask)
}

fn recover_bench(a: RecoverBench, seed: u64) -> CliResult {
    if a.heads == 0 || a.dim % a.heads != 0 {
        return Err(Failure::Validation(format!("dim {} does not split into {} heads", a.dim, a.heads)));
    }
    let grid = token_grid(a.tokens, a.frames)?;
    let head_dim = a.dim / a.heads;
    let fixture = RecoveryFixture {
        frames: grid[0],
        hp: grid[1],
        wp: grid[2],
        heads: HeadConfig::new(a.heads, head_dim)?,
        rope: RoPEConfig::for_head(head_dim),
        causal: a.causal,
        drift: a.drift,
        noise: a.noise,
        qk_coupling: 0.0,
        latest_queries: false,
        seed,
    };
    let mask = pattern_mask(&a.prune_pattern, grid, seed)?;
    let cfg = RecoveryConfig {
        m: a.m,
        noise_aware: a.noise_aware,
    };
    cfg.validate()?;
    let report = recovery_error(&fixture, &mask, &cfg)?;
    emit(&report, a.out.as_deref())?;
    match a.max_rel_error {
        Some(tol) if !(report.max_rel_error <= tol) => Err(Failure::Numerical(format!(
            "max relative error {:.3e} exceeds {tol:.3e}",
            report.max_rel_error
        ))),
        _ => Ok(()),
    }
}

fn noise_stats(a: NoiseStats, seed: u64, threads: Option<usize>) -> CliResult {
    let w = match a.w.as_str() {
        "identity" => WMatrix::Identity,
        "random" => WMatrix::random(a.dim, seed ^ 0x5EED),
        path => {
            let t = Tensor::read_path(path)?;
            if t.shape != [a.dim, a.dim] {
                return Err(Failure::Validation(format!("W has shape {:?}, expected [{}, {}]", t.shape, a.dim, a.dim)));
            }
            WMatrix::Dense(t.as_f32()?.iter().map(|&x| x as f64).collect())
        }
    };
    let mut model = NoiseModel::new(a.dim, w, a.samples, seed)?;
    if let Some(n) = threads {
        model.threads = n.max(1);
    }
    if a.aggregate.is_empty() {
        emit(&moment_pair(&model)?, a.out.as_deref())
    } else {
        let reports = [
            aggregation_sweep(&model, &a.aggregate, false)?,
            aggregation_sweep(&model, &a.aggregate, true)?,
        ];
        emit(&AggregationPair(reports), a.out.as_deref())
    }
}

#[derive(serde::Serialize)]
#[serde(transparent)]
struct AggregationPair([lipar::noise::AggregationReport; 2]);

impl Report for AggregationPair {
    const KIND: &'static str = "aggregation-variance-pair";
}

fn pipeline(a: Pipeline, seed: Option<u64>, threads: Option<usize>) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.input = a.input.or(cfg.input);
    cfg.output = a.out.or(cfg.output);
    cfg.stats = a.stats.or(cfg.stats);
    if let Some(s) = seed {
        cfg.noise_seed = s;
    }
    if let Some(n) = threads {
        cfg.denoiser.threads = n.max(1);
    }
    let input = cfg.input.clone().ok_or_else(|| Failure::Validation("no input given (--input or config)".into()))?;
    let output = cfg.output.clone().ok_or_else(|| Failure::Validation("no output given (--out or config)".into()))?;
    let (restored, stats) = lipar::run_pipeline(&read_grid(&input)?, &cfg.pipeline())?;
    Tensor::from_grid(&restored).write_path(&output)?;
    emit(&stats, cfg.stats.as_deref())
}

fn latency(a: LatencySweep, seed: u64) -> CliResult {
    if a.heads == 0 || a.dim % a.heads != 0 {
        return Err(Failure::Validation(format!("dim {} does not split into {} heads", a.dim, a.heads)));
    }
    let cfg = ToyDenoiserConfig {
        n_blocks: a.blocks,
        model_dim: a.dim,
        n_heads: a.heads,
        mlp_hidden: 2 * a.dim,
        rope: RoPEConfig::for_head(a.dim / a.heads),
        seed,
        ..latency_denoiser()
    };
    let curve = latency_sweep(&cfg, token_grid(a.tokens, a.frames)?, &a.fractions.0, a.runs)?;
    if let Some(p) = &a.csv {
        let mut w = BufWriter::new(File::create(p)?);
        latency_csv(&curve, &mut w)?;
        w.flush()?;
    }
    emit(&curve, a.out.as_deref())
}

fn synth(a: Synth, seed: u64) -> CliResult {
    let spec = FixtureSpec {
        kind: a.kind,
        dims: a.dims,
        patch_dims: a.patch,
        square_value: a.square_value,
        noise_sigma: a.sigma,
        slope: a.slope,
        seed,
    };
    match synth_fixture(&spec)? {
        Fixture::Single(g) => Tensor::from_grid(&g).write_path(&a.out)?,
        Fixture::Pair(px, lat) => {
            let latent_out = a
                .latent_out
                .ok_or_else(|| Failure::Validation("linear-gaussian-pair needs --latent-out".into()))?;
            Tensor::from_grid(&px).write_path(&a.out)?;
            Tensor::from_grid(&lat).write_path(&latent_out)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let seed = cli.seed.unwrap_or(0);
    match cli.cmd {
        Command::AnalyzeCorr(a) => analyze_corr(a),
        Command::Compress(a) => compress(a),
        Command::Prune(a) => prune(a),
        Command::Restore(a) => restore_cmd(a),
        Command::RecoverBench(a) => recover_bench(a, seed),
        Command::NoiseStats(a) => noise_stats(a, seed, cli.threads),
        Command::Pipeline(a) => pipeline(a, cli.seed, cli.threads),
        Command::LatencySweep(a) => latency(a, seed),
        Command::Synth(a) => synth(a, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical check failed: {msg}");
            ExitCode::from(3)
        }
    }
}
