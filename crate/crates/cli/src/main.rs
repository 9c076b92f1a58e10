use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use quanta_core::infer::Combine;
use quanta_core::io::{
    export_pgm_frame, import_pgm_sequence, read_qbs, read_qds, write_qbs, write_qds,
};
use quanta_core::nn::{read_checkpoint, write_checkpoint, Checkpoint};
use quanta_core::train::{history_csv, Trainer, ValidationConfig};
use quanta_core::{
    metrics, multi_shot, stats, Error, InferConfig, PairMode, RandomSource, Shape3, SimConfig,
    SplitTriple, ToySceneConfig, TrainConfig,
};

#[derive(Parser)]
#[command(name = "quanta", version, about = "Self-supervised denoising of binary quanta image stacks")]
struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the built-in synthetic scene to a QDS volume.
    Toy(ToyArgs),
    /// Draw a binary stack from a dense reference.
    Simulate(SimulateArgs),
    /// Thin a binary stack into input, target and mask files.
    Split(SplitArgs),
    /// Temporal binning baseline.
    Bin(BinArgs),
    /// Train a model on a binary stack.
    Train(TrainArgs),
    /// Reconstruct intensities with a trained model.
    Infer(InferArgs),
    /// Per-frame PSNR and SSIM against a ground truth.
    Metrics(MetricsArgs),
    /// Flag and replace hot pixels in a dense volume.
    Hotfix(HotfixArgs),
    /// Run the statistical test battery.
    StatsCheck(StatsCheckArgs),
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON scene config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    /// QDS volume, or a directory of PGM frames read in name order.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Mean photons per pixel per frame.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output prefix; defaults to the input path without extension.
    #[arg(long)]
    prefix: Option<PathBuf>,
}

#[derive(Args)]
struct BinArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    window: usize,
    #[arg(long)]
    out: PathBuf,
    /// Keep the frame count, repeating each window mean over its frames.
    #[arg(long)]
    per_frame: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint of the best-validation state.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// History CSV (epoch, step, train_loss, val_loss).
    #[arg(long)]
    history: Option<PathBuf>,
    /// Checkpoint of the final state.
    #[arg(long)]
    last: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Crop size as TxHxW.
    #[arg(long, value_parser = parse_shape)]
    crop: Option<Shape3>,
    #[arg(long)]
    patience: Option<usize>,
    /// Disable the input mask in the loss.
    #[arg(long)]
    unmasked: bool,
    /// Train on one fixed split with this thinning probability.
    #[arg(long)]
    fixed_pairs: Option<f64>,
    #[arg(long)]
    no_validation: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_shape)]
    tile: Option<Shape3>,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    shot_p: Option<f64>,
    #[arg(long, value_parser = parse_combine)]
    combine: Option<Combine>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write every frame as an 8-bit PGM into this directory.
    #[arg(long)]
    pgm_dir: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Per-frame CSV output; the JSON summary always goes to stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct HotfixArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Robust z-score threshold.
    #[arg(long, default_value_t = 5.0)]
    z: f64,
}

#[derive(Args)]
struct StatsCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let err: anyhow::Error = e.into();
        let code = match err.downcast_ref::<Error>() {
            Some(Error::NonFiniteLoss { .. }) => 3,
            Some(Error::InvalidConfig(_)) => 1,
            _ => 2,
        };
        Failure { code, err }
    }
}

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, err: err.into() }
}

type Run = std::result::Result<serde_json::Value, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Run {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage(anyhow::anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(usage)?;
    }
    match cli.cmd {
        Command::Toy(a) => toy(a),
        Command::Simulate(a) => simulate(a),
        Command::Split(a) => split(a),
        Command::Bin(a) => bin(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::Hotfix(a) => hotfix(a),
        Command::StatsCheck(a) => stats_check(a),
    }
}

fn parse_shape(s: &str) -> std::result::Result<Shape3, String> {
    let dims: Vec<usize> = s
        .split(['x', 'X'])
        .map(|d| d.trim().parse::<usize>().map_err(|e| format!("{d:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match dims[..] {
        [t, h, w] => Shape3::new(t, h, w).map_err(|e| e.to_string()),
        _ => Err(format!("expected TxHxW, got {s:?}")),
    }
}

fn parse_combine(s: &str) -> std::result::Result<Combine, String> {
    match s {
        "mean" => Ok(Combine::Mean),
        "median" => Ok(Combine::Median),
        _ => Err(format!("expected mean or median, got {s:?}")),
    }
}

/// Reads a JSON config, or the default when no path is given. Schema errors
/// are usage errors.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> std::result::Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("config {}", path.display()))
        .map_err(usage)
}

fn toy(a: ToyArgs) -> Run {
    let mut cfg: ToySceneConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.frames {
        cfg.frames = v;
    }
    if let Some(v) = a.height {
        cfg.height = v;
    }
    if let Some(v) = a.width {
        cfg.width = v;
    }
    let scene = quanta_core::simulate::toy_scene(&cfg).map_err(usage)?;
    write_qds(&scene, &a.out)?;
    Ok(json!({ "out": a.out, "shape": scene.shape().to_string(), "mean": scene.mean() }))
}

fn read_reference(path: &Path) -> std::result::Result<quanta_core::DenseVolume, Failure> {
    if path.is_dir() {
        let mut frames: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
            .collect();
        frames.sort();
        if frames.is_empty() {
            return Err(anyhow::anyhow!("no .pgm files in {}", path.display()).into());
        }
        Ok(import_pgm_sequence(&frames)?)
    } else {
        Ok(read_qds(path)?)
    }
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SimFile {
    mean_rate: Option<f64>,
    seed: Option<u64>,
}

fn simulate(a: SimulateArgs) -> Run {
    let file: Option<SimFile> = match &a.config {
        Some(p) => Some(load_config::<serde_json::Value>(Some(p)).and_then(|v| {
            serde_json::from_value(v)
                .with_context(|| format!("config {}", p.display()))
                .map_err(usage)
        })?),
        None => None,
    };
    let cfg = SimConfig {
        mean_rate: a
            .rate
            .or(file.as_ref().and_then(|f| f.mean_rate))
            .ok_or_else(|| usage(anyhow::anyhow!("--rate is required")))?,
        seed: a.seed.or(file.as_ref().and_then(|f| f.seed)).unwrap_or(0),
    };
    let reference = read_reference(&a.reference)?;
    let bits = cfg.run(&reference)?;
    write_qbs(&bits, &a.out)?;
    let rate = bits.popcount() as f64 / bits.shape().len() as f64;
    Ok(json!({
        "out": a.out,
        "shape": bits.shape().to_string(),
        "mean_rate": cfg.mean_rate,
        "seed": cfg.seed,
        "activation_rate": rate,
    }))
}

fn split(a: SplitArgs) -> Run {
    let raw = read_qbs(&a.input)?;
    let mut rng = RandomSource::new(a.seed).rng();
    let triple = SplitTriple::split(&raw, a.p, &mut rng).map_err(usage)?;
    let prefix = a.prefix.unwrap_or_else(|| a.input.with_extension(""));
    let path = |part: &str| {
        let mut s = prefix.clone().into_os_string();
        s.push(format!(".{part}.qbs"));
        PathBuf::from(s)
    };
    let (pi, pt, pm) = (path("input"), path("target"), path("mask"));
    write_qbs(&triple.input, &pi)?;
    write_qbs(&triple.target, &pt)?;
    write_qbs(&triple.mask, &pm)?;
    Ok(json!({
        "input": pi,
        "target": pt,
        "mask": pm,
        "ones": { "raw": raw.popcount(), "input": triple.input.popcount(), "target": triple.target.popcount() },
    }))
}

fn bin(a: BinArgs) -> Run {
    let raw = read_qbs(&a.input)?;
    let out = if a.per_frame {
        stats::binning_estimate(&raw, a.window)
    } else {
        stats::bin_temporal(&raw, a.window)
    }
    .map_err(usage)?;
    write_qds(&out, &a.out)?;
    Ok(json!({ "out": a.out, "shape": out.shape().to_string() }))
}

fn train(a: TrainArgs) -> Run {
    let mut cfg: TrainConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.steps_per_epoch {
        cfg.steps_per_epoch = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.lr {
        cfg.optimizer.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.crop {
        cfg.sampler.crop = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = Some(v);
    }
    if a.unmasked {
        cfg.masked = false;
    }
    if let Some(p) = a.fixed_pairs {
        cfg.pairs = PairMode::Fixed { p };
    }
    if a.no_validation {
        cfg.validation = None;
    } else if cfg.validation.is_none() && a.config.is_none() {
        cfg.validation = Some(ValidationConfig::default());
    }
    let data = read_qbs(&a.data)?;
    let mut trainer = Trainer::new(&data, &cfg)?;
    loop {
        match trainer.run_epoch() {
            Ok(true) => {
                if let Some(row) = trainer.history().last() {
                    eprintln!(
                        "epoch {} step {} train {:.5} val {}",
                        row.epoch,
                        row.step,
                        row.train_loss,
                        row.val_loss.map_or("-".into(), |v| format!("{v:.5}"))
                    );
                }
            }
            Ok(false) => break,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                let mut ck = Checkpoint::new(trainer.state().clone(), cfg.seed, trainer.steps());
                ck.meta.note = Some(e.to_string());
                let mut diag = a.out.clone().into_os_string();
                diag.push(".diag");
                let diag = PathBuf::from(diag);
                write_checkpoint(&ck, &diag)?;
                eprintln!("diagnostic checkpoint written to {}", diag.display());
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        }
    }
    let outcome = trainer.finish();
    if let Some(h) = &a.history {
        fs::write(h, history_csv(&outcome.history)).with_context(|| format!("writing {}", h.display()))?;
    }
    let (best, best_step) = match &outcome.best {
        Some(b) => (&b.state, b.step),
        None => (&outcome.state, outcome.steps),
    };
    write_checkpoint(&Checkpoint::new(best.clone(), cfg.seed, best_step), &a.out)?;
    if let Some(p) = &a.last {
        write_checkpoint(&Checkpoint::new(outcome.state.clone(), cfg.seed, outcome.steps), p)?;
    }
    Ok(json!({
        "out": a.out,
        "steps": outcome.steps,
        "stopped_early": outcome.stopped_early,
        "final_train_loss": outcome.history.last().map(|r| r.train_loss),
        "best": outcome.best.as_ref().map(|b| json!({ "epoch": b.epoch, "step": b.step, "val_loss": b.val_loss })),
        "parameters": best.parameter_count(),
    }))
}

fn infer(a: InferArgs) -> Run {
    let mut cfg: InferConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.tile {
        cfg.tile = v;
    }
    if let Some(v) = a.overlap {
        cfg.overlap = v;
    }
    if let Some(v) = a.shots {
        cfg.shots = v;
    }
    if let Some(v) = a.shot_p {
        cfg.shot_p = v;
    }
    if let Some(v) = a.combine {
        cfg.combine = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate().map_err(usage)?;
    let ck = read_checkpoint(&a.model)?;
    let raw = read_qbs(&a.data)?;
    let out = multi_shot(&ck.state, &raw, &cfg)?;
    write_qds(&out, &a.out)?;
    if let Some(dir) = &a.pgm_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let peak = out.max().max(f32::MIN_POSITIVE);
        let norm = out.scaled(1.0 / peak as f64);
        for t in 0..out.shape().t {
            export_pgm_frame(&norm, t, dir.join(format!("frame_{t:05}.pgm")), 255)?;
        }
    }
    Ok(json!({ "out": a.out, "shape": out.shape().to_string(), "mean": out.mean() }))
}

fn metrics_cmd(a: MetricsArgs) -> Run {
    let pred = read_qds(&a.pred)?;
    let gt = read_qds(&a.gt)?;
    let report = metrics::metric_report(&pred, &gt)?;
    if let Some(p) = &a.csv {
        fs::write(p, report.csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(json!({
        "settings": report.settings,
        "frames": report.psnr.len(),
        "psnr": report.psnr_summary,
        "ssim": report.ssim_summary,
    }))
}

fn hotfix(a: HotfixArgs) -> Run {
    let v = read_qds(&a.input)?;
    let fix = metrics::hot_pixel_correct(&v, a.z).map_err(usage)?;
    write_qds(&fix.corrected, &a.out)?;
    Ok(json!({ "out": a.out, "flagged": fix.flagged }))
}

fn stats_check(a: StatsCheckArgs) -> Run {
    let results = stats::battery(a.seed);
    for r in &results {
        eprintln!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let value = json!({
        "passed": failed == 0,
        "checks": results.iter().map(|r| json!({ "name": r.name, "passed": r.passed, "detail": r.detail })).collect::<Vec<_>>(),
    });
    if failed > 0 {
        println!("{value}");
        return Err(Failure {
            code: 3,
            err: anyhow::anyhow!("{failed} statistical checks failed"),
        });
    }
    Ok(value)
}
