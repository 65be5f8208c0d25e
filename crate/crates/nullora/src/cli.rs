//! The `nullora` command line: `analyze`, `init`, `train`, `verify`, `merge`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 invariant
//! failure (verify only), 4 training divergence. Human-readable output goes
//! to stdout; machine output only via `--json` / `--log`.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::adapter::{AdapterError, AdapterLayer, AdapterMode, TolProfile};
use crate::io::{
    self, read_tensor_file, write_tensor_file, AdapterMeta, IoError, LayerAnalysis, LayerMeta,
    VerifyLayerReport, VerifyReport,
};
use crate::matrix::DenseMatrix;
use crate::numerics::{derive_seed, DEFAULT_TAU};
use crate::training::{self, gen_planted_task, OptimizerKind, TrainConfig, TrainingError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Invariant(String),
    Diverged(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Invariant(_) => EXIT_INVARIANT,
            CliError::Diverged(_) => EXIT_DIVERGED,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m)
            | CliError::Data(m)
            | CliError::Invariant(m)
            | CliError::Diverged(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainingError::InvalidConfig { .. } | TrainingError::InvalidTask { .. } => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "nullora",
    version,
    about = "Null-space constrained low-rank adaptation for dense weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank/nullity analysis of every weight in an NLRT checkpoint
    Analyze(AnalyzeArgs),
    /// Initialize an adapter for every eligible layer of a checkpoint
    Init(InitArgs),
    /// Train an adapter on a planted or file-backed task
    Train(TrainArgs),
    /// Check adapter invariants against a checkpoint
    Verify(VerifyArgs),
    /// Merge an adapter into its checkpoint
    Merge(MergeArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// NLRT checkpoint of 2-D weights
    ckpt: PathBuf,
    /// Relative zero threshold for singular values
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Write the per-layer report as a JSON array to this path
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Null,
    Ablation,
    Lora,
}

impl ModeArg {
    fn as_adapter_mode(self) -> AdapterMode {
        match self {
            ModeArg::Null => AdapterMode::NullLora,
            ModeArg::Ablation => AdapterMode::AblationRandom,
            ModeArg::Lora => AdapterMode::VanillaLora,
        }
    }
}

#[derive(Args)]
struct InitArgs {
    /// NLRT checkpoint supplying the frozen weights
    ckpt: PathBuf,
    /// Output adapter path
    #[arg(long)]
    out: PathBuf,
    /// Initialization mode
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Relative zero threshold for singular values (null mode)
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Cap on the self-adapted rank (null mode)
    #[arg(long)]
    max_rank: Option<usize>,
    /// Fixed adapter rank (ablation and lora modes)
    #[arg(long)]
    rank: Option<usize>,
    /// Seed for random frozen bases / LoRA init
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptArg {
    Sgd,
    Adamw,
}

#[derive(Args)]
struct TrainArgs {
    /// NLRT checkpoint the adapter was initialized from
    #[arg(long)]
    ckpt: PathBuf,
    /// Adapter to train; rewritten in place on success
    #[arg(long)]
    adapter: PathBuf,
    /// Task: planted:<d_out>x<d_in>:<nullity>:<n_samples> or data:<file.nlrt>
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = OptArg::Adamw)]
    optimizer: OptArg,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the training history as CSV to this path
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
enum TolArg {
    #[default]
    Default,
    Strict,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    adapter: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    tol_profile: TolArg,
    /// Write the invariant report as JSON to this path
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    adapter: PathBuf,
    /// Output path for the merged checkpoint
    #[arg(long)]
    out: PathBuf,
}

/// Parses arguments and runs one command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Init(args) => cmd_init(args),
        Command::Train(args) => cmd_train(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Merge(args) => cmd_merge(args),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

/// Output paths are validated before any heavy work starts.
fn ensure_writable_dir(path: &std::path::Path) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => std::path::Path::new("."),
    };
    if !dir.is_dir() {
        return Err(CliError::Data(format!(
            "output directory '{}' does not exist",
            dir.display()
        )));
    }
    Ok(())
}

/// NULLORA_THREADS bounds worker parallelism; results never depend on it.
fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("NULLORA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        CliError::Usage(format!(
            "NULLORA_THREADS must be a positive integer, got '{raw}'"
        ))
    })?;
    if n == 0 {
        return Err(CliError::Usage(
            "NULLORA_THREADS must be a positive integer".into(),
        ));
    }
    #[cfg(feature = "parallel")]
    {
        // Ignore failure: the global pool may already exist in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    if args.tau.is_nan() || args.tau <= 0.0 {
        return Err(CliError::Usage("--tau must be > 0".into()));
    }
    if let Some(path) = &args.json {
        ensure_writable_dir(path)?;
    }
    let file = read_tensor_file(&args.ckpt)?;
    let mut reports: Vec<LayerAnalysis> = Vec::new();
    for (name, entry) in file.entries() {
        let report = io::analyze_layer(name, &entry.matrix, args.tau)
            .map_err(|e| CliError::Data(format!("layer '{name}': {e}")))?;
        reports.push(report);
    }

    println!(
        "{:<20} {:>11} {:>6} {:>8} {:>8} {:>12} {:>12} {:>11}",
        "layer", "shape", "rank", "null_l", "null_r", "sigma_max", "sigma_min", "deficiency"
    );
    for r in &reports {
        println!(
            "{:<20} {:>11} {:>6} {:>8} {:>8} {:>12.5e} {:>12.5e} {:>10.2}%",
            r.name,
            format!("{}x{}", r.d_out, r.d_in),
            r.rank,
            r.nullity_left,
            r.nullity_right,
            r.sigma_max,
            r.sigma_min,
            r.deficiency_pct
        );
    }
    let mean = if reports.is_empty() {
        0.0
    } else {
        reports.iter().map(|r| r.deficiency_pct).sum::<f64>() / reports.len() as f64
    };
    println!("mean deficiency: {mean:.2}% over {} layers (tau = {:e})", reports.len(), args.tau);

    if let Some(path) = &args.json {
        let json = serde_json::to_string(&reports).expect("report serialization");
        fs::write(path, json + "\n").map_err(|e| {
            CliError::Data(format!("{}: {e}", path.display()))
        })?;
    }
    Ok(())
}

fn cmd_init(args: InitArgs) -> Result<(), CliError> {
    if args.tau.is_nan() || args.tau <= 0.0 {
        return Err(CliError::Usage("--tau must be > 0".into()));
    }
    let mode = args.mode.as_adapter_mode();
    let rank = match args.mode {
        ModeArg::Null => {
            if args.rank.is_some() {
                return Err(CliError::Usage(
                    "--rank does not apply in null mode (the rank is self-adapted); use --max-rank to cap it"
                        .into(),
                ));
            }
            0
        }
        ModeArg::Ablation | ModeArg::Lora => {
            if args.max_rank.is_some() {
                return Err(CliError::Usage(
                    "--max-rank only applies in null mode; use --rank".into(),
                ));
            }
            args.rank
                .ok_or_else(|| CliError::Usage("--rank is required in ablation and lora modes".into()))?
        }
    };

    ensure_writable_dir(&args.out)?;
    let ckpt = read_tensor_file(&args.ckpt)?;
    let mut layers: Vec<AdapterLayer> = Vec::new();
    let mut layer_metas: Vec<LayerMeta> = Vec::new();
    for (idx, (name, entry)) in ckpt.entries().enumerate() {
        let w0 = entry.matrix.clone();
        let (d_out, d_in) = (w0.rows(), w0.cols());
        let layer = match args.mode {
            ModeArg::Null => AdapterLayer::init_null_lora(name, w0, args.tau, args.max_rank)
                .map_err(|e| CliError::Data(e.to_string()))?,
            ModeArg::Ablation => Some(
                AdapterLayer::init_ablation(name, w0, rank, derive_seed(args.seed, idx as u64))
                    .map_err(init_rank_error)?,
            ),
            ModeArg::Lora => Some(
                AdapterLayer::init_vanilla_lora(name, w0, rank, derive_seed(args.seed, idx as u64))
                    .map_err(init_rank_error)?,
            ),
        };
        match layer {
            Some(layer) => {
                println!(
                    "{name}: r = {}, trainable parameters = {}",
                    layer.rank(),
                    layer.trainable_count()
                );
                layer_metas.push(LayerMeta {
                    name: name.clone(),
                    r: layer.rank(),
                    d_out,
                    d_in,
                    skipped: false,
                });
                layers.push(layer);
            }
            None => {
                println!("{name}: skipped (full rank at tau = {:e})", args.tau);
                layer_metas.push(LayerMeta {
                    name: name.clone(),
                    r: 0,
                    d_out,
                    d_in,
                    skipped: true,
                });
            }
        }
    }
    if layers.is_empty() {
        println!("warning: every layer is full-rank; the adapter holds metadata only");
    }
    let total: usize = layers.iter().map(|l| l.trainable_count()).sum();
    println!("total trainable parameters: {total}");

    let meta = AdapterMeta {
        format_version: 1,
        mode: mode.as_str().to_string(),
        tau: args.tau,
        seed: args.seed,
        layers: layer_metas,
        lora_alpha: None,
    };
    io::save_adapter(&args.out, &layers, &meta)?;
    println!("wrote adapter to {}", args.out.display());
    Ok(())
}

fn init_rank_error(e: AdapterError) -> CliError {
    match e {
        AdapterError::RankNotEven { .. } | AdapterError::RankTooLarge { .. } => {
            CliError::Usage(e.to_string())
        }
        other => CliError::Data(other.to_string()),
    }
}

enum TaskSpec {
    Planted {
        d_out: usize,
        d_in: usize,
        nullity: usize,
        n_samples: usize,
    },
    Data(PathBuf),
}

fn parse_task(spec: &str) -> Result<TaskSpec, CliError> {
    let usage = || {
        CliError::Usage(format!(
            "invalid task '{spec}': expected planted:<d_out>x<d_in>:<nullity>:<n_samples> or data:<file.nlrt>"
        ))
    };
    if let Some(rest) = spec.strip_prefix("planted:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let [dims, nullity, n_samples] = parts.as_slice() else {
            return Err(usage());
        };
        let (d_out, d_in) = dims.split_once('x').ok_or_else(usage)?;
        Ok(TaskSpec::Planted {
            d_out: d_out.parse().map_err(|_| usage())?,
            d_in: d_in.parse().map_err(|_| usage())?,
            nullity: nullity.parse().map_err(|_| usage())?,
            n_samples: n_samples.parse().map_err(|_| usage())?,
        })
    } else if let Some(path) = spec.strip_prefix("data:") {
        if path.is_empty() {
            return Err(usage());
        }
        Ok(TaskSpec::Data(PathBuf::from(path)))
    } else {
        Err(usage())
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let task_spec = parse_task(&args.task)?;
    if let Some(path) = &args.log {
        ensure_writable_dir(path)?;
    }
    let ckpt = read_tensor_file(&args.ckpt)?;
    let (mut layers, meta) = io::load_adapter(&args.adapter, &ckpt)?;

    let active: Vec<usize> = (0..layers.len()).collect();
    if active.len() != 1 {
        return Err(CliError::Usage(format!(
            "train expects an adapter with exactly one non-skipped layer, found {}",
            active.len()
        )));
    }
    let layer = &mut layers[0];

    let (inputs, targets) = match task_spec {
        TaskSpec::Planted {
            d_out,
            d_in,
            nullity,
            n_samples,
        } => {
            let task = gen_planted_task(d_out, d_in, nullity, n_samples, args.seed)?;
            if task.w0.rows() != layer.d_out() || task.w0.cols() != layer.d_in() {
                return Err(CliError::Data(format!(
                    "planted task is {}x{} but layer '{}' is {}x{}",
                    d_out,
                    d_in,
                    layer.name(),
                    layer.d_out(),
                    layer.d_in()
                )));
            }
            if task.w0.data() != layer.w0().data() {
                return Err(CliError::Data(format!(
                    "checkpoint layer '{}' does not match the planted task weight; \
                     regenerate the checkpoint with the same task and seed",
                    layer.name()
                )));
            }
            (task.inputs, task.targets)
        }
        TaskSpec::Data(path) => {
            let data = read_tensor_file(&path)?;
            let fetch = |name: &str| -> Result<DenseMatrix, CliError> {
                data.get(name)
                    .map(|e| e.matrix.clone())
                    .ok_or_else(|| CliError::Data(format!("{}: missing tensor '{name}'", path.display())))
            };
            (fetch("inputs")?, fetch("targets")?)
        }
    };

    let cfg = TrainConfig {
        steps: args.steps,
        batch_size: args.batch,
        learning_rate: args.lr,
        optimizer: match args.optimizer {
            OptArg::Sgd => OptimizerKind::Sgd,
            OptArg::Adamw => OptimizerKind::AdamW,
        },
        weight_decay: args.weight_decay,
        seed: args.seed,
        decay_exempt_s: true,
        log_every: 50,
    };
    let history = training::train(layer, &inputs, &targets, &cfg)?;
    let last = history.records.last().expect("history has records");
    println!(
        "trained '{}' for {} steps: final loss {:e}, null residual {:e}",
        layer.name(),
        args.steps,
        last.loss,
        last.null_residual
    );

    io::save_adapter(&args.adapter, &layers, &meta)?;
    if let Some(path) = &args.log {
        let mut buf = Vec::new();
        history.write_csv(&mut buf).expect("csv to memory");
        fs::write(path, buf).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<(), CliError> {
    if let Some(path) = &args.json {
        ensure_writable_dir(path)?;
    }
    let ckpt = read_tensor_file(&args.ckpt)?;
    let (layers, meta) = io::load_adapter(&args.adapter, &ckpt).map_err(|e| match e {
        IoError::InvariantViolation { .. } => CliError::Invariant(e.to_string()),
        other => CliError::Data(other.to_string()),
    })?;
    let profile = match args.tol_profile {
        TolArg::Default => TolProfile::Default,
        TolArg::Strict => TolProfile::Strict,
    };

    let mut layer_reports = Vec::new();
    let mut all_pass = true;
    for layer in &layers {
        let report = layer.verify_invariants(profile);
        for (check, result) in &report.checks {
            println!(
                "{:<12} {:<26} measured = {:>12.3e}  tolerance = {:>9.1e}  {}",
                layer.name(),
                check,
                result.measured,
                result.tolerance,
                if result.pass { "PASS" } else { "FAIL" }
            );
        }
        if layer.mode() != AdapterMode::NullLora {
            println!(
                "{:<12} null-space checks: not applicable (mode = {})",
                layer.name(),
                layer.mode().as_str()
            );
        }
        all_pass &= report.pass();
        layer_reports.push(VerifyLayerReport {
            name: layer.name().to_string(),
            mode: layer.mode().as_str().to_string(),
            pass: report.pass(),
            checks: report.checks,
        });
    }
    let skipped = meta.layers.iter().filter(|l| l.skipped).count();
    if skipped > 0 {
        println!("{skipped} layer(s) skipped at init (full rank), nothing to verify");
    }
    println!("overall: {}", if all_pass { "PASS" } else { "FAIL" });

    if let Some(path) = &args.json {
        let report = VerifyReport {
            layers: layer_reports,
            pass: all_pass,
        };
        let json = serde_json::to_string(&report).expect("report serialization");
        fs::write(path, json + "\n")
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }

    if all_pass {
        Ok(())
    } else {
        Err(CliError::Invariant("invariant checks failed".into()))
    }
}

fn cmd_merge(args: MergeArgs) -> Result<(), CliError> {
    ensure_writable_dir(&args.out)?;
    let ckpt = read_tensor_file(&args.ckpt)?;
    let (layers, meta) = io::load_adapter(&args.adapter, &ckpt)?;
    let mut merged = ckpt.clone();
    for layer in &layers {
        merged.replace(layer.name(), layer.merge())?;
        println!("merged '{}' (r = {})", layer.name(), layer.rank());
    }
    let skipped = meta.layers.iter().filter(|l| l.skipped).count();
    if skipped > 0 {
        println!("{skipped} layer(s) copied unchanged (skipped at init)");
    }
    write_tensor_file(&args.out, &merged)?;
    println!("wrote merged checkpoint to {}", args.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_grammar() {
        match parse_task("planted:64x64:8:512").unwrap() {
            TaskSpec::Planted {
                d_out,
                d_in,
                nullity,
                n_samples,
            } => {
                assert_eq!((d_out, d_in, nullity, n_samples), (64, 64, 8, 512));
            }
            TaskSpec::Data(_) => panic!("wrong variant"),
        }
        match parse_task("data:tasks/regression.nlrt").unwrap() {
            TaskSpec::Data(p) => assert_eq!(p, PathBuf::from("tasks/regression.nlrt")),
            TaskSpec::Planted { .. } => panic!("wrong variant"),
        }
        assert!(parse_task("planted:64x64:8").is_err());
        assert!(parse_task("planted:64:8:512").is_err());
        assert!(parse_task("magic:1").is_err());
        assert!(parse_task("data:").is_err());
    }

    #[test]
    fn unknown_flags_are_usage_errors() {
        let code = run(["nullora", "analyze", "x.nlrt", "--bogus"]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["nullora", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_file_is_data_error() {
        let code = run(["nullora", "analyze", "/nonexistent/definitely-missing.nlrt"]);
        assert_eq!(code, EXIT_DATA);
    }
}
