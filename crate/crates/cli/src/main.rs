use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lorafa_core::gradcheck::{max_error, random_shape_suite, tiny_model_suite, MODEL_TOLERANCE, OP_TOLERANCE};
use lorafa_core::harness::{
    equivalence_suite, memreport, sweep, train_run, CellStatus, EquivOptions, MemReportRequest, RunConfig,
    SweepSpec, TaskKind,
};
use lorafa_core::memory::Modifiers;
use lorafa_core::optim::{AdamWConfig, SgdConfig};
use lorafa_core::{AdaptationMode, Error, ModelConfig, OptimizerConfig};

mod exit;

use exit::CliError;

#[derive(Parser, Debug)]
#[command(name = "lorafa", version, about = "Frozen-A low-rank adaptation: training, sweeps, memory and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration and write its report.
    Train(TrainArgs),
    /// Train every rank × learning-rate cell.
    Sweep(SweepArgs),
    /// Print the memory breakdown for a geometry.
    Memreport(MemArgs),
    /// Run the gradient-compression equivalence checks.
    Equiv(EquivArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradArgs),
}

#[derive(Args, Debug, Clone)]
struct RunFlags {
    /// JSON run config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<AdaptationMode>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    a_std: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// `adamw` or `sgd`.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    eval_examples: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    equiv_every: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Where to write the JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long, value_delimiter = ',', required = true)]
    ranks: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    lrs: Vec<f64>,
    #[arg(long, default_value = "sweep.json")]
    out_json: PathBuf,
    #[arg(long, default_value = "sweep.csv")]
    out_csv: PathBuf,
}

#[derive(Args, Debug)]
struct MemArgs {
    #[arg(long, default_value_t = 4096)]
    d: usize,
    #[arg(long, default_value_t = 32)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    heads: usize,
    #[arg(long, default_value_t = 32000)]
    vocab: usize,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    rank: usize,
    #[arg(long, value_delimiter = ',', default_value = "ft,lora,lora-fa")]
    modes: Vec<AdaptationMode>,
    #[arg(long, default_value_t = 16)]
    weight_bits: u32,
    #[arg(long, default_value_t = 1)]
    shards: u32,
    #[arg(long)]
    full_recompute: bool,
    /// Build the model and meter one forward pass (small geometries only).
    #[arg(long)]
    probe: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EquivArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    layers: usize,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 100)]
    train_steps: usize,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    shapes: usize,
}

fn build_config(flags: &RunFlags) -> Result<RunConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::new(AdaptationMode::LoraFa, TaskKind::Copy),
    };
    if let Some(kind) = &flags.optimizer {
        let lr = cfg.optimizer.lr();
        cfg.optimizer = match kind.as_str() {
            "adamw" => OptimizerConfig::AdamW(AdamWConfig::new(lr)),
            "sgd" => OptimizerConfig::Sgd(SgdConfig { lr }),
            other => return Err(CliError::Config(format!("unknown optimizer {other:?}"))),
        };
    }
    if let Some(lr) = flags.lr {
        cfg.optimizer = cfg.optimizer.with_lr(lr);
    }
    if let Some(wd) = flags.weight_decay {
        match &mut cfg.optimizer {
            OptimizerConfig::AdamW(c) => c.weight_decay = wd,
            OptimizerConfig::Sgd(_) => return Err(CliError::Config("weight decay needs adamw".into())),
        }
    }
    let m: &mut ModelConfig = &mut cfg.model;
    macro_rules! set {
        ($($flag:ident => $field:expr),* $(,)?) => {
            $(if let Some(v) = flags.$flag { $field = v; })*
        };
    }
    set!(d => m.d, layers => m.layers, heads => m.heads, vocab => m.vocab, seq_len => m.seq_len, batch => m.batch);
    set!(mode => cfg.mode, rank => cfg.rank, a_std => cfg.a_std, seed => cfg.seed, steps => cfg.steps,
         task => cfg.task, eval_examples => cfg.eval_examples, warmup_steps => cfg.warmup_steps);
    if flags.alpha.is_some() {
        cfg.alpha = flags.alpha;
    }
    if flags.equiv_every.is_some() {
        cfg.equiv_every = flags.equiv_every;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes one line to stdout; a closed pipe ends output silently.
fn emit(line: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{line}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Io(e.to_string())),
        _ => Ok(()),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string(value).map_err(|e| CliError::Io(e.to_string()))?;
    emit(&text)
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = build_config(&args.run)?;
    if args.report.is_some() {
        cfg.report = args.report;
    }
    let report = train_run(&cfg)?;
    if let Some(path) = &cfg.report {
        std::fs::write(path, report.to_json()?).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    emit(&format!(
        "{} {} r={} lr={} steps={} initial_loss={:.6} final_loss={} trainable={} ({:.2}s)",
        cfg.task,
        cfg.mode,
        cfg.rank,
        cfg.optimizer.lr(),
        report.loss_curve.len(),
        report.initial_loss,
        report.final_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
        report.trainable.full,
        report.wall_clock_secs,
    ))?;
    if let Some(failed) = report.equivalence.iter().find(|v| !v.passed) {
        return Err(CliError::CheckFailed(format!("{} at step {}: {}", failed.check, failed.step, failed.value)));
    }
    if report.diverged() {
        return Err(CliError::Diverged(format!("{:?}", report.status)));
    }
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<(), CliError> {
    let base = build_config(&args.run)?;
    let spec = SweepSpec {
        base,
        ranks: args.ranks,
        lrs: args.lrs,
    };
    let grid = sweep(&spec)?;
    grid.save(&args.out_json, &args.out_csv)?;
    for c in &grid.cells {
        emit(&format!(
            "rank={} lr={} status={} final_loss={}",
            c.rank,
            c.lr,
            c.status.as_str(),
            c.final_loss.map_or("n/a".into(), |l| format!("{l:.6}"))
        ))?;
    }
    let failed = grid.cells.iter().filter(|c| c.status != CellStatus::Ok).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells did not complete", grid.cells.len());
    }
    Ok(())
}

fn run_memreport(args: MemArgs) -> Result<(), CliError> {
    let mut model = ModelConfig::new(args.d, args.layers, args.heads, args.vocab, args.seq_len, args.batch);
    model.d_ff = None;
    let req = MemReportRequest {
        model,
        modes: args.modes,
        rank: args.rank,
        modifiers: Modifiers {
            weight_bits: args.weight_bits,
            num_shards: args.shards,
            full_recompute: args.full_recompute,
        },
        probe: args.probe,
        seed: args.seed,
    };
    let report = memreport(&req)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    emit(&text)
}

fn run_equiv(args: EquivArgs) -> Result<(), CliError> {
    let verdicts = equivalence_suite(&EquivOptions {
        seed: args.seed,
        layers: args.layers,
        samples: args.samples,
        train_steps: args.train_steps,
    })?;
    for v in &verdicts {
        print_json(v)?;
    }
    match verdicts.iter().find(|v| !v.passed) {
        Some(v) => Err(CliError::CheckFailed(v.check.clone())),
        None => Ok(()),
    }
}

fn run_gradcheck(args: GradArgs) -> Result<(), CliError> {
    let ops = random_shape_suite(args.shapes, args.seed)?;
    let model = tiny_model_suite(args.seed)?;
    let (op_err, model_err) = (max_error(&ops), max_error(&model));
    print_json(&serde_json::json!({
        "check": "ops_and_layers",
        "shapes": args.shapes,
        "cases": ops.len(),
        "max_relative_error": op_err,
        "threshold": OP_TOLERANCE,
        "passed": op_err < OP_TOLERANCE,
    }))?;
    print_json(&serde_json::json!({
        "check": "tiny_model",
        "cases": model.len(),
        "max_relative_error": model_err,
        "threshold": MODEL_TOLERANCE,
        "passed": model_err < MODEL_TOLERANCE,
    }))?;
    if op_err >= OP_TOLERANCE || model_err >= MODEL_TOLERANCE {
        return Err(CliError::CheckFailed("gradient check".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Memreport(a) => run_memreport(a),
        Command::Equiv(a) => run_equiv(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Reconciliation(m) => CliError::Reconciliation(m),
            Error::NonFinite(op) => CliError::Diverged(format!("non-finite value in {op}")),
            Error::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}
