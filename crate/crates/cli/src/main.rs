use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use mmasched::conv::{build_duplicate_map, resnet50_stages};
use mmasched::experiment::{
    best_so_far_csv, coalescing_csv, read_json, run_experiment, ExperimentSpec,
};
use mmasched::explorer::{tune, ExplorerConfig, TuneTrace, Variant};
use mmasched::sim::measure;
use mmasched::warp::{
    clip_to_field, lanes_per_word, pack_lanes, pack_rounds, redistribute_packed_groups, WarpState,
};
use mmasched::{
    ConvConfig, Error, ErrorCategory, KnobSpace, MachineModel, ScheduleConfig, Workload,
};

/// Low-precision convolution scheduling on a simulated Tensor-Core GPU.
#[derive(Parser)]
#[command(name = "mmasched", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the GEMM view, operation count and duplicate statistics of a convolution.
    Lower(ConvArgs),
    /// Cost one schedule and print the measurement as JSON.
    Simulate(SimulateArgs),
    /// Search the schedule space and write the trace as JSONL.
    Tune(TuneArgs),
    /// Walk one warp through the register packing of an output tile.
    PackDemo(PackDemoArgs),
    /// Render CSV reports: best-so-far curves of a trace, or coalescing statistics.
    Report(ReportArgs),
    /// Run an ablation experiment and write traces and speedup tables.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct ConvArgs {
    /// Convolution description (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    conv: Option<PathBuf>,
    /// Built-in convolution: resnet50_stage2 .. resnet50_stage5.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    conv: ConvArgs,
    /// Schedule description (JSON).
    #[arg(long)]
    schedule: PathBuf,
    /// Machine description (JSON); defaults to the built-in T4 model.
    #[arg(long)]
    machine: Option<PathBuf>,
    /// Relative standard deviation of the measurement noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    conv: ConvArgs,
    /// Machine description (JSON); defaults to the built-in T4 model.
    #[arg(long)]
    machine: Option<PathBuf>,
    /// Knob space (JSON); defaults to the built-in space with every optimization on.
    #[arg(long)]
    space: Option<PathBuf>,
    /// Explorer settings (JSON); command-line flags override it.
    #[arg(long)]
    explorer: Option<PathBuf>,
    /// baseline or diversity.
    #[arg(long)]
    variant: Option<Variant>,
    /// Trial budget.
    #[arg(long)]
    trials: Option<usize>,
    /// Relative standard deviation of the measurement noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Measurement threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Output trace file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PackDemoArgs {
    /// Output precision in bits (4 or 8).
    #[arg(long, default_value_t = 4)]
    bits: u32,
    /// Accumulator tiles to pack and redistribute.
    #[arg(long, default_value_t = 8)]
    tiles: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Trace to render as a best-so-far CSV.
    #[arg(long, required_unless_present = "coalescing")]
    trace: Option<PathBuf>,
    /// Print fragment-load coalescing statistics of a convolution instead.
    #[arg(long)]
    coalescing: bool,
    #[arg(long)]
    conv: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    machine: Option<PathBuf>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment description (JSON); defaults to the ResNet-50 stages over
    /// every flag combination.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override the per-run trial budget.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent tuning runs; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn load_conv(conv: Option<&Path>, preset: Option<&str>) -> Result<ConvConfig> {
    if let Some(p) = conv {
        let c: ConvConfig = read_json(p)?;
        c.validate()?;
        return Ok(c);
    }
    let name = preset.context("either --conv or --preset is required")?;
    resnet50_stages()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, c)| c)
        .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")).into())
}

fn load_machine(path: Option<&Path>, conv: &ConvConfig) -> Result<MachineModel> {
    let m = match path {
        Some(p) => read_json(p)?,
        None => MachineModel::t4_for(conv.act_bits),
    };
    m.validate()?;
    Ok(m)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| {
            Error::Io {
                path: p.display().to_string(),
                source: e,
            }
            .into()
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn lower(a: &ConvArgs) -> Result<()> {
    let conv = load_conv(a.conv.as_deref(), a.preset.as_deref())?;
    let g = conv.gemm_shape()?;
    let stats = build_duplicate_map(&conv)?.stats();
    let v = json!({
        "conv": conv,
        "output_dims": conv.output_dims(),
        "gemm": g,
        "ops": conv.ops_count()?,
        "duplicates": stats,
    });
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let conv = load_conv(a.conv.conv.as_deref(), a.conv.preset.as_deref())?;
    let machine = load_machine(a.machine.as_deref(), &conv)?;
    let sched: ScheduleConfig = read_json(&a.schedule)?;
    let w = Workload::new(conv, machine)?;
    let m = measure(&w, &sched, a.noise, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(())
}

fn tune_cmd(a: &TuneArgs) -> Result<()> {
    let conv = load_conv(a.conv.conv.as_deref(), a.conv.preset.as_deref())?;
    let machine = load_machine(a.machine.as_deref(), &conv)?;
    let space: KnobSpace = match &a.space {
        Some(p) => read_json(p)?,
        None => KnobSpace::default(),
    };
    let mut cfg: ExplorerConfig = match &a.explorer {
        Some(p) => read_json(p)?,
        None => ExplorerConfig::default(),
    };
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(t) = a.trials {
        cfg.trial_budget = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let w = Workload::new(conv, machine)?;
    let start = std::time::Instant::now();
    let trace = tune(&w, &space, &cfg, a.noise, a.jobs)?;
    trace.write_jsonl(&a.out)?;
    let best = trace.best().context("no trials were run")?;
    eprintln!(
        "{} trials in {:.2?}; best {} at {:.1} cycles",
        trace.len(),
        start.elapsed(),
        best.schedule,
        best.runtime
    );
    Ok(())
}

fn pack_demo(a: &PackDemoArgs) -> Result<()> {
    let group = lanes_per_word(a.bits)?;
    if a.tiles == 0 {
        bail!(Error::Argument("--tiles must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let lo = -(1i32 << (a.bits - 1));
    let hi = (1i32 << (a.bits - 1)) - 1;
    let tiles: Vec<WarpState> = (0..a.tiles)
        .map(|_| WarpState::from_fn(|_| clip_to_field(rng.random_range(lo..=hi), a.bits)))
        .collect();
    let rounds = pack_rounds(&tiles[0], a.bits)?;
    let packed: Vec<WarpState> = tiles
        .iter()
        .map(|t| pack_lanes(t, a.bits))
        .collect::<mmasched::Result<_>>()?;
    let regs = redistribute_packed_groups(&packed, group)?;
    let hex = |w: &WarpState| {
        w.lanes
            .iter()
            .map(|v| format!("{v:08x}"))
            .collect::<Vec<_>>()
    };
    let unpacked_bytes = a.tiles * 32 * 4;
    let packed_bytes = regs.useful_lanes() * 4;
    let v = json!({
        "bits": a.bits,
        "lanes_per_word": group,
        "tile0_lanes": tiles[0].lanes,
        "tile0_rounds": rounds.iter().map(hex).collect::<Vec<_>>(),
        "redistributed": regs.regs.iter().map(hex).collect::<Vec<_>>(),
        "useful_lanes": regs.useful_lanes(),
        "store_bytes_unpacked": unpacked_bytes,
        "store_bytes_packed": packed_bytes,
        "ratio": unpacked_bytes as f64 / packed_bytes as f64,
    });
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    let text = if a.coalescing {
        let conv = load_conv(a.conv.as_deref(), a.preset.as_deref())?;
        let machine = load_machine(a.machine.as_deref(), &conv)?;
        coalescing_csv(&conv, &machine)?
    } else {
        let path = a.trace.as_deref().context("--trace is required")?;
        best_so_far_csv(&TuneTrace::read_jsonl(path)?)?
    };
    emit(a.out.as_deref(), &text)
}

fn experiment(a: &ExperimentArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => ExperimentSpec::load(p)?,
        None => ExperimentSpec::default(),
    };
    if let Some(t) = a.trials {
        spec.explorer.trial_budget = t;
    }
    if let Some(s) = a.seed {
        spec.explorer.seed = s;
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.display().to_string(),
        source: e,
    })?;
    let report = run_experiment(&spec, Some(&a.out), a.jobs)?;
    for r in &report.marginal {
        eprintln!("{:<20} {:<18} x{:.3}", r.conv, r.flag, r.speedup);
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return if err.chain().any(|c| c.is::<serde_json::Error>()) {
            3
        } else {
            1
        };
    };
    match e.category() {
        ErrorCategory::Config => 3,
        ErrorCategory::Validation => 4,
        ErrorCategory::Exhaustion => 5,
        ErrorCategory::Io => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Lower(a) => lower(a),
        Command::Simulate(a) => simulate(a),
        Command::Tune(a) => tune_cmd(a),
        Command::PackDemo(a) => pack_demo(a),
        Command::Report(a) => report(a),
        Command::Experiment(a) => experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already carry their sources in the message
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
