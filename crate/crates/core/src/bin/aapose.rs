use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use aapose::accounting::cost_report;
use aapose::blurpool::make_blur_filter;
use aapose::config::{ConfigFile, NetworkConfig, Preset, RunConfig};
use aapose::gradcheck::block_suite;
use aapose::metrics::{
    curve_csv, parse_split_records, pck_curve, pck_thresholds, pckh_curve, pckh_thresholds, read_records,
    shift_robustness, summarize,
};
use aapose::network::build_network;
use aapose::persist::{load_weights, load_weights_for, save_weights};
use aapose::synth::synth_dataset;
use aapose::tensor::PRECISION_BITS;
use aapose::training::{log_csv, train_toy, LrSchedule, Loss, TrainOptions};
use aapose::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "aapose", version, about = "Hand keypoint network toolkit")]
struct Cli {
    /// Network config file (TOML); an optional [run] table sets run defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// RNG seed [default: 42].
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Must match the element type this binary was built with.
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,

    /// Output directory [default: aapose-out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the per-layer architecture table with params and FLOPs.
    Summary(SummaryArgs),
    /// Finite-difference gradient checks of every block type.
    Gradcheck(GradcheckArgs),
    /// Train on synthetic hands, writing a CSV log and final weights.
    TrainToy(TrainArgs),
    /// Keypoint metrics from prediction/ground-truth files.
    Eval(EvalArgs),
    /// Baseline vs randomly shifted evaluation of trained weights.
    ShiftTest(ShiftArgs),
}

#[derive(Args, Debug)]
struct SummaryArgs {
    /// Used when no --config is given.
    #[arg(long, default_value = "default")]
    preset: String,
    /// Apply ablation architecture 1..=12.
    #[arg(long)]
    ablation: Option<usize>,
    /// Also print the blur filters for n = 1..=4.
    #[arg(long)]
    filters: bool,
    /// One line per layer instead of per block.
    #[arg(long)]
    detailed: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Skip the end-to-end network check.
    #[arg(long)]
    no_network: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value = "tiny")]
    preset: String,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    lr_max: Option<f64>,
    /// Half-period of the learning-rate cycle, in epochs.
    #[arg(long)]
    stepsize: Option<f64>,
    /// Save weights every N epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long, value_enum, default_value = "mse")]
    loss: LossArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Mse,
    Mae,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Combined file: id, 42 predicted, 42 ground-truth values[, norm_scale].
    #[arg(long, conflicts_with_all = ["pred", "gt"])]
    records: Option<PathBuf>,
    /// Predictions: id and 42 values per line.
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,
    /// Ground truth: id, 42 values[, norm_scale] per line.
    #[arg(long, requires = "pred")]
    gt: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ShiftArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Largest shift in pixels on each axis [default: 20].
    #[arg(long)]
    max_shift: Option<usize>,
    /// Number of synthetic evaluation hands.
    #[arg(long, default_value_t = 64)]
    images: usize,
}

enum Failure {
    Validation(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

struct Context {
    file: Option<ConfigFile>,
    seed: u64,
    out: PathBuf,
}

impl Context {
    fn run(&self) -> RunConfig {
        self.file.as_ref().map(|f| f.run.clone()).unwrap_or_default()
    }

    fn network(&self, preset: &str) -> Result<NetworkConfig> {
        match &self.file {
            Some(f) => Ok(f.network.clone()),
            None => Ok(NetworkConfig::preset(preset.parse::<Preset>()?)),
        }
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }
}

fn summary(ctx: &Context, a: &SummaryArgs) -> CliResult {
    let mut cfg = ctx.network(&a.preset)?;
    if let Some(arch) = a.ablation {
        cfg = cfg.with_ablation(arch)?;
    }
    let net = build_network(&cfg, ctx.seed)?;
    let report = cost_report(&net)?;
    let trace: Vec<String> = net.spatial_trace().iter().map(|s| s.to_string()).collect();
    println!("spatial trace: [{}]", trace.join(", "));
    print!("{}", report.table(a.detailed));
    println!("parameters: {}", report.total_params());
    println!("FLOPs: {} (MACs: {})", report.total_flops(), report.total_macs());
    if a.filters {
        for n in 1..=4 {
            let f = make_blur_filter(n)?;
            println!("blur filter n={n} (x 1/{}):", f.normalizer());
            for r in 0..f.m() {
                let row: Vec<String> = (0..f.m())
                    .map(|c| format!("{}", (f.at(r, c) * f.normalizer()).round()))
                    .collect();
                println!("  [{}]", row.join(", "));
            }
        }
    }
    Ok(())
}

fn gradcheck(ctx: &Context, a: &GradcheckArgs) -> CliResult {
    let results = block_suite(ctx.seed, !a.no_network)?;
    let mut failed = 0;
    for e in &results {
        println!("{:<24} {}", e.name, e.report);
        failed += usize::from(!e.report.passed);
    }
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

fn train(ctx: &Context, a: &TrainArgs) -> CliResult {
    let cfg = ctx.network(&a.preset)?;
    let run = ctx.run();
    let defaults = TrainOptions::default();
    let sched = LrSchedule::default();
    let out = ctx.out_dir()?.to_path_buf();
    let opts = TrainOptions {
        images: a.images.or(run.images).unwrap_or(defaults.images),
        epochs: a.epochs.or(run.epochs).unwrap_or(defaults.epochs),
        batch_size: a.batch_size.or(run.batch_size).unwrap_or(defaults.batch_size),
        momentum: a.momentum.or(run.momentum).unwrap_or(defaults.momentum),
        schedule: LrSchedule {
            lr_min: a.lr_min.or(run.lr_min).unwrap_or(sched.lr_min),
            lr_max: a.lr_max.or(run.lr_max).unwrap_or(sched.lr_max),
            stepsize: a.stepsize.or(run.stepsize).unwrap_or(sched.stepsize),
        },
        loss: match a.loss {
            LossArg::Mse => Loss::Mse,
            LossArg::Mae => Loss::Mae,
        },
        seed: ctx.seed,
        checkpoint_every: a.checkpoint_every.or(run.checkpoint_every),
        out_dir: Some(out.clone()),
        ..defaults
    };
    let outcome = train_toy(&cfg, &opts)?;
    let log_path = out.join("train_log.csv");
    std::fs::write(&log_path, log_csv(&outcome.log)).map_err(Error::from)?;
    let weights = out.join("weights.bin");
    save_weights(&outcome.network, &weights)?;
    println!(
        "trained {} epochs on {} images: loss {:.6e}, train EPE {:.3} px",
        outcome.state.epoch,
        opts.images,
        outcome.state.loss,
        outcome.final_epe().unwrap_or(f64::NAN)
    );
    println!("log: {}\nweights: {}", log_path.display(), weights.display());
    Ok(())
}

fn eval(ctx: &Context, a: &EvalArgs) -> CliResult {
    let records = match (&a.records, &a.pred, &a.gt) {
        (Some(r), _, _) => read_records(r)?,
        (None, Some(p), Some(g)) => {
            let pred = std::fs::read_to_string(p).map_err(Error::from)?;
            let gt = std::fs::read_to_string(g).map_err(Error::from)?;
            parse_split_records(&pred, &gt)?
        }
        _ => return Err(Failure::Validation("give --records, or --pred with --gt".into())),
    };
    let s = summarize(&records)?;
    println!("{s}");
    let out = ctx.out_dir()?;
    let th = pck_thresholds();
    std::fs::write(out.join("pck.csv"), curve_csv(&th, &pck_curve(&records, &th)?)).map_err(Error::from)?;
    let thh = pckh_thresholds();
    match pckh_curve(&records, &thh) {
        Ok(c) => std::fs::write(out.join("pckh.csv"), curve_csv(&thh, &c)).map_err(Error::from)?,
        Err(e) => log::warn!("no PCKh curve: {e}"),
    }
    println!("curves: {}", out.display());
    Ok(())
}

fn shift_test(ctx: &Context, a: &ShiftArgs) -> CliResult {
    let net = match &ctx.file {
        Some(f) => load_weights_for(&a.weights, &f.network)?,
        None => load_weights(&a.weights)?,
    };
    let c = &net.config;
    if c.input_width != c.input_height || c.input_channels != 3 {
        return Err(Failure::Validation("shift-test needs a square 3-channel network".into()));
    }
    let max_shift = a.max_shift.or(ctx.run().max_shift).unwrap_or(20);
    let samples = synth_dataset(ctx.seed, a.images, c.input_width)?;
    let r = shift_robustness(&net, &samples, max_shift, ctx.seed)?;
    println!("max shift {max_shift} px, {} of {} samples skipped", r.skipped, samples.len());
    println!("baseline: {}", r.baseline);
    println!("shifted:  {}", r.shifted);
    println!(
        "EPE degradation {:+.4} px, AUC degradation {:+.4}",
        r.epe_degradation(),
        r.auc_degradation()
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult {
    if let Some(p) = cli.precision {
        let bits = match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        };
        if bits != PRECISION_BITS {
            return Err(Failure::Validation(format!(
                "this binary uses {PRECISION_BITS}-bit floats; rebuild {} the `f32` feature",
                if bits == 32 { "with" } else { "without" }
            )));
        }
    }
    let file = cli.config.as_deref().map(ConfigFile::load).transpose()?;
    let run = file.as_ref().map(|f| f.run.clone()).unwrap_or_default();
    let ctx = Context {
        seed: cli.seed.or(run.seed).unwrap_or(42),
        out: cli
            .out
            .clone()
            .or(run.out.map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("aapose-out")),
        file,
    };
    if let Some(f) = &ctx.file {
        f.network.validate()?;
    }
    match &cli.command {
        Command::Summary(a) => summary(&ctx, a),
        Command::Gradcheck(a) => gradcheck(&ctx, a),
        Command::TrainToy(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::ShiftTest(a) => shift_test(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(2)
        }
    }
}
