//! Command-line entry point for the segmentation-loss laboratory.

use std::path::PathBuf;
use std::str::FromStr;

use clap::builder::ArgAction;
use clap::{Args, Parser, Subcommand};

use ltseg::curve::{self, CurveMethod};
use ltseg::data::{generate, Dataset, Split, SynthConfig};
use ltseg::losses::{gradcheck, LossKind, LossSpec, NoiseDist, PatVariant};
use ltseg::metrics::EvalReport;
use ltseg::model::ConvNet;
use ltseg::trainer::{self, OptName, TrainConfig};
use ltseg::{bench, Error, Result};

#[derive(Parser)]
#[command(
    name = "ltseg",
    version,
    about = "Laboratory for long-tailed semantic segmentation losses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset
    Gen(GenArgs),
    /// Train a small convnet with a configurable loss
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Time and profile one evaluation of every loss kind
    Bench(BenchArgs),
    /// Emit single-pixel loss and weight curves over confidence
    Curve(CurveArgs),
    /// Finite-difference checks of every loss gradient
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Number of images
    #[arg(long, default_value_t = 80)]
    n: usize,
    #[arg(long, default_value_t = 24)]
    height: usize,
    #[arg(long, default_value_t = 24)]
    width: usize,
    /// Class count including the background
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Power-law exponent over class frequencies
    #[arg(long, default_value_t = 2.0)]
    skew: f64,
    /// Comma-separated per-class frequencies overriding the power law
    #[arg(long)]
    targets: Option<String>,
    /// Intensity separation between classes
    #[arg(long, default_value_t = 0.25)]
    contrast: f64,
    /// Std dev of the additive pixel noise
    #[arg(long = "noise-sigma", default_value_t = 0.1)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct LossFlags {
    /// Loss kind: ce, focal, cb, cbfocal, bms, ldam, blv, pat
    #[arg(long, default_value = "ce")]
    loss: String,
    /// Focal focusing exponent
    #[arg(long)]
    gamma: Option<f64>,
    /// Adaptive-weight temperature
    #[arg(long)]
    temperature: Option<f64>,
    /// Adaptive-weight epsilon
    #[arg(long)]
    epsilon: Option<f64>,
    /// Adaptive-weight reading: literal or table1
    #[arg(long)]
    variant: Option<String>,
    /// Class-balanced effective-number beta
    #[arg(long = "beta-cb")]
    beta_cb: Option<f64>,
    /// Margin budget for the margin loss
    #[arg(long)]
    margin: Option<f64>,
    /// Logit scale for the margin loss
    #[arg(long)]
    scale: Option<f64>,
    /// Noise amplitude for the logit-perturbation loss
    #[arg(long)]
    sigma: Option<f64>,
    /// Noise distribution: gaussian or uniform
    #[arg(long)]
    dist: Option<String>,
    /// on or off; defaults to the kind's own convention
    #[arg(long = "normalize-mask-size")]
    normalize_mask_size: Option<String>,
}

impl LossFlags {
    fn to_spec(&self) -> Result<LossSpec> {
        let kind = LossKind::from_str(&self.loss)?;
        let mut spec = LossSpec::new(kind);
        if let Some(v) = self.gamma {
            spec.gamma = v;
        }
        if let Some(v) = self.temperature {
            spec.temperature = v;
        }
        if let Some(v) = self.epsilon {
            spec.epsilon = v;
        }
        if let Some(v) = &self.variant {
            spec.variant = PatVariant::from_str(v)?;
        }
        if let Some(v) = self.beta_cb {
            spec.beta_cb = v;
        }
        if let Some(v) = self.margin {
            spec.max_margin = v;
        }
        if let Some(v) = self.scale {
            spec.scale = v;
        }
        if let Some(v) = self.sigma {
            spec.sigma = v;
        }
        if let Some(v) = &self.dist {
            spec.dist = NoiseDist::from_str(v)?;
        }
        if let Some(v) = &self.normalize_mask_size {
            spec.normalize_by_mask_size = parse_switch(v)?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by gen
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for log, checkpoint, and report
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    loss_flags: LossFlags,
    /// adam or sgd
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Only used by sgd
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long = "eval-every", default_value_t = 100)]
    eval_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint directory written by train
    #[arg(long)]
    checkpoint: PathBuf,
    /// train, val, or test
    #[arg(long, default_value = "test")]
    split: String,
    /// Method label echoed into the CSV
    #[arg(long, default_value = "model")]
    method: String,
    /// Seed label echoed into the CSV
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Logit shape as B,L,H,W
    #[arg(long, default_value = "2,19,64,64")]
    shape: String,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CurveArgs {
    /// ce, focal, or pat; omit for the full default grid
    #[arg(long)]
    loss: Option<String>,
    /// Focal exponent, repeatable
    #[arg(long, action = ArgAction::Append)]
    gamma: Vec<f64>,
    /// Adaptive-weight temperature, repeatable
    #[arg(long, action = ArgAction::Append)]
    temperature: Vec<f64>,
    /// literal or table1
    #[arg(long, default_value = "table1")]
    variant: String,
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    /// Comma-separated confidences in (0,1)
    #[arg(long = "p-grid")]
    p_grid: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Loss kind to check, repeatable; omit for all kinds
    #[arg(long, action = ArgAction::Append)]
    loss: Vec<String>,
    /// Random instances per kind
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_switch(v: &str) -> Result<bool> {
    match v {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(Error::BadConfig { reason: format!("expected on or off, got '{other}'") }),
    }
}

fn parse_f64_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|e| Error::BadConfig { reason: format!("bad {what} entry '{tok}': {e}") })
        })
        .collect()
}

fn parse_shape(text: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|e| Error::BadConfig { reason: format!("bad shape entry '{tok}': {e}") })
        })
        .collect::<Result<_>>()?;
    if parts.len() != 4 {
        return Err(Error::BadConfig { reason: format!("shape needs 4 dims, got {}", parts.len()) });
    }
    Ok([parts[0], parts[1], parts[2], parts[3]])
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(2);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => run_gen(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Bench(args) => run_bench(args),
        Command::Curve(args) => run_curve(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    }
}

fn print_config<T: serde::Serialize>(cfg: &T) -> Result<()> {
    let json = serde_json::to_string(cfg)?;
    eprintln!("resolved config: {json}");
    Ok(())
}

fn run_gen(args: GenArgs) -> Result<()> {
    let mut cfg = SynthConfig::new(args.n, args.height, args.width, args.classes);
    cfg.channels = args.channels;
    cfg.skew = args.skew;
    cfg.contrast = args.contrast;
    cfg.noise_sigma = args.noise_sigma;
    cfg.seed = args.seed;
    if let Some(t) = &args.targets {
        cfg.target_freqs = Some(parse_f64_list(t, "target frequency")?);
    }
    print_config(&cfg)?;
    let ds = generate(&cfg)?;
    ds.save(&args.out)?;
    let stats = ds.class_stats(Split::Train)?;
    let freqs: Vec<String> = stats
        .counts
        .iter()
        .map(|&c| format!("{:.4}", c as f64 / stats.total as f64))
        .collect();
    println!(
        "wrote {} images ({}x{}, {} classes) to {}; train-split frequencies [{}]",
        cfg.n_images,
        cfg.height,
        cfg.width,
        cfg.num_classes,
        args.out.display(),
        freqs.join(", ")
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::new(&args.dataset, &args.out, args.loss_flags.to_spec()?);
    cfg.optimizer = OptName::from_str(&args.optimizer)?;
    cfg.lr = args.lr;
    cfg.momentum = args.momentum;
    cfg.batch_size = args.batch;
    cfg.steps = args.steps;
    cfg.eval_every = args.eval_every;
    cfg.seed = args.seed;
    print_config(&cfg)?;
    let outcome = trainer::train(&cfg)?;
    eprintln!(
        "final loss {}; log {}; checkpoint {}",
        outcome.final_loss,
        outcome.log_path.display(),
        outcome.checkpoint_dir.display()
    );
    let report = std::fs::read_to_string(&outcome.report_path)?;
    print!("{report}");
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let split = Split::from_str(&args.split)?;
    print_config(&serde_json::json!({
        "dataset": args.dataset,
        "checkpoint": args.checkpoint,
        "split": args.split,
        "method": args.method,
        "seed": args.seed,
    }))?;
    let ds = Dataset::load(&args.dataset)?;
    let net = ConvNet::load_checkpoint(&args.checkpoint)?;
    let report = trainer::evaluate(&net, &ds, split)?;
    println!("{}", EvalReport::csv_header(ds.cfg.num_classes));
    println!("{}", report.csv_row(&args.method, args.seed));
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let shape = parse_shape(&args.shape)?;
    print_config(&serde_json::json!({
        "shape": shape,
        "reps": args.reps,
        "seed": args.seed,
    }))?;
    let report = bench::bench_losses(shape, args.reps, args.seed)?;
    print!("{}", report.to_csv());
    let noisy: Vec<String> =
        report.rows.iter().filter(|r| r.noisy).map(|r| r.kind.to_string()).collect();
    if !noisy.is_empty() {
        eprintln!("noisy timings (std/mean > 0.25): {}", noisy.join(", "));
    }
    Ok(())
}

fn run_curve(args: CurveArgs) -> Result<()> {
    let methods = match args.loss.as_deref() {
        None => curve::default_methods(),
        Some("ce") => vec![CurveMethod::ce()],
        Some("focal") => {
            let gammas = if args.gamma.is_empty() { vec![2.0, 5.0] } else { args.gamma.clone() };
            gammas.into_iter().map(CurveMethod::focal).collect()
        }
        Some("pat") => {
            let variant = PatVariant::from_str(&args.variant)?;
            let temps = if args.temperature.is_empty() {
                vec![2.0, 5.0]
            } else {
                args.temperature.clone()
            };
            temps
                .into_iter()
                .map(|t| {
                    let mut m = CurveMethod::pat(t, variant);
                    m.epsilon = args.epsilon;
                    m
                })
                .collect()
        }
        Some(other) => {
            return Err(Error::BadConfig {
                reason: format!("curve supports ce, focal, or pat, not '{other}'"),
            });
        }
    };
    let p_grid = match &args.p_grid {
        Some(text) => parse_f64_list(text, "confidence")?,
        None => curve::default_p_grid(),
    };
    print_config(&serde_json::json!({
        "methods": methods.len(),
        "p_grid": p_grid,
        "variant": args.variant,
        "seed": 0,
    }))?;
    let rows = curve::curve(&methods, &p_grid)?;
    print!("{}", curve::to_csv(&rows));
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    if args.trials == 0 {
        return Err(Error::BadConfig { reason: "trials must be at least 1".into() });
    }
    let kinds: Vec<LossKind> = if args.loss.is_empty() {
        LossKind::ALL.to_vec()
    } else {
        args.loss.iter().map(|s| LossKind::from_str(s)).collect::<Result<_>>()?
    };
    print_config(&serde_json::json!({
        "kinds": kinds.iter().map(|k| k.to_string()).collect::<Vec<_>>(),
        "trials": args.trials,
        "seed": args.seed,
    }))?;
    let mut failed = false;
    for kind in kinds {
        let report = gradcheck::run_suite(kind, args.trials, args.seed)?;
        let status = if report.ok() { "PASS" } else { "FAIL" };
        println!(
            "{kind}: {} instances, {} failures, worst error at {:.3}x the allowance: {status}",
            report.instances, report.failures, report.worst_ratio
        );
        failed |= !report.ok();
    }
    if failed {
        eprintln!("error: at least one gradient check failed");
        std::process::exit(2);
    }
    Ok(())
}
