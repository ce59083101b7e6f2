use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gridseg::gridded::ScaleSet;
use gridseg::harness::checkpoint::{load_model, Checkpoint};
use gridseg::harness::eval::{aggregate, evaluate};
use gridseg::harness::train::{load_prepared, train, train_ensemble};
use gridseg::harness::{bench, deterministic_mode, infer, InferOptions, TrainConfig, DETERMINISTIC_ENV};
use gridseg::synth::{make_dataset, Dataset, DatasetSpec, Split, SynthParams};
use gridseg::{Error, Result};

/// Cirrus segmentation with gridded multi-scale tri-attention.
#[derive(Parser)]
#[command(name = "gridseg", version, after_help = after_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn after_help() -> String {
    format!("Set {DETERMINISTIC_ENV}=1 to force single-threaded, reproducible execution.")
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (sample containers plus manifest.tsv).
    GenerateData(GenerateArgs),
    /// Train one model or an ensemble.
    Train(TrainArgs),
    /// Score checkpoints on a dataset split.
    Eval(EvalArgs),
    /// Predict masks for images or sample containers.
    Infer(InferArgs),
    /// Report attention memory cost for a configuration.
    Benchmark(BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 512)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file with generator parameters.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    prevalence: Option<f64>,
    /// Mean covered fraction of contaminated images.
    #[arg(long)]
    coverage: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of ensemble members; 1 trains a single model directly in the run directory.
    #[arg(long)]
    ensemble: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Repeat to evaluate several members and their ensemble.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Evaluation resolution; defaults to the training side stored in the checkpoint.
    #[arg(long)]
    side: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Per-image CSV for the (ensemble) prediction.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also write an overlay figure per input.
    #[arg(long)]
    overlay: bool,
    /// Resample inputs to this side before predicting.
    #[arg(long)]
    side: Option<usize>,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    side: usize,
    /// Comma-separated scales, finest first.
    #[arg(long, default_value = "1,0.5,0.25")]
    scales: String,
    #[arg(long, default_value_t = 16)]
    tile: usize,
    /// Channels of the instrumented pass; 0 skips the measurement.
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut params = match &a.params {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<SynthParams>(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => SynthParams::default(),
    };
    if let Some(p) = a.prevalence {
        params.prevalence = p;
    }
    if let Some(c) = a.coverage {
        params.coverage = c;
    }
    let spec = DatasetSpec {
        params,
        ..DatasetSpec::new(a.n, a.size, a.seed)
    };
    let m = make_dataset(&spec, &a.out)?;
    let (tr, va, te) = spec.split.sizes(spec.n)?;
    println!(
        "wrote {} samples to {} (train {tr}, val {va}, test {te}; {} contaminated)",
        m.records.len(),
        a.out.display(),
        m.records.iter().filter(|r| r.cirrus).count()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = a.dataset {
        cfg.dataset = d;
    }
    if let Some(d) = a.run_dir {
        cfg.run_dir = d;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(k) = a.ensemble {
        cfg.ensemble = k;
    }
    cfg.validate()?;
    if cfg.ensemble == 1 {
        let out = train(&cfg)?;
        let best = &out.history[out.best_epoch - 1];
        println!(
            "best epoch {} val_iou {:.4}; artifacts in {}",
            out.best_epoch,
            best.val_iou,
            cfg.run_dir.display()
        );
    } else {
        for (k, out) in train_ensemble(&cfg)?.iter().enumerate() {
            let best = &out.history[out.best_epoch - 1];
            println!("member {k}: best epoch {} val_iou {:.4}", out.best_epoch, best.val_iou);
        }
        println!("artifacts in {}", cfg.run_dir.display());
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let checkpoints = a
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let side = match a.side {
        Some(s) => s,
        None => checkpoints[0]
            .config
            .as_ref()
            .map(|c| c.side)
            .ok_or_else(|| Error::invalid("checkpoint has no training config; pass --side"))?,
    };
    let models = checkpoints.iter().map(|c| c.to_model()).collect::<Result<Vec<_>>>()?;
    let samples = load_prepared(&Dataset::open(&a.dataset)?, split, side, None)?;
    if samples.is_empty() {
        return Err(Error::invalid(format!("split {split} is empty")));
    }
    let batch = 4;
    if models.len() > 1 {
        let reports = models
            .iter()
            .zip(&a.checkpoints)
            .map(|(m, p)| {
                let r = evaluate(std::slice::from_ref(m), &samples, a.threshold, batch)?;
                println!("{}: {}", p.display(), r.line());
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        println!("members: {}", aggregate(&reports).line());
    }
    let report = evaluate(&models, &samples, a.threshold, batch)?;
    let label = if models.len() > 1 { "ensemble" } else { "model" };
    println!("{label} {split}: {}", report.line());
    if let Some(out) = a.out {
        report.write_csv(&out)?;
    }
    Ok(())
}

fn run_infer(a: InferArgs) -> Result<()> {
    let models = a.checkpoints.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
    let opts = InferOptions {
        threshold: a.threshold,
        overlay: a.overlay,
        side: a.side,
    };
    for r in infer(&models, &a.inputs, &a.out, &opts)? {
        println!("{} -> {}", r.input.display(), r.mask_png.display());
    }
    Ok(())
}

fn run_benchmark(a: BenchArgs) -> Result<()> {
    let values = a
        .scales
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad scale {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let scales = ScaleSet::from_scales(&values)?;
    let channels = (a.channels > 0).then_some(a.channels);
    let row = bench::benchmark(a.side, &scales, a.tile, channels)?;
    let csv = bench::render_csv(std::slice::from_ref(&row));
    match &a.out {
        Some(p) => std::fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if deterministic_mode() {
        log::info!("deterministic mode: single-threaded execution");
    }
    let result = match cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
        Command::Benchmark(a) => run_benchmark(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
