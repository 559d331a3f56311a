//! Command-line front end: train, eval, gradcheck, predict, bench, synth.
//!
//! Exit codes: 0 success, 1 configuration, 2 data / format, 3 numeric or
//! check failure.

pub mod config;

/// `println!` that stops quietly when stdout is closed (e.g. piped to `head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use scratchcnn::arch::{REFERENCE_ARCH, SYNTH_ARCH};
use scratchcnn::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use scratchcnn::data::{load_idx, read_idx_images, save_dataset, synth_shapes};
use scratchcnn::eval::{
    evaluate_mse, holdout_evaluate, kfold_evaluate_with, misclassification_count,
};
use scratchcnn::gradcheck::{
    bench_conv, default_bench_shapes, run_suite, CheckOptions, Verdict, BENCH_CSV_HEADER,
};
use scratchcnn::train::{fit, init_network, DATA_STREAM};
use scratchcnn::{
    ArchSpec, Dataset, EpochReport, Error, OptConfig, Result, SeededRng, TrainConfig,
};

use config::{EvalMode, Settings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

pub const LOSS_LOG: &str = "loss_log.csv";
pub const CHECKPOINT: &str = "model.ckpt";

#[derive(Parser, Debug)]
#[command(
    name = "scratchcnn",
    version,
    about = "Train and inspect small convolutional regression networks"
)]
pub struct Cli {
    /// JSON config with keys epochs, batch_size, lr, momentum, weight_decay,
    /// seed, arch, dataset.images, dataset.targets, eval.mode, eval.k.
    /// Flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a network and write a loss log and checkpoint.
    Train(TrainArgs),
    /// Report test MSE of a checkpoint, a holdout split or k-fold CV.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the network output for each image of an IDX file.
    Predict(PredictArgs),
    /// Time naive against im2col convolution.
    Bench(BenchArgs),
    /// Write a synthetic rectangle dataset as IDX images plus CSV targets.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Default)]
pub struct HyperArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Architecture, e.g. "conv(f=5,k=8) relu pool(f=2,s=2) flatten dense(8)".
    #[arg(long)]
    pub arch: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// IDX image file.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// CSV targets (header row, one column per target) or IDX labels.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Generate rectangles instead of reading files.
    #[arg(long)]
    pub synthetic: bool,
    /// Number of synthetic examples.
    #[arg(long, default_value_t = 512)]
    pub m: usize,
    /// Synthetic canvas side.
    #[arg(long, default_value_t = 16)]
    pub side: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory for the loss log and checkpoint.
    #[arg(long, default_value = "scratchcnn-out")]
    pub out: PathBuf,
    /// Write 0 in the seconds column so logs of equal runs are byte-identical.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Evaluate this checkpoint on the whole dataset instead of training.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// k-fold cross-validation with k folds.
    #[arg(long, conflicts_with = "holdout")]
    pub kfold: Option<usize>,
    /// Holdout evaluation with this test fraction.
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Error tolerance for the misclassification count.
    #[arg(long, default_value_t = 0.1)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Only this family: dense, relu, conv, pool, bn, flatten, composite.
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub threshold: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// IDX image file; one output row per image.
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Also write the table as CSV (shape,impl,ns_per_call).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    pub m: usize,
    #[arg(long, default_value_t = 16)]
    pub side: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "synthetic")]
    pub stem: String,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Format(_) | Error::Io(_) | Error::Shape(_) => EXIT_DATA,
        Error::Numeric(_) | Error::Check(_) | Error::State(_) => EXIT_CHECK,
    }
}

/// Parse arguments, run the command, report errors on one line of stderr
/// and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let name = match &cli.command {
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Gradcheck(_) => "gradcheck",
        Command::Predict(_) => "predict",
        Command::Bench(_) => "bench",
        Command::Synth(_) => "synth",
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("scratchcnn {name}: {}", e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let file = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    match &cli.command {
        Command::Train(a) => cmd_train(file, a),
        Command::Eval(a) => cmd_eval(file, a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn flag_settings(h: &HyperArgs, d: &DataArgs) -> Settings {
    Settings {
        epochs: h.epochs,
        batch_size: h.batch_size,
        lr: h.lr,
        momentum: h.momentum,
        weight_decay: h.weight_decay,
        seed: h.seed,
        arch: h.arch.clone(),
        images: d.images.clone(),
        targets: d.targets.clone(),
        ..Settings::default()
    }
}

/// Training configuration with library defaults for anything unset.
pub fn train_config(s: &Settings) -> Result<TrainConfig> {
    let defaults = TrainConfig::default();
    let opt = OptConfig {
        lr: s.lr.unwrap_or(defaults.opt.lr),
        momentum: s.momentum.unwrap_or(defaults.opt.momentum),
        weight_decay: s.weight_decay.unwrap_or(defaults.opt.weight_decay),
    };
    let cfg = TrainConfig {
        epochs: s.epochs.unwrap_or(defaults.epochs),
        batch_size: s.batch_size.unwrap_or(defaults.batch_size),
        opt,
        seed: s.seed.unwrap_or(defaults.seed),
        shuffle: true,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Architecture from the settings, else the synthetic-task network for
/// generated data and the 200×200 reference network for files.
fn resolve_arch(s: &Settings, synthetic: bool) -> Result<ArchSpec> {
    let text = match &s.arch {
        Some(a) => a.as_str(),
        None if synthetic => SYNTH_ARCH,
        None => REFERENCE_ARCH,
    };
    text.parse()
}

fn load_data(s: &Settings, d: &DataArgs, seed: u64) -> Result<Dataset> {
    if d.synthetic {
        return synth_shapes(d.m, d.side, &mut SeededRng::derive(seed, DATA_STREAM));
    }
    match (&s.images, &s.targets) {
        (Some(images), Some(targets)) => load_idx(images, targets),
        _ => Err(Error::Config(
            "no dataset: pass --synthetic or both --images and --targets (or dataset.images / dataset.targets in the config)".into(),
        )),
    }
}

pub fn loss_log(reports: &[EpochReport], timing: bool) -> String {
    let mut out = String::from("epoch,mean_loss,seconds\n");
    for r in reports {
        let seconds = if timing { r.seconds } else { 0.0 };
        let _ = writeln!(out, "{},{},{}", r.epoch, r.mean_loss, seconds);
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::from(e).context(path.display()))
}

fn cmd_train(file: Settings, a: &TrainArgs) -> Result<i32> {
    let s = file.overridden_by(flag_settings(&a.hyper, &a.data));
    let cfg = train_config(&s)?;
    let arch = resolve_arch(&s, a.data.synthetic)?;
    let data = load_data(&s, &a.data, cfg.seed)?;
    let mut net = init_network(&arch, data.image_shape(), cfg.seed)?;
    eprintln!(
        "training {arch} on {} ({} examples of {}), {} epochs, batch {}, lr {}, momentum {}, weight decay {}, seed {}",
        data.name,
        data.len(),
        data.image_shape(),
        cfg.epochs,
        cfg.batch_size,
        cfg.opt.lr,
        cfg.opt.momentum,
        cfg.opt.weight_decay,
        cfg.seed
    );
    let reports = fit(&mut net, &data, &cfg)?;
    for r in &reports {
        eprintln!(
            "epoch {} mean_loss={} seconds={:.3}",
            r.epoch, r.mean_loss, r.seconds
        );
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::from(e).context(a.out.display()))?;
    let log = a.out.join(LOSS_LOG);
    write_file(&log, loss_log(&reports, !a.no_timing).as_bytes())?;
    let ckpt = a.out.join(CHECKPOINT);
    save_checkpoint(
        &net,
        &CheckpointMeta {
            seed: cfg.seed,
            epochs: cfg.epochs as u64,
        },
        &ckpt,
    )?;
    let last = reports.last().map_or(f64::NAN, |r| r.mean_loss);
    out!("metric=train_loss value={last}");
    out!("wrote {} and {}", log.display(), ckpt.display());
    Ok(EXIT_OK)
}

fn cmd_eval(file: Settings, a: &EvalArgs) -> Result<i32> {
    let mut flags = flag_settings(&a.hyper, &a.data);
    if let Some(k) = a.kfold {
        flags.eval_mode = Some(EvalMode::KFold);
        flags.eval_k = Some(k);
    } else if a.holdout.is_some() {
        flags.eval_mode = Some(EvalMode::Holdout);
    }
    let s = file.overridden_by(flags);
    let seed = s.seed.unwrap_or(TrainConfig::default().seed);

    if let Some(path) = &a.checkpoint {
        let (mut net, _) = load_checkpoint(path)?;
        let data = load_data(&s, &a.data, seed)?;
        let all: Vec<usize> = (0..data.len()).collect();
        let mse = evaluate_mse(&mut net, &data, &all)?;
        let preds = data
            .images()
            .iter()
            .map(|x| net.predict(x))
            .collect::<Result<Vec<_>>>()?;
        let wrong = misclassification_count(&preds, data.targets(), a.tolerance)?;
        out!("metric=mse value={mse}");
        out!(
            "metric=misclassified value={wrong} of={} tolerance={}",
            data.len(),
            a.tolerance
        );
        return Ok(EXIT_OK);
    }

    let cfg = train_config(&s)?;
    let arch = resolve_arch(&s, a.data.synthetic)?;
    let data = load_data(&s, &a.data, cfg.seed)?;
    let mse = match s.eval_mode.unwrap_or(EvalMode::Holdout) {
        EvalMode::KFold => {
            let k = s.eval_k.ok_or_else(|| {
                Error::Config("k-fold evaluation needs --kfold K or eval.k".into())
            })?;
            if k < 2 {
                return Err(Error::Config(format!("k-fold needs k ≥ 2, got {k}")));
            }
            let res = kfold_evaluate_with(&arch, &data, &cfg, k, |fold, mse| {
                eprintln!("fold {}/{k} mse={mse}", fold + 1);
            })?;
            res.mean_mse
        }
        EvalMode::Holdout => {
            let frac = a.holdout.unwrap_or(0.2);
            let res = holdout_evaluate(&arch, &data, &cfg, frac)?;
            eprintln!(
                "holdout: trained on {}, tested on {} examples",
                res.plan.train.len(),
                res.plan.test.len()
            );
            res.test_mse
        }
    };
    out!("metric=mse value={mse}");
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let opts = CheckOptions {
        threshold: a.threshold,
        h: a.h,
        ..CheckOptions::default()
    };
    let family = a.layer.as_deref().map(|f| match f {
        "maxpool" => "pool",
        "batchnorm" => "bn",
        other => other,
    });
    let reports = run_suite(a.seed, family, &opts)?;
    let mut failing = Vec::new();
    for r in &reports {
        out!("{r}");
        if r.verdict() != Verdict::Pass {
            let worst = r.worst_block().map_or(String::new(), |b| {
                format!(" (worst block {}: rel {:.3e})", b.name, b.max_rel)
            });
            failing.push(format!("{}{worst}", r.subject));
        }
    }
    out!(
        "gradcheck: {}/{} passed at threshold {:e}",
        reports.len() - failing.len(),
        reports.len(),
        a.threshold
    );
    if failing.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("scratchcnn gradcheck: failing: {}", failing.join("; "));
        Ok(EXIT_CHECK)
    }
}

fn cmd_predict(a: &PredictArgs) -> Result<i32> {
    let (mut net, _) = load_checkpoint(&a.checkpoint)?;
    let images = read_idx_images(&a.image)?;
    let expected = net.input_shape().clone();
    for (i, x) in images.iter().enumerate() {
        if x.shape() != &expected {
            return Err(Error::Shape(format!(
                "{} image {i} is {} but the model expects {expected}",
                a.image.display(),
                x.shape()
            )));
        }
        let y = net.predict(x)?;
        let row: Vec<String> = y.data().iter().map(|v| v.to_string()).collect();
        out!("{}", row.join(","));
    }
    Ok(EXIT_OK)
}

fn cmd_bench(a: &BenchArgs) -> Result<i32> {
    let rows = bench_conv(&default_bench_shapes(), a.reps, &mut SeededRng::new(a.seed))?;
    out!("{:<28} {:<8} {:>16}", "shape", "impl", "ns_per_call");
    for r in &rows {
        out!(
            "{:<28} {:<8} {:>16.0}",
            r.shape,
            r.implementation,
            r.ns_per_call
        );
    }
    for pair in rows.chunks(2) {
        if let [naive, fast] = pair {
            out!(
                "{}: im2col speedup {:.2}x",
                naive.shape,
                naive.ns_per_call / fast.ns_per_call
            );
        }
    }
    if let Some(path) = &a.csv {
        let mut csv = format!("{BENCH_CSV_HEADER}\n");
        for r in &rows {
            csv.push_str(&r.csv());
            csv.push('\n');
        }
        write_file(path, csv.as_bytes())?;
    }
    Ok(EXIT_OK)
}

fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let data = synth_shapes(a.m, a.side, &mut SeededRng::derive(a.seed, DATA_STREAM))?;
    let (images, targets) = save_dataset(&data, &a.out, &a.stem)?;
    out!("wrote {} and {}", images.display(), targets.display());
    Ok(EXIT_OK)
}
