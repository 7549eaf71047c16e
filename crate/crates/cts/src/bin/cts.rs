use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cts::checkpoint::load_checkpoint;
use cts::config::{RunConfig, RESOLVED_CONFIG_FILE};
use cts::data::{generate_synthetic_dataset, load_dataset, read_image, ShapeFamily, Split, SyntheticConfig};
use cts::sampling::{multistep_sigmas, predict_batch, sample_seed, segment_images, write_prediction};
use cts::training::{train_loop, LoopEvent, TrainerState};
use cts::Error;
use cts_core::schedule::{boundary_coeffs, ema_decay, karras_sigmas, step_schedule};

/// Consistency-model image segmentation: data, training and inference.
#[derive(Debug, Parser)]
#[command(name = "cts", version)]
#[command(after_help = "Any configuration key can be overridden as a dotted flag, e.g. `--train.lr 1e-4`.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic segmentation dataset.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus a JSONL log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write mask and overlay PNGs for images or a dataset split.
    Predict(PredictArgs),
    /// Write CSV tables of the noise schedule and its derived quantities.
    Schedule(ScheduleArgs),
}

#[derive(Debug, Args)]
struct SeedArg {
    #[arg(long, env = "CTS_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long, value_parser = parse_family)]
    shape_family: Option<ShapeFamily>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory (with manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Run directory for the log, resolved config and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    #[command(flatten)]
    seed: SeedArg,
    /// Train without multi-scale feature fusion.
    #[arg(long)]
    no_multiscale: bool,
    /// Continue from a checkpoint directory, using its stored config.
    #[arg(long, conflicts_with_all = ["config", "steps", "no_multiscale"])]
    resume: Option<PathBuf>,
    /// Print a progress line every this many steps (0 = quiet).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Sampling seed; defaults to the training seed.
    #[command(flatten)]
    seed: SeedArg,
    /// Report file (default: <checkpoint>/eval-<split>.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Images to segment.
    #[arg(long = "image", required_unless_present = "data", conflicts_with = "data")]
    images: Vec<PathBuf>,
    /// Dataset to segment instead of individual images.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Sampling levels; 1 is single-step, more uses the multistep sampler.
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of noise levels in sigmas.csv.
    #[arg(long, default_value_t = 18)]
    n_steps: usize,
    /// Number of evenly spaced training steps in curriculum.csv.
    #[arg(long, default_value_t = 101)]
    k_points: u64,
}

fn parse_family(s: &str) -> Result<ShapeFamily, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown shape family `{s}` (ellipse, smooth-blob)"))
}

/// Pulls `--section.key value` (or `--section.key=value`) pairs out of argv.
fn split_dotted(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut dotted = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        match arg.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|k| k.contains('.'))) {
            Some(flag) => match flag.split_once('=') {
                Some((k, v)) => dotted.push((k.to_string(), v.to_string())),
                None => {
                    let v = it.next().ok_or_else(|| format!("--{flag} needs a value"))?;
                    dotted.push((flag.to_string(), v));
                }
            },
            None => rest.push(arg),
        }
    }
    Ok((rest, dotted))
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<cts_core::Error> for Failure {
    fn from(e: cts_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let (argv, dotted) = match split_dotted(std::env::args().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    let result = match cli.command {
        Command::Train(args) => train(args, &dotted),
        other if !dotted.is_empty() => {
            let _ = other;
            Err(Failure::Usage("dotted configuration flags are only accepted by `train`".into()))
        }
        Command::GenData(args) => gen_data(args),
        Command::Eval(args) => eval(args),
        Command::Predict(args) => predict(args),
        Command::Schedule(args) => schedule(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e @ Error::NonFinite { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn gen_data(args: GenDataArgs) -> Result<(), Failure> {
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        seed: args.seed.seed.unwrap_or(d.seed),
        image_size: args.image_size.unwrap_or(d.image_size),
        n_train: args.n_train.unwrap_or(d.n_train),
        n_val: args.n_val.unwrap_or(d.n_val),
        n_test: args.n_test.unwrap_or(d.n_test),
        shape_family: args.shape_family.unwrap_or(d.shape_family),
        ..d
    };
    generate_synthetic_dataset(&cfg, &args.out)?;
    println!("{}", args.out.join(cts::data::MANIFEST_FILE).display());
    Ok(())
}

fn train(args: TrainArgs, dotted: &[(String, String)]) -> Result<(), Failure> {
    let (cfg, mut state) = match &args.resume {
        Some(dir) => {
            if !dotted.is_empty() || args.seed.seed.is_some() {
                return Err(Failure::Usage("--resume uses the checkpoint's config; drop other overrides".into()));
            }
            let ckpt = load_checkpoint(dir)?;
            (ckpt.manifest.config, ckpt.state)
        }
        None => {
            let mut cfg = match &args.config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            if let Some(k) = args.steps {
                cfg.train.total_steps = k;
            }
            if let Some(seed) = args.seed.seed {
                cfg.train.seed = seed;
            }
            if args.no_multiscale {
                cfg.train.use_multiscale = false;
            }
            let cfg = cfg
                .with_overrides(dotted.iter().map(|(k, v)| (k.as_str(), v.as_str())))
                .map_err(|e| Failure::Usage(e.to_string()))?
                .resolved();
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let state = TrainerState::new(&cfg)?;
            (cfg, state)
        }
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    cfg.save(&args.out.join(RESOLVED_CONFIG_FILE))?;
    let dataset = load_dataset(&args.data, &cfg.preprocess)?;
    let every = args.log_every;
    let outcome = train_loop(&cfg, &mut state, &dataset, &args.out, |event| {
        match event {
            LoopEvent::Step(r) if every > 0 && (r.step + 1) % every == 0 => eprintln!(
                "step {:>6}  l_ct {:.5}  l_s {:.5}  N {:>3}  {:.0} ms",
                r.step + 1,
                r.l_ct,
                r.l_s,
                r.n_k,
                r.wall_ms
            ),
            LoopEvent::Eval(e) => eprintln!("step {:>6}  val dice {:.4}  iou {:.4}", e.step, e.dice, e.iou),
            _ => {}
        }
        ControlFlow::Continue(())
    })?;
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let cfg = ckpt.config();
    let dataset = load_dataset(&args.data, &cfg.preprocess)?;
    let seed = args.seed.seed.unwrap_or(cfg.train.seed);
    let report = cts::evaluation::evaluate(
        &cfg.model(),
        &ckpt.sampling_params()?,
        dataset.split(args.split),
        seed,
        cfg.sampler.threshold,
    )?;
    let out = args
        .out
        .unwrap_or_else(|| args.checkpoint.join(format!("eval-{}.json", args.split)));
    report.save(&out)?;
    println!("{}", report.to_json()?);
    Ok(())
}

fn predict(args: PredictArgs) -> Result<(), Failure> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let cfg = ckpt.config();
    let model = cfg.model();
    let params = ckpt.sampling_params()?;
    let seed = args.seed.seed.unwrap_or(cfg.train.seed);
    let sigmas = multistep_sigmas(args.steps, &cfg.schedule).map_err(|e| Failure::Usage(e.to_string()))?;
    let threshold = cfg.sampler.threshold;
    if let Some(data) = &args.data {
        let dataset = load_dataset(data, &cfg.preprocess)?;
        let report = predict_batch(&model, &params, dataset.split(args.split), &args.out, seed, &sigmas, threshold)?;
        println!("mean dice {:.4}  mean iou {:.4}", report.mean_dice, report.mean_iou);
        return Ok(());
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    for path in &args.images {
        let id = image_id(path);
        let image = cfg.preprocess.apply(&read_image(path)?)?;
        let seg = segment_images(&model, &params, &[&image], &[sample_seed(seed, &id)], &sigmas, threshold)?.remove(0);
        write_prediction(&args.out, &id, &image, &seg.mask)?;
        println!("{}", args.out.join(format!("{id}_mask.png")).display());
    }
    Ok(())
}

fn image_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn schedule(args: ScheduleArgs) -> Result<(), Failure> {
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path)?.resolved(),
        None => RunConfig::default().resolved(),
    };
    let s = &cfg.schedule;
    s.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if args.k_points < 2 {
        return Err(Failure::Usage("--k-points must be at least 2".into()));
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    let write = |name: &str, text: String| -> Result<(), Failure> {
        let path = args.out.join(name);
        fs::write(&path, text).map_err(|source| Failure::Runtime(Error::Io { path, source }))
    };

    let sigmas = karras_sigmas(args.n_steps, s)?;
    let mut table = String::from("i,t\n");
    for (i, t) in sigmas.iter().enumerate() {
        table += &format!("{},{t:e}\n", i + 1);
    }
    write("sigmas.csv", table)?;

    let mut table = String::from("t,c_skip,c_out,c_in\n");
    for &t in &sigmas {
        let c = boundary_coeffs(t, s)?;
        table += &format!("{t:e},{:e},{:e},{:e}\n", c.c_skip, c.c_out, c.c_in);
    }
    write("coefficients.csv", table)?;

    let mut table = String::from("k,N,mu\n");
    let last = s.total_train_steps;
    for j in 0..args.k_points {
        let k = j * last / (args.k_points - 1);
        table += &format!("{k},{},{:e}\n", step_schedule(k, s)?, ema_decay(k, s)?);
    }
    write("curriculum.csv", table)?;
    println!("{}", args.out.display());
    Ok(())
}
