mod runconfig;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use effnet3d::checkpoint::{load_interchange, Checkpoint};
use effnet3d::data::{
    build_manifest, frame_file_name, preprocess, read_frames, sample_clip, synth_generate, ClipSpec,
    Label, Manifest, Normalization, Split, SynthConfig, MANIFEST_FILE,
};
use effnet3d::layers::{Layer, Mode};
use effnet3d::model::{inflate_2d, Model};
use effnet3d::trainer::{evaluate, softmax, EpochMetrics, TrainOutputs, Trainer, METRICS_HEADER};
use effnet3d::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use runconfig::RunConfig;

#[derive(Parser)]
#[command(name = "effnet3d", version, about = "3D EfficientNet video classifier")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic drift/normal dataset with a manifest.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and print metrics as JSON.
    Eval(EvalArgs),
    /// Classify one clip directory and print JSON.
    Predict(PredictArgs),
    /// Print the per-layer table and parameter count of a variant.
    Inspect(RunArgs),
    /// Print the effective run configuration.
    Config(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    videos: usize,
    #[arg(long, default_value_t = 49)]
    frames: usize,
    #[arg(long, default_value_t = 90)]
    height: usize,
    #[arg(long, default_value_t = 160)]
    width: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
}

/// Settings shared by every command that builds a model.
#[derive(Args, Default)]
struct RunArgs {
    /// `key = value` file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["b0", "b1", "b2"])]
    variant: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    width_mult: Option<f64>,
    #[arg(long)]
    depth_mult: Option<f64>,
    /// Keep only the first N stages of the stage table.
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    clip_len: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    bn_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long, value_parser = ["half", "imagenet"])]
    normalization: Option<String>,
    #[arg(long)]
    no_augment: bool,
    /// Any config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root (uses `manifest.json` there, else scans it).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, metrics and config dump.
    #[arg(long)]
    out: PathBuf,
    /// 2D interchange weights (DNWX) to inflate before training.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val", value_parser = ["train", "val"])]
    split: String,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, value_parser = ["half", "imagenet"])]
    normalization: Option<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of `frame_*.ppm` files.
    #[arg(long)]
    clip: PathBuf,
    #[arg(long, value_parser = ["half", "imagenet"])]
    normalization: Option<String>,
}

impl RunArgs {
    fn resolve(&self, cli: &Cli) -> Result<RunConfig> {
        let mut rc = RunConfig::default();
        if let Some(path) = &self.config {
            rc.apply_file(path)?;
        }
        let mut pairs: Vec<(&str, String)> = Vec::new();
        macro_rules! flag {
            ($field:ident, $key:literal) => {
                if let Some(v) = &self.$field {
                    pairs.push(($key, v.to_string()));
                }
            };
        }
        flag!(seed, "seed");
        flag!(variant, "variant");
        flag!(classes, "classes");
        flag!(epochs, "epochs");
        flag!(batch, "batch");
        flag!(lr, "lr");
        flag!(momentum, "momentum");
        flag!(decay, "decay");
        flag!(patience, "patience");
        flag!(width_mult, "width_mult");
        flag!(depth_mult, "depth_mult");
        flag!(stages, "stages");
        flag!(clip_len, "clip_len");
        flag!(height, "height");
        flag!(width, "width");
        flag!(bn_decay, "bn_decay");
        flag!(dropout, "dropout");
        flag!(normalization, "normalization");
        if self.no_augment {
            pairs.push(("augment", "false".into()));
        }
        if let Some(t) = cli.threads {
            pairs.push(("threads", t.to_string()));
        }
        if cli.deterministic {
            pairs.push(("deterministic", "true".into()));
        }
        for (k, v) in pairs {
            rc.set(k, &v)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            rc.set(k.trim(), v)?;
        }
        rc.validate()?;
        Ok(rc)
    }
}

fn configure_threads(threads: usize, deterministic: bool) {
    let n = if deterministic { 1 } else { threads };
    // Fails only if a pool already exists, which is harmless here.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_dataset(root: &Path, seed: u64, train_frac: f64) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    if path.exists() {
        Manifest::load(&path)
    } else {
        build_manifest(root, seed, train_frac)
    }
}

fn metrics_json(split: &str, m: &EpochMetrics) -> serde_json::Value {
    json!({
        "split": split,
        "samples": m.samples(),
        "loss": m.loss,
        "accuracy": m.accuracy,
        "confusion": m.confusion,
    })
}

fn class_name(i: usize) -> String {
    Label::from_index(i).map_or_else(|| format!("class_{i}"), |l| l.as_str().to_string())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        videos: args.videos,
        frames: args.frames,
        height: args.height,
        width: args.width,
        seed: args.seed,
        train_frac: args.train_frac,
    };
    let m = synth_generate(&args.out, &cfg)?;
    eprintln!(
        "wrote {} videos ({} frames) to {}",
        m.videos.len(),
        m.total_frames(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let rc = args.run.resolve(cli)?;
    let manifest = load_dataset(&args.data, rc.seed, rc.train_frac)?;
    let model_cfg = rc.model_config()?;
    let tc = rc.train_config()?;
    let mut model = Model::build(&model_cfg, rc.seed)?;
    if let Some(init) = &args.init {
        let (_, weights) = load_interchange(init)?;
        let report = inflate_2d(&mut model, &weights)?;
        eprintln!(
            "inflated {} tensors ({} left at init, {} unused)",
            report.matched.len(),
            report.unmatched.len(),
            report.unused.len()
        );
        if rc.normalization != Normalization::IMAGENET {
            eprintln!("note: pretrained weights usually expect --normalization imagenet");
        }
    }

    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let config_path = args.out.join("run_config.txt");
    fs::write(&config_path, rc.dump()?).map_err(io_err(&config_path))?;
    let outputs = TrainOutputs {
        checkpoint: args.out.join("checkpoint.dn3d"),
        metrics_csv: args.out.join("metrics.csv"),
    };
    eprintln!("{} parameters; {METRICS_HEADER}", model.count_params());
    let report = Trainer::train(&mut model, &args.data, &manifest, &tc, &outputs, &mut |log| {
        eprintln!(
            "epoch {:>3}  train loss {:.4} acc {:.3}  val loss {:.4} acc {:.3}  {:?}",
            log.train.epoch, log.train.loss, log.train.accuracy, log.val.loss, log.val.accuracy, log.decision
        )
    })?;
    let best = report
        .best_epoch
        .and_then(|e| report.history.iter().find(|l| l.val.epoch == e));
    let summary = json!({
        "epochs_run": report.history.len(),
        "best_epoch": report.best_epoch,
        "stopped_early": report.stopped_early,
        "steps": report.steps,
        "best_val": best.map(|l| metrics_json("val", &l.val)),
        "checkpoint": outputs.checkpoint,
        "checkpoint_sha256": report.checkpoint_sha256,
        "metrics": outputs.metrics_csv,
    });
    println!("{summary}");
    Ok(())
}

fn clip_spec_for(ck: &Checkpoint, normalization: Option<&str>) -> ClipSpec {
    let [t, h, w] = ck.header.model.resolution;
    let stored = ck.header.clip.map(|c| c.normalization);
    ClipSpec {
        clip_len: t,
        height: h,
        width: w,
        normalization: normalization
            .and_then(Normalization::by_name)
            .or(stored)
            .unwrap_or(Normalization::HALF),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut model = ck.build_model()?;
    let manifest = load_dataset(&args.data, ck.header.seed, 0.8)?;
    let split = if args.split == "train" { Split::Train } else { Split::Val };
    let records = manifest.split(split);
    let spec = clip_spec_for(&ck, args.normalization.as_deref());
    let m = evaluate(&mut model, &args.data, &records, &spec, args.batch)?;
    println!("{}", metrics_json(&args.split, &m));
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut model = ck.build_model()?;
    let spec = clip_spec_for(&ck, args.normalization.as_deref());
    let mut count = 0;
    while args.clip.join(frame_file_name(count)).exists() {
        count += 1;
    }
    if count == 0 {
        if !args.clip.is_dir() {
            return Err(Error::Io {
                path: args.clip.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "clip directory not found"),
            });
        }
        return Err(Error::Data(format!("{}: no frame_*.ppm files", args.clip.display())));
    }
    let indices = sample_clip(count, spec.clip_len, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
    let frames = read_frames(&args.clip, &indices)?;
    let clip = preprocess(&frames, spec.height, spec.width, &spec.normalization)?;
    let dims: Vec<usize> = std::iter::once(1).chain(clip.dims().iter().copied()).collect();
    let logits = model.forward(&clip.reshape(dims)?, Mode::Eval)?;
    let probs = softmax(&logits)?.remove(0);
    let best = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
    let classes: Vec<String> = (0..probs.len()).map(class_name).collect();
    println!(
        "{}",
        json!({"label": class_name(best), "probabilities": probs, "classes": classes})
    );
    Ok(())
}

fn cmd_inspect(cli: &Cli, args: &RunArgs) -> Result<()> {
    let rc = args.resolve(cli)?;
    let model = Model::<f32>::build(&rc.model_config()?, rc.seed)?;
    let rows = model.summary()?;
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    println!("{:<width$}  {:<28}  {:>10}", "layer", "output shape", "params");
    for r in &rows {
        let shape = format!("{:?}", r.output_dims);
        println!("{:<width$}  {:<28}  {:>10}", r.name, shape, r.params);
    }
    println!("total params: {}", model.count_params());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Geometry(_) => 2,
        Error::Io { .. }
        | Error::Data(_)
        | Error::BadMagic { .. }
        | Error::VersionMismatch { .. }
        | Error::Truncated(_)
        | Error::TensorShapeMismatch { .. }
        | Error::Malformed(_) => 3,
        Error::Divergence { .. } | Error::NonFiniteGradient(_) | Error::InvalidMetric(_) => 4,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Inspect(a) => cmd_inspect(cli, a),
        Command::Config(a) => {
            print!("{}", a.resolve(cli)?.dump()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads(cli.threads.unwrap_or(0), cli.deterministic);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
