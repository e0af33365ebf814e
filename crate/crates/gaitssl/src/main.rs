//! Command-line entry point: synthesize data, preview augmentations,
//! pretrain, evaluate, and emit plot data.

use clap::{Parser, Subcommand};
use gaitssl::augment::{apply_general, apply_strong};
use gaitssl::cffn::Cffn;
use gaitssl::checkpoint;
use gaitssl::config::{Precision, RunConfig};
use gaitssl::dataset::{load_dataset, save_dataset, split_dataset, GaitDataset};
use gaitssl::error::{Error, Result};
use gaitssl::lda::{lda_projection, points_to_tsv};
use gaitssl::protocols::{
    finetune_eval, linear_eval, semi_supervised_eval, ProtocolConfig, ProtocolKind,
    SEMI_FRACTIONS,
};
use gaitssl::rng::{tags, RngStream};
use gaitssl::synth::generate_synthetic;
use gaitssl::topology::JointTopology;
use gaitssl::trainer::pretrain_run;
use gaitssl::Real;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "gaitssl", version, about = "Self-supervised gait emotion representation learning")]
struct Cli {
    /// JSON run configuration; command-line flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed fixing all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic 4-class gait dataset.
    Synth {
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Joint noise standard deviation in meters.
        #[arg(long)]
        noise: Option<f64>,
        /// Class ratios as four comma-separated fractions (angry,neutral,happy,sad).
        #[arg(long)]
        ratios: Option<String>,
    },
    /// Apply an augmentation pipeline to one sequence and write it as a
    /// single-sample dataset for inspection.
    AugmentPreview {
        #[arg(long)]
        data: PathBuf,
        /// Sample index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Pipeline to apply: general or strong.
        #[arg(long, default_value = "general")]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pretraining; writes a checkpoint and a training log.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Memory bank capacity.
        #[arg(long)]
        bank: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Numeric precision: f32 or f64.
        #[arg(long)]
        precision: Option<Precision>,
        /// Train with general augmentations and InfoNCE only.
        #[arg(long)]
        no_strong: bool,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Downstream evaluation of a pretrained checkpoint.
    Eval {
        #[command(subcommand)]
        protocol: EvalCommand,
    },
    /// Project embeddings to 2-D with a Fisher discriminant and write a
    /// point table for plotting.
    Project {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train/test split ratio applied to the dataset.
    #[arg(long)]
    split_ratio: Option<f64>,
    /// Protocol epochs override.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Frozen-encoder linear classification.
    Linear {
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Supervised finetuning of the whole model.
    Finetune {
        #[command(flatten)]
        args: EvalArgs,
        /// Use the 20-epoch finetune variant.
        #[arg(long)]
        short: bool,
    },
    /// Finetuning on a labeled fraction of the train split.
    Semi {
        #[command(flatten)]
        args: EvalArgs,
        /// Labeled fraction; one of 0.05, 0.10, 0.20, 0.50 unless overridden.
        #[arg(long)]
        fraction: f64,
        /// Accept fractions outside the standard set.
        #[arg(long)]
        allow_any_fraction: bool,
        /// Stratify the labeled subset per class.
        #[arg(long)]
        stratified: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    init_workers();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn init_workers() {
    if let Ok(v) = std::env::var("GAITSSL_WORKERS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Apply the optional output root from the environment to relative paths.
fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var("GAITSSL_OUT_ROOT") {
        Ok(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

fn load_config(cli_config: &Option<PathBuf>, cli_seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match cli_config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli_seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.config, cli.seed)?;
    match cli.command {
        Command::Synth { n, out, noise, ratios } => {
            if let Some(n) = n {
                cfg.synth.n_samples = n;
            }
            if let Some(noise) = noise {
                cfg.synth.noise_std = noise;
            }
            if let Some(spec) = ratios {
                cfg.synth.class_ratios = parse_ratios(&spec)?;
            }
            cfg.synth.seed = cfg.seed;
            cfg.validate()?;
            let out = resolve_out(&out);
            let ds = generate_synthetic(&cfg.synth, &JointTopology::canonical16())?;
            save_dataset(&ds, &out)?;
            cfg.dataset = Some(out.clone());
            cfg.write_resolved(&out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
            Ok(())
        }
        Command::AugmentPreview { data, index, kind, out } => {
            cfg.validate()?;
            let ds = load_dataset(&data)?;
            if index >= ds.len() {
                return Err(Error::InvalidConfig(format!(
                    "sample index {index} out of range for {} samples",
                    ds.len()
                )));
            }
            let out = resolve_out(&out);
            let mut rng = RngStream::new(cfg.seed).substream(&[tags::AUGMENT, index as u64]);
            let seq = &ds.sequences[index];
            let augmented = match kind.as_str() {
                "general" => apply_general(seq, &ds.topology, &cfg.general_augment, &mut rng),
                "strong" => apply_strong(
                    seq,
                    &ds.topology,
                    &cfg.general_augment,
                    &cfg.strong_augment,
                    &mut rng,
                ),
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown augmentation kind {other:?} (use general or strong)"
                    )))
                }
            };
            let preview = GaitDataset::new(vec![augmented], ds.topology.clone());
            save_dataset(&preview, &out)?;
            cfg.write_resolved(&out)?;
            println!("wrote augmented sample {index} to {}", out.display());
            Ok(())
        }
        Command::Pretrain {
            data,
            out,
            epochs,
            batch_size,
            bank,
            lr,
            precision,
            no_strong,
            alpha,
            beta,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(b) = bank {
                cfg.train.bank_capacity = b;
            }
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            if let Some(p) = precision {
                cfg.precision = p;
            }
            if no_strong {
                cfg.train.strong_branch = false;
            }
            if let Some(a) = alpha {
                cfg.train.alpha = a;
            }
            if let Some(b) = beta {
                cfg.train.beta = b;
            }
            cfg.train.seed = cfg.seed;
            cfg.dataset = Some(data.clone());
            cfg.validate()?;
            let out = resolve_out(&out);
            let ds = load_dataset(&data)?;
            let (train, _test) = split_dataset(&ds, cfg.split.ratio, cfg.split_seed())?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            cfg.out_dir = Some(out.clone());
            cfg.write_resolved(&out)?;
            match cfg.precision {
                Precision::F32 => run_pretrain::<f32>(&cfg, &train, &out),
                Precision::F64 => run_pretrain::<f64>(&cfg, &train, &out),
            }
        }
        Command::Eval { protocol } => run_eval(cfg, protocol),
        Command::Project { data, checkpoint: ckpt, out } => {
            cfg.validate()?;
            let ds = load_dataset(&data)?;
            let out = resolve_out(&out);
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let labels: Vec<usize> = ds
                .sequences
                .iter()
                .enumerate()
                .map(|(i, s)| s.label.map(|l| l.index()).ok_or(Error::MissingLabel(i)))
                .collect::<Result<_>>()?;
            let features = match checkpoint::checkpoint_dtype(&ckpt)?.as_str() {
                "f32" => features_f64::<f32>(&ckpt, &ds)?,
                "f64" => features_f64::<f64>(&ckpt, &ds)?,
                other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
            };
            let proj = lda_projection(&features, &labels, 1e-6)?;
            let tsv_path = out.join("embedding_points.tsv");
            std::fs::write(&tsv_path, points_to_tsv(&proj.points, &labels)).map_err(|e| {
                Error::Io {
                    path: tsv_path.clone(),
                    source: e,
                }
            })?;
            cfg.write_resolved(&out)?;
            println!("wrote {}", tsv_path.display());
            for (class, mean) in &proj.class_means {
                println!("class {class} mean: ({:.4}, {:.4})", mean[0], mean[1]);
            }
            Ok(())
        }
    }
}

fn parse_ratios(spec: &str) -> Result<[f64; 4]> {
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 4 {
        return Err(Error::InvalidConfig(format!(
            "expected four comma-separated ratios, got {spec:?}"
        )));
    }
    let mut out = [0.0; 4];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::InvalidConfig(format!("bad ratio {p:?}: {e}")))?;
    }
    Ok(out)
}

fn run_pretrain<R: Real>(cfg: &RunConfig, train: &GaitDataset, out: &Path) -> Result<()> {
    let log_path = out.join("train.log");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let mut io_failure: Option<std::io::Error> = None;
    let (trainer, reports) = pretrain_run::<R>(
        train,
        &cfg.encoder,
        &cfg.train,
        &cfg.general_augment,
        &cfg.strong_augment,
        |report| {
            let line = serde_json::to_string(report).expect("report serializes");
            if let Err(e) = writeln!(log, "{line}") {
                io_failure.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = io_failure {
        return Err(Error::Io {
            path: log_path,
            source: e,
        });
    }
    checkpoint::save_encoder(&out.join("checkpoint"), &trainer.pair.query)?;
    let last = reports.last().expect("at least one step");
    println!(
        "pretrained {} epochs ({} steps); final total loss {:.6}; checkpoint at {}",
        cfg.train.epochs,
        reports.len(),
        last.total,
        out.join("checkpoint").display()
    );
    Ok(())
}

fn run_eval(cfg: RunConfig, protocol: EvalCommand) -> Result<()> {
    let (args, kind, fraction, stratified) = match &protocol {
        EvalCommand::Linear { args } => (args, ProtocolKind::Linear, None, false),
        EvalCommand::Finetune { args, short } => (
            args,
            if *short {
                ProtocolKind::FinetuneShort
            } else {
                ProtocolKind::Finetune
            },
            None,
            false,
        ),
        EvalCommand::Semi {
            args,
            fraction,
            allow_any_fraction,
            stratified,
        } => {
            if !allow_any_fraction
                && !SEMI_FRACTIONS.iter().any(|f| (f - fraction).abs() < 1e-12)
            {
                return Err(Error::InvalidConfig(format!(
                    "labeled fraction {fraction} is not one of {SEMI_FRACTIONS:?}; \
                     pass --allow-any-fraction to override"
                )));
            }
            (args, ProtocolKind::Semi, Some(*fraction), *stratified)
        }
    };
    let mut cfg = cfg;
    if let Some(r) = args.split_ratio {
        cfg.split.ratio = r;
    }
    cfg.dataset = Some(args.data.clone());
    cfg.validate()?;
    let ds = load_dataset(&args.data)?;
    let (train, test) = split_dataset(&ds, cfg.split.ratio, cfg.split_seed())?;
    let out = resolve_out(&args.out);
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;

    let mut pcfg = ProtocolConfig::new(kind);
    pcfg.seed = cfg.seed;
    pcfg.fraction = fraction;
    pcfg.stratified = stratified;
    if let Some(e) = args.epochs {
        pcfg.epochs = e;
    }

    let report = match checkpoint::checkpoint_dtype(&args.checkpoint)?.as_str() {
        "f32" => eval_with::<f32>(&args.checkpoint, &train, &test, &pcfg)?,
        "f64" => eval_with::<f64>(&args.checkpoint, &train, &test, &pcfg)?,
        other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
    };

    let metrics_path = out.join("metrics.txt");
    std::fs::write(&metrics_path, report.to_text()).map_err(|e| Error::Io {
        path: metrics_path.clone(),
        source: e,
    })?;
    cfg.out_dir = Some(out.clone());
    cfg.write_resolved(&out)?;
    println!(
        "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}",
        report.accuracy, report.precision, report.recall, report.f1
    );
    println!("metrics written to {}", metrics_path.display());
    Ok(())
}

fn eval_with<R: Real>(
    ckpt: &Path,
    train: &GaitDataset,
    test: &GaitDataset,
    pcfg: &ProtocolConfig,
) -> Result<gaitssl::metrics::MetricsReport> {
    let encoder: Cffn<R> = checkpoint::load_encoder(ckpt)?;
    match pcfg.kind {
        ProtocolKind::Linear => linear_eval(&encoder, train, test, pcfg),
        ProtocolKind::Finetune | ProtocolKind::FinetuneShort => {
            finetune_eval(&encoder, train, test, pcfg).map(|(r, _)| r)
        }
        ProtocolKind::Semi => {
            let fraction = pcfg.fraction.expect("validated");
            semi_supervised_eval(&encoder, train, test, fraction, pcfg)
        }
    }
}

fn features_f64<R: Real>(ckpt: &Path, ds: &GaitDataset) -> Result<ndarray::Array2<f64>> {
    let encoder: Cffn<R> = checkpoint::load_encoder(ckpt)?;
    let features = gaitssl::protocols::extract_features(&encoder, ds);
    Ok(features.mapv(|v| v.to_f64()))
}
