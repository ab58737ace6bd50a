use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ocr_core::data::{load_dataset, save_dataset};
use ocr_core::harness::{
    attack, corruption_stream, evaluate, fourier_map, fourier_map_csv, layer_ablation, train, tta_adapt,
};
use ocr_core::{AttackConfig, AttackMethod, Checkpoint, DomainDataset, Error, ExperimentConfig, Model, Result};
use ocr_core::{ConsistencyKind, CorruptionKind, TtaConfig, TtaMethod};

#[derive(Parser)]
#[command(name = "ocr", version, about = "Order-preserving consistency regularization experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; unspecified fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Start from the reduced desk-scale preset instead of the full defaults.
    #[arg(long, global = true)]
    desk: bool,
    /// Overrides the consistency method (none, ocr, representation-l1, representation-l2, prediction-ce).
    #[arg(long, global = true)]
    consistency: Option<String>,
}

#[derive(Args)]
struct ModelInput {
    /// Trained checkpoint (OCRCKPT1).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file (OCRDATA1); defaults to the benchmark target domain.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the benchmark domains as dataset files.
    GenData,
    /// Train a model; writes metrics.csv, checkpoint.bin and summary.json.
    Train,
    /// Top-1/3/5 accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        input: ModelInput,
    },
    /// Robust top-1 under a gradient-sign attack.
    Attack {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long, value_parser = parse_attack, default_value = "pgd")]
        method: AttackMethod,
        #[arg(long, default_value_t = 0.01)]
        eps: f64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        step_size: f64,
    },
    /// Error-rate map under Fourier-basis noise; writes fourier.csv.
    Fourier {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long, default_value_t = 9)]
        grid: usize,
        #[arg(long, default_value_t = 4.0)]
        eps: f64,
    },
    /// Online test-time adaptation on the corrupted source holdout stream.
    Tta {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_tta, default_value = "entropy-ocr")]
        method: TtaMethod,
        #[arg(long)]
        continual: bool,
        #[arg(long, default_value_t = 5)]
        severity: u8,
    },
    /// Train with OCR attached to each named representation.
    AblateLayer {
        /// Representation names (`input`, `layer1`, ...); all when omitted.
        #[arg(long = "layer")]
        layers: Vec<String>,
    },
}

fn parse_attack(s: &str) -> std::result::Result<AttackMethod, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown attack '{s}' (fgsm, bim, pgd)"))
}

fn parse_tta(s: &str) -> std::result::Result<TtaMethod, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown tta method '{s}' (bn-only, entropy, entropy-ocr)"))
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if common.desk => ExperimentConfig::desk(),
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(kind) = &common.consistency {
        cfg.method.kind = ConsistencyKind::parse(kind)?;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<Option<&Path>> {
    match &cfg.output_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Ok(Some(dir))
        }
        None => Ok(None),
    }
}

/// Prints `value` and stores it as `name` in the output directory.
fn report(cfg: &ExperimentConfig, name: &str, value: serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(&value)?;
    println!("{text}");
    if let Some(dir) = out_dir(cfg)? {
        fs::write(dir.join(name), text + "\n")?;
    }
    Ok(())
}

fn load_model(input_path: &Path, d: &DomainDataset) -> Result<Model> {
    let model = Model::from_checkpoint(&Checkpoint::load(input_path)?)?;
    if model.backbone.input_dim() != d.feature_dim() {
        return Err(Error::Config(format!(
            "checkpoint expects {} input features, data has {}",
            model.backbone.input_dim(),
            d.feature_dim()
        )));
    }
    if d.classes != model.classes() {
        return Err(Error::Config(format!("checkpoint has {} classes, data has {}", model.classes(), d.classes)));
    }
    Ok(model)
}

fn model_and_data(cfg: &ExperimentConfig, input: &ModelInput) -> Result<(Model, DomainDataset)> {
    let data = match &input.data {
        Some(path) => load_dataset(path)?,
        None => cfg.benchmark.build(cfg.seed)?.target,
    };
    Ok((load_model(&input.checkpoint, &data)?, data))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData => {
            let dir = out_dir(&cfg)?.ok_or_else(|| Error::Config("gen-data needs --out".into()))?;
            let bench = cfg.benchmark.build(cfg.seed)?;
            let mut files = Vec::new();
            for (i, d) in bench.sources.iter().enumerate() {
                files.push((format!("source{i}.bin"), d));
            }
            files.push(("holdout.bin".into(), &bench.holdout));
            files.push(("target.bin".into(), &bench.target));
            for (name, d) in &files {
                save_dataset(d, dir.join(name))?;
            }
            let listing: Vec<_> = files.iter().map(|(n, d)| json!({"file": n, "samples": d.len()})).collect();
            println!("{}", serde_json::to_string_pretty(&listing)?);
        }
        Command::Train => {
            let outcome = train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&ocr_core::harness::summarize(&cfg, &outcome))?);
        }
        Command::Eval { input } => {
            let (model, data) = model_and_data(&cfg, &input)?;
            let ks: Vec<usize> = [1, 3, 5].iter().map(|&k| k.min(model.classes())).collect();
            let acc = evaluate(&model, &data, &ks)?;
            report(&cfg, "eval.json", json!({"samples": data.len(), "top1": acc[0], "top3": acc[1], "top5": acc[2]}))?;
        }
        Command::Attack { input, method, eps, steps, step_size } => {
            let (model, data) = model_and_data(&cfg, &input)?;
            let ac = AttackConfig { method, eps, steps, step_size, ..AttackConfig::standard(method, cfg.seed) };
            let robust = attack(&model, &data, &ac)?;
            report(&cfg, "attack.json", json!({"method": method, "eps": eps, "steps": steps, "step_size": step_size, "robust_top1": robust}))?;
        }
        Command::Fourier { input, grid, eps } => {
            let (model, data) = model_and_data(&cfg, &input)?;
            let csv = fourier_map_csv(&fourier_map(&model, &data, grid, eps, cfg.seed)?);
            print!("{csv}");
            if let Some(dir) = out_dir(&cfg)? {
                fs::write(dir.join("fourier.csv"), csv)?;
            }
        }
        Command::Tta { checkpoint, method, continual, severity } => {
            let bench = cfg.benchmark.build(cfg.seed)?;
            let model = load_model(&checkpoint, &bench.holdout)?;
            let stream = corruption_stream(&bench.holdout, severity, cfg.seed)?;
            let tc = TtaConfig { method, continual, seed: cfg.seed, augment: cfg.augment.clone(), ..TtaConfig::default() };
            let accs = tta_adapt(&model, &stream, &tc)?;
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            let segments: Vec<_> =
                CorruptionKind::ALL.iter().zip(&accs).map(|(k, a)| json!({"corruption": k, "top1": a})).collect();
            report(&cfg, "tta.json", json!({"method": method, "continual": continual, "severity": severity, "segments": segments, "mean_top1": mean}))?;
        }
        Command::AblateLayer { layers } => {
            let names = if layers.is_empty() {
                ocr_core::nets::mlp_init(&cfg.net_dims(), 0)?.representation_names()
            } else {
                layers
            };
            let mut rows = Vec::new();
            for layer in names {
                let mut run_cfg = cfg.clone();
                run_cfg.output_dir = cfg.output_dir.as_ref().map(|d| d.join(&layer));
                rows.push(json!({"layer": layer, "top1": layer_ablation(&run_cfg, &layer)?}));
            }
            report(&cfg, "ablation.json", json!(rows))?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Format { .. } => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
