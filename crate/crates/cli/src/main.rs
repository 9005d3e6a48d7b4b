use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bdae_core::data::{
    augment_all, class_names, load_inputs, split_dataset, synth_dataset, FusionMode, Interpolation, Manifest,
    ModelInput, Normalization, PreprocessConfig, Sequence, SplitLevel, SynthOptions,
};
use bdae_core::metrics::{emit_report, write_normalized_confusion, ConfusionMatrix, ReportFormat};
use bdae_core::model::{
    evaluate, fit, layer_shapes, load_checkpoint_for, save_checkpoint, ArchConfig, Checkpoint, ModelGraph, TrainConfig,
};
use bdae_core::nifti::{read_header, write_volume, NiftiVolume};
use bdae_core::nn::gradcheck::{layer_suite, GradCheckOptions, GradCheckReport, LayerKind};
use bdae_core::{Error, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "bdae",
    version,
    about = "Infant brain developmental age estimation from 3D MRI"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
enum Command {
    /// Print a NIfTI-1 header.
    Inspect { path: PathBuf },
    /// Generate a synthetic labelled dataset and its manifest.
    Synth(SynthArgs),
    /// Resample and normalize every scan of a manifest.
    Preprocess(PreprocessArgs),
    /// Split a manifest into train.jsonl and val.jsonl.
    Split(SplitArgs),
    /// Train a model and write checkpoint, history and reports.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Evaluate(EvaluateArgs),
    /// Finite-difference checks of the backward passes.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    per_cohort: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Volume extent nx,ny,nz.
    #[arg(long, value_delimiter = ',', default_values_t = [40, 36, 32])]
    dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [Sequence::T1w])]
    sequences: Vec<Sequence>,
    #[arg(long, default_value_t = 0.1)]
    noise: f32,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    /// 80³ input, full widths.
    Canonical,
    /// 32³ input, narrow widths.
    Desk,
    /// 16³ input, minimal widths.
    Tiny,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Fusion {
    /// Every sequence is its own single-channel sample.
    Pooled,
    /// The sequences of a visit become input channels.
    Stacked,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Interp {
    Trilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Norm {
    Minmax,
    Zscore,
}

/// Flags that fix the network and its input grid.
#[derive(Debug, Args, Serialize)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Preset::Canonical)]
    preset: Preset,
    #[arg(long, value_enum, default_value_t = Fusion::Pooled)]
    fusion: Fusion,
    #[arg(long, value_enum, default_value_t = Interp::Trilinear)]
    interpolation: Interp,
    #[arg(long, value_enum, default_value_t = Norm::Minmax)]
    normalization: Norm,
    #[arg(long)]
    no_batchnorm: bool,
    #[arg(long)]
    no_dropout: bool,
}

impl ModelArgs {
    fn arch(&self) -> ArchConfig {
        let channels = match self.fusion {
            Fusion::Pooled => 1,
            Fusion::Stacked => 3,
        };
        let arch = match self.preset {
            Preset::Canonical => ArchConfig::canonical(channels),
            Preset::Desk => ArchConfig::desk(channels),
            Preset::Tiny => ArchConfig::tiny(channels),
        };
        arch.with_regularization(!self.no_batchnorm, !self.no_dropout)
    }

    fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            extent: self.arch().input_extent,
            interpolation: match self.interpolation {
                Interp::Trilinear => Interpolation::Trilinear,
                Interp::Nearest => Interpolation::Nearest,
            },
            normalization: match self.normalization {
                Norm::Minmax => Normalization::MinMax,
                Norm::Zscore => Normalization::ZScore,
            },
            fusion: match self.fusion {
                Fusion::Pooled => FusionMode::Pooled,
                Fusion::Stacked => FusionMode::ChannelStacked,
            },
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Level {
    Scan,
    Subject,
}

impl From<Level> for SplitLevel {
    fn from(l: Level) -> Self {
        match l {
            Level::Scan => SplitLevel::Scan,
            Level::Subject => SplitLevel::Subject,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of records assigned to training.
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    #[arg(long, value_enum, default_value_t = Level::Scan)]
    level: Level,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 600)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Learning rate; 1e-4 for the canonical preset, 1e-3 for the smaller ones.
    #[arg(long)]
    lr: Option<f64>,
    /// Fraction of records held out for validation; 0 trains on everything.
    #[arg(long, default_value_t = 0.2)]
    val_ratio: f64,
    #[arg(long, value_enum, default_value_t = Level::Scan)]
    split_level: Level,
    #[arg(long)]
    no_augment: bool,
    /// Width shift of the augmentation, in voxels; defaults to 1/16 of the extent.
    #[arg(long)]
    shift: Option<usize>,
    #[arg(long)]
    early_stopping: Option<usize>,
    #[arg(long)]
    target_loss: Option<f64>,
    /// Keep momentum-averaged BN statistics instead of re-estimating them each epoch.
    #[arg(long)]
    no_bn_recalibration: bool,
    /// Print the layer and parameter table and exit.
    #[arg(long)]
    dry_run: bool,
}

impl TrainArgs {
    fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            early_stopping: self.early_stopping,
            target_train_loss: self.target_loss,
            recalibrate_batchnorm: !self.no_bn_recalibration,
            ..Default::default()
        };
        cfg.optimizer.lr = self.lr.unwrap_or(match self.model.preset {
            Preset::Canonical => cfg.optimizer.lr,
            Preset::Desk | Preset::Tiny => 1e-3,
        });
        cfg
    }

    fn shift(&self) -> usize {
        self.shift.unwrap_or((self.model.arch().input_extent[2] / 16).max(1))
    }
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Scale {
    Layer,
    Model,
}

#[derive(Debug, Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Scale::Layer)]
    scale: Scale,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Restrict the layer suite to one kind (conv3d, maxpool3d, batchnorm, relu, dropout, dense, softmax_ce).
    #[arg(long)]
    layer: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the reports as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = configure_workers() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    eprintln!("{}", resolved_config(&cli.command));
    let result = match &cli.command {
        Command::Inspect { path } => cmd_inspect(path),
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK)
        }
    }
}

/// `BDAE_WORKERS` sizes the thread pool; unset means one per core.
fn configure_workers() -> Result<(), String> {
    let Ok(raw) = std::env::var("BDAE_WORKERS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("BDAE_WORKERS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

/// The parsed flags plus every derived setting, as one JSON object.
fn resolved_config(cmd: &Command) -> String {
    let mut v = serde_json::to_value(cmd).expect("flags serialize");
    let derived = match cmd {
        Command::Preprocess(a) => Some(serde_json::json!({ "preprocess": a.model.preprocess() })),
        Command::Evaluate(a) => Some(serde_json::json!({
            "arch": a.model.arch(),
            "preprocess": a.model.preprocess(),
        })),
        Command::Train(a) => Some(serde_json::json!({
            "arch": a.model.arch(),
            "preprocess": a.model.preprocess(),
            "train": a.train_config(),
            "augment_shift": (!a.no_augment).then(|| a.shift()),
        })),
        _ => None,
    };
    if let (Some(obj), Some(serde_json::Value::Object(extra))) = (v.as_object_mut(), derived) {
        obj.insert("resolved".into(), serde_json::Value::Object(extra));
    }
    v.to_string()
}

fn create_out(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Data(e.into()))
}

fn cmd_inspect(path: &Path) -> CliResult {
    let h = read_header(path)?;
    let [nx, ny, nz] = h.spatial_dims();
    let [sx, sy, sz] = h.voxel_spacing();
    println!("dims: {nx} x {ny} x {nz}");
    println!("rank: {}", h.rank());
    match h.datatype_kind() {
        Ok(dt) => println!("datatype: {dt:?} (code {}, {} bits)", h.datatype, h.bitpix),
        Err(_) => println!("datatype: unknown (code {})", h.datatype),
    }
    println!("pixdim: {sx} x {sy} x {sz}");
    println!("scl_slope: {}", h.scl_slope);
    println!("scl_inter: {}", h.scl_inter);
    println!("vox_offset: {}", h.vox_offset);
    println!("endianness: {:?}", h.endianness);
    let descrip = h.description();
    if !descrip.is_empty() {
        println!("descrip: {descrip}");
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> CliResult {
    if a.dims.len() != 3 {
        return Err(Failure::Usage(format!(
            "--dims takes nx,ny,nz, got {} values",
            a.dims.len()
        )));
    }
    let opts = SynthOptions {
        dims: [a.dims[0], a.dims[1], a.dims[2]],
        sequences: a.sequences.clone(),
        noise: a.noise,
    };
    create_out(&a.out)?;
    let m = synth_dataset(&a.out, a.seed, a.per_cohort, &opts)?;
    println!("wrote {} scans and {}", m.len(), a.out.join("manifest.jsonl").display());
    Ok(())
}

fn cmd_preprocess(a: &PreprocessArgs) -> CliResult {
    let manifest = Manifest::read(&a.manifest)?;
    let inputs = load_inputs(&manifest, &a.model.preprocess())?;
    create_out(&a.out)?;
    let mut index = String::new();
    for (i, input) in inputs.iter().enumerate() {
        let dims = input.volume.dims();
        let (d, h, w, c) = (dims[0], dims[1], dims[2], dims[3]);
        let mut files = Vec::with_capacity(c);
        for ch in 0..c {
            // [D, H, W] channel slice back to NIfTI's x-fastest layout
            let mut voxels = Vec::with_capacity(d * h * w);
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        voxels.push(input.volume.data()[((z * h + y) * w + x) * c + ch]);
                    }
                }
            }
            let vol = NiftiVolume::from_tensor(Tensor::from_vec(&[d, h, w], voxels)?, [1.0; 3])?;
            let name = format!("{i:04}_c{ch}.nii");
            write_volume(&vol, a.out.join(&name))?;
            files.push(name);
        }
        let line = serde_json::json!({ "files": files, "label": input.label, "sources": input.sources });
        index.push_str(&line.to_string());
        index.push('\n');
    }
    fs::write(a.out.join("inputs.jsonl"), index).map_err(|e| Failure::Data(e.into()))?;
    println!("wrote {} inputs to {}", inputs.len(), a.out.display());
    Ok(())
}

fn cmd_split(a: &SplitArgs) -> CliResult {
    let manifest = Manifest::read(&a.manifest)?;
    let (train, val) = split_dataset(&manifest, a.train_ratio, a.seed, a.level.into())?;
    create_out(&a.out)?;
    train.write(&a.out.join("train.jsonl"))?;
    val.write(&a.out.join("val.jsonl"))?;
    println!("train {} / val {}", train.len(), val.len());
    Ok(())
}

fn print_param_report(arch: &ArchConfig) -> CliResult {
    let rows = layer_shapes(arch)?;
    println!("{:<26} {:<26} {:>12}", "Layer (type)", "Output Shape", "Param #");
    for r in &rows {
        let label = format!("{} ({})", r.spec.name, r.spec.type_name());
        println!("{label:<26} {:<26} {:>12}", r.output.to_string(), r.params());
    }
    let model = ModelGraph::<f32>::new(arch.clone(), 0)?;
    let (total, trainable, frozen) = model.count_params();
    println!("Total params: {total}");
    println!("Trainable params: {trainable}");
    println!("Non-trainable params: {frozen}");
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CliResult {
    let arch = a.model.arch();
    arch.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let train_cfg = a.train_config();
    train_cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if !(0.0..1.0).contains(&a.val_ratio) {
        return Err(Failure::Usage(format!(
            "--val-ratio must be in [0, 1), got {}",
            a.val_ratio
        )));
    }
    if a.dry_run {
        return print_param_report(&arch);
    }

    let manifest = Manifest::read(&a.manifest)?;
    let (train_m, val_m) = if a.val_ratio > 0.0 {
        split_dataset(&manifest, 1.0 - a.val_ratio, a.seed, a.split_level.into())?
    } else {
        (manifest, Manifest::default())
    };
    let pre = a.model.preprocess();
    let mut train = load_inputs(&train_m, &pre)?;
    if !a.no_augment {
        train = augment_all(&train, a.shift())?;
    }
    let val = if val_m.is_empty() {
        Vec::new()
    } else {
        load_inputs(&val_m, &pre)?
    };
    info!("training on {} inputs, validating on {}", train.len(), val.len());

    let mut model = ModelGraph::<f32>::new(arch.clone(), a.seed)?;
    let history = fit(&mut model, &train, &val, &train_cfg)?;

    create_out(&a.out)?;
    history.write_csv(&a.out.join("history.csv"))?;
    let config_json = serde_json::to_vec(&serde_json::json!({
        "arch": arch,
        "preprocess": pre,
        "train": train_cfg,
        "augment_shift": (!a.no_augment).then(|| a.shift()),
    }))
    .map_err(|e| Failure::Data(e.into()))?;
    let epochs = history.records.len() as u32;
    let scored = if val.is_empty() { &train } else { &val };
    write_reports(&model, scored, a.batch_size, &a.out)?;
    save_checkpoint(
        &Checkpoint::new(model, epochs, &config_json),
        &a.out.join("checkpoint.bdae"),
    )?;
    if let Some(last) = history.last() {
        println!(
            "epoch {}: train_loss={:.4} train_acc={:.4}{}",
            last.epoch,
            last.train_loss,
            last.train_acc,
            last.val_acc.map(|v| format!(" val_acc={v:.4}")).unwrap_or_default()
        );
    }
    Ok(())
}

fn write_reports(model: &ModelGraph<f32>, inputs: &[ModelInput], batch_size: usize, out: &Path) -> CliResult {
    let eval = evaluate(model, inputs, batch_size)?;
    let cm = ConfusionMatrix::from_labels(class_names(), &eval.labels, &eval.predictions)?;
    let report = emit_report(&cm, &out.join("report.json"), ReportFormat::Json)?;
    fs::write(out.join("report.csv"), report.to_csv()?).map_err(|e| Failure::Data(e.into()))?;
    write_normalized_confusion(&cm, &out.join("confusion.csv"))?;
    println!(
        "accuracy={:.4} macro_precision={:.4} macro_recall={:.4} macro_f1={:.4}",
        report.summary.overall_accuracy,
        report.summary.macro_precision,
        report.summary.macro_recall,
        report.summary.macro_f1
    );
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult {
    let arch = a.model.arch();
    let ckpt = load_checkpoint_for(&a.checkpoint, &arch)?;
    let manifest = Manifest::read(&a.manifest)?;
    let inputs = load_inputs(&manifest, &a.model.preprocess())?;
    create_out(&a.out)?;
    write_reports(&ckpt.model, &inputs, a.batch_size, &a.out)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult {
    let opts = GradCheckOptions {
        step: a.step,
        tolerance: a.tolerance,
        ..Default::default()
    };
    let reports: Vec<GradCheckReport> = match a.scale {
        Scale::Layer => {
            let only = match &a.layer {
                None => None,
                Some(name) => {
                    Some(LayerKind::parse(name).ok_or_else(|| Failure::Usage(format!("unknown layer kind {name:?}")))?)
                }
            };
            layer_suite(only, &opts)?
        }
        Scale::Model => {
            if a.layer.is_some() {
                return Err(Failure::Usage("--layer applies to --scale layer only".into()));
            }
            bdae_core::model::model_gradcheck(&ArchConfig::tiny(1), &opts, a.seed)?
        }
    };
    for r in &reports {
        println!("{r}");
    }
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_out(parent)?;
        }
        let json = serde_json::to_string_pretty(&reports).map_err(|e| Failure::Data(e.into()))?;
        fs::write(out, json).map_err(|e| Failure::Data(e.into()))?;
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure::Check(format!(
            "{failed} of {} gradient checks failed",
            reports.len()
        )));
    }
    Ok(())
}
