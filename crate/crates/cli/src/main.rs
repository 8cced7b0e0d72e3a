//! `mddlab`: generate synthetic domain-shift data, pre-train the U-Net,
//! run MDD adaptation, evaluate Dice, run the freezing ablation and plot
//! learning curves — all reproducible from one JSON config.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mddlab_core::adaptation::{pretrain, run_adaptation, AdaptError, StopReason};
use mddlab_core::data::{generate_synthetic_pair, load_dataset, save_dataset, DataError};
use mddlab_core::evaluation::{
    curves_svg, dataset_dice, export_curves, load_curves, run_ablation, sig6, AblationSpec,
    EvalError, MetricsRecord,
};
use mddlab_core::model::{load_checkpoint, ModelError};
use mddlab_core::{build_model, LossReport, ModelSplit};

use config::{load_config, Preset, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Exit code 2: bad flags, bad config, incompatible checkpoint.
    Config(String),
    /// Exit code 3: missing or malformed data.
    Data(String),
    /// Exit code 4: training diverged.
    Divergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Divergence(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<AdaptError> for CliError {
    fn from(e: AdaptError) -> Self {
        match e {
            AdaptError::Divergence { .. } => CliError::Divergence(e.to_string()),
            AdaptError::EmptyDataset(_) | AdaptError::MissingLabels => CliError::Data(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::MissingLabels | EvalError::Data(_) | EvalError::Io(_) | EvalError::MalformedCsv(_) => {
                CliError::Data(e.to_string())
            }
            EvalError::Adapt(a) => a.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "mddlab", version, about = "MDD-UNet domain adaptation laboratory")]
struct Cli {
    /// JSON config file; its values override the preset, flags override both
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: ./out)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed; also honors the MDDLAB_SEED environment variable
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Named profile applied before the config file
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic source/target dataset pair
    Synth,
    /// Train the plain U-Net on the labeled source dataset
    Pretrain {
        /// Source dataset directory
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune a pretrained checkpoint with the MDD minimax objective
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Evaluate a checkpoint on a labeled dataset (3D volume Dice)
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the frozen-layer ablation grid from one pretrained checkpoint
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Re-render learning-curve plots from exported curves.csv files
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        curves: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let cfg = load_config(cli.preset, cli.config.as_deref(), cli.seed)?;
    match cli.cmd {
        Cmd::Synth => cmd_synth(&cfg, &out),
        Cmd::Pretrain { data } => cmd_pretrain(&cfg, &out, &data),
        Cmd::Adapt {
            checkpoint,
            source,
            target,
        } => cmd_adapt(&cfg, &out, &checkpoint, &source, &target),
        Cmd::Eval { checkpoint, data } => cmd_eval(&out, &checkpoint, &data),
        Cmd::Ablate {
            checkpoint,
            source,
            target,
        } => cmd_ablate(&cfg, &out, &checkpoint, &source, &target),
        Cmd::Plot { curves } => cmd_plot(&out, &curves),
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let pair = generate_synthetic_pair(
        cfg.n_source,
        cfg.n_target,
        &cfg.shift,
        cfg.geometry_seed,
        cfg.model.input_size,
    )?;
    save_dataset(&pair.source, &out.join("source"))?;
    save_dataset(&pair.target, &out.join("target"))?;
    cfg.save(out)?;
    println!(
        "wrote {} source and {} target slices under {}",
        pair.source.len(),
        pair.target.len(),
        out.display()
    );
    Ok(())
}

fn check_dataset_shape(cfg: &RunConfig, h: usize, w: usize) -> Result<(), CliError> {
    if (h, w) != cfg.model.input_size {
        return Err(CliError::Config(format!(
            "dataset slices are {h}x{w} but the model expects {}x{}",
            cfg.model.input_size.0, cfg.model.input_size.1
        )));
    }
    Ok(())
}

fn check_checkpoint(cfg: &RunConfig, model: &ModelSplit) -> Result<(), CliError> {
    if model.config != cfg.model {
        return Err(CliError::Config(format!(
            "incompatible checkpoint: built for {:?}, config wants {:?}",
            model.config, cfg.model
        )));
    }
    Ok(())
}

/// Per-epoch metrics CSV shared by pretrain and adapt outputs.
fn write_epoch_csv(records: &[MetricsRecord], path: &Path) -> Result<(), CliError> {
    let mut text = String::from("epoch,phase,dice_target,dice_source,loss_c,loss_a_src,stop_flag\n");
    for r in records {
        let (dice_t, dice_s) = if r.phase == "pretrain" {
            (f64::NAN, r.dice_mean)
        } else {
            (r.dice_mean, f64::NAN)
        };
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch,
            r.phase,
            sig6(dice_t),
            sig6(dice_s),
            sig6(r.loss_c),
            sig6(r.loss_a_src),
            u8::from(r.stopped)
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_step_csv(rows: &[(usize, LossReport)], path: &Path) -> Result<(), CliError> {
    let mut text = String::from(LossReport::csv_header());
    text.push('\n');
    for (step, report) in rows {
        text.push_str(&report.csv_row(*step, "adapt"));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, out: &Path, data: &Path) -> Result<(), CliError> {
    let source = load_dataset(data)?;
    check_dataset_shape(cfg, source.meta.height, source.meta.width)?;
    let mut model = build_model(cfg.model, cfg.init_seed)?;
    let run_id = format!("pretrain-seed{}", cfg.pretrain.seed);
    let curve = pretrain(&mut model, &source, &cfg.pretrain, &run_id)?;
    std::fs::create_dir_all(out)?;
    model.save_checkpoint(&out.join("pretrained.ckpt"), "pretrained")?;
    write_epoch_csv(&curve, &out.join("epochs.csv"))?;
    export_curves(&curve, out)?;
    cfg.save(out)?;
    let last = curve.last().expect("epochs >= 1");
    println!(
        "pretrained {} epochs; source dice {:.4}; checkpoint at {}",
        curve.len(),
        last.dice_mean,
        out.join("pretrained.ckpt").display()
    );
    Ok(())
}

fn cmd_adapt(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    source: &Path,
    target: &Path,
) -> Result<(), CliError> {
    let (mut model, _phase) = load_checkpoint(checkpoint)?;
    check_checkpoint(cfg, &model)?;
    let src = load_dataset(source)?;
    let tgt = load_dataset(target)?;
    check_dataset_shape(cfg, src.meta.height, src.meta.width)?;
    check_dataset_shape(cfg, tgt.meta.height, tgt.meta.width)?;

    let run_id = format!("adapt-seed{}", cfg.adapt.seed);
    let outcome = run_adaptation(&mut model, &src, &tgt, &cfg.adapt, &run_id)?;

    std::fs::create_dir_all(out)?;
    model.save_checkpoint(&out.join("adapted.ckpt"), "adapted")?;
    if !outcome.curve.is_empty() {
        export_curves(&outcome.curve, out)?;
        write_epoch_csv(&outcome.curve, &out.join("epochs.csv"))?;
    }
    let step_rows: Vec<(usize, LossReport)> =
        outcome.steps.iter().map(|s| (s.step_index, s.losses)).collect();
    write_step_csv(&step_rows, &out.join("steps.csv"))?;
    let summary = serde_json::json!({
        "stop_reason": outcome.stop_reason.to_string(),
        "diagnostic": outcome.diagnostic,
        "epochs_run": outcome.curve.len(),
        "steps_run": outcome.steps.len(),
        "final_dice_target": outcome.curve.last().map(|r| r.dice_mean),
    });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::Config(e.to_string()))?,
    )?;
    cfg.save(out)?;

    if outcome.stop_reason == StopReason::Divergence {
        return Err(CliError::Divergence(
            outcome.diagnostic.unwrap_or_else(|| "training diverged".into()),
        ));
    }
    println!(
        "adaptation stopped after {} epochs ({}); outputs under {}",
        outcome.curve.len(),
        outcome.stop_reason,
        out.display()
    );
    Ok(())
}

fn cmd_eval(out: &Path, checkpoint: &Path, data: &Path) -> Result<(), CliError> {
    let (model, phase) = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    if ds.meta.height != model.config.input_size.0 || ds.meta.width != model.config.input_size.1 {
        return Err(CliError::Config(format!(
            "incompatible checkpoint: model expects {:?} slices, dataset has {}x{}",
            model.config.input_size, ds.meta.height, ds.meta.width
        )));
    }
    let scores = dataset_dice(&model, &ds)?;
    std::fs::create_dir_all(out)?;
    let metrics = serde_json::json!({
        "checkpoint_phase": phase,
        "dataset_domain": ds.meta.domain,
        "n_volumes": ds.volumes.len(),
        "dice_per_class": scores.per_class,
        "dice_mean": scores.mean,
    });
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(out.join("metrics.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_ablate(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    source: &Path,
    target: &Path,
) -> Result<(), CliError> {
    let (model, _phase) = load_checkpoint(checkpoint)?;
    check_checkpoint(cfg, &model)?;
    drop(model);
    let src = load_dataset(source)?;
    let tgt = load_dataset(target)?;
    let spec = cfg
        .ablation
        .clone()
        .unwrap_or_else(|| AblationSpec::table_default(cfg.model.depth));
    let table = run_ablation(checkpoint, &spec, &src, &tgt, &cfg.adapt)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("ablation.csv"), table.to_csv())?;
    cfg.save(out)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn cmd_plot(out: &Path, curves: &[PathBuf]) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    for path in curves {
        let records = load_curves(path)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("curves");
        let parent = path
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .unwrap_or("");
        let name = if parent.is_empty() {
            format!("plot_{stem}.svg")
        } else {
            format!("plot_{parent}_{stem}.svg")
        };
        std::fs::write(out.join(&name), curves_svg(&records))?;
        println!("wrote {}", out.join(&name).display());
    }
    Ok(())
}
