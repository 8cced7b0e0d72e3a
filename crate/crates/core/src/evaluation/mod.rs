//! Dice metrics on slices and reassembled 3D volumes, multi-run aggregation,
//! the frozen-layer ablation protocol, and learning-curve export.


use std::path::Path;

use ndarray::{Array, Array3, Array4, Dimension};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{run_adaptation, AdaptConfig, AdaptError};
use crate::data::{reassemble, DataError, SliceDataset, SliceSample};
use crate::model::{load_checkpoint, BlockId, ModelError, ModelSplit};
use crate::nn::Part;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class {0} is not a foreground class")]
    NotForeground(usize),
    #[error("need at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("dataset carries no labels for evaluation")]
    MissingLabels,
    #[error("invalid ablation spec: {0}")]
    InvalidSpec(String),
    #[error("malformed csv: {0}")]
    MalformedCsv(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One epoch of one run: Dice on the evaluated domain plus the mean losses
/// of the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    /// 1-based epoch number within the phase.
    pub epoch: usize,
    /// "pretrain" or "adapt".
    pub phase: String,
    /// Foreground classes only, class 1 first.
    pub dice_per_class: Vec<f64>,
    /// Unweighted mean over foreground classes.
    pub dice_mean: f64,
    pub loss_c: f64,
    pub loss_a_src: f64,
    pub loss_a_tgt: f64,
    pub loss_a_total: f64,
    pub objective: f64,
    /// True on the epoch in which early stopping fired.
    pub stopped: bool,
}

/// Per-class and mean foreground Dice.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceScores {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// Dice overlap of the class-`cls` indicator sets: 2|P∩G| / (|P|+|G|),
/// with the both-empty convention fixed at 1.0.
pub fn dice<D: Dimension>(pred: &Array<u8, D>, gt: &Array<u8, D>, cls: usize) -> Result<f64, EvalError> {
    if pred.shape() != gt.shape() {
        return Err(EvalError::ShapeMismatch(format!(
            "pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if cls == 0 || cls > u8::MAX as usize {
        return Err(EvalError::NotForeground(cls));
    }
    let c = cls as u8;
    let mut n_pred = 0u64;
    let mut n_gt = 0u64;
    let mut n_both = 0u64;
    for (p, g) in pred.iter().zip(gt.iter()) {
        let ip = *p == c;
        let ig = *g == c;
        n_pred += ip as u64;
        n_gt += ig as u64;
        n_both += (ip && ig) as u64;
    }
    if n_pred + n_gt == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * n_both as f64 / (n_pred + n_gt) as f64)
    }
}

/// Predict every slice of one volume with the classifier head, reassemble
/// the prediction into 3D, and score it against the ground-truth volume.
pub fn volume_dice(model: &ModelSplit, samples: &[SliceSample], gt: &Array3<u8>) -> Result<DiceScores, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty("volume_dice: no slices".into()));
    }
    let (h, w) = samples[0].image.dim();
    let mut x = Array4::<f32>::zeros((samples.len(), 1, h, w));
    for (i, s) in samples.iter().enumerate() {
        x.slice_mut(ndarray::s![i, 0, .., ..]).assign(&s.image);
    }
    let scores = model.forward_scores(Part::Classifier, &x)?;
    let pred = crate::model::predict(&scores)?;
    let pred_samples: Vec<SliceSample> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| SliceSample {
            label: Some(pred.index_axis(ndarray::Axis(0), i).to_owned()),
            ..s.clone()
        })
        .collect();
    let pred_volume = reassemble(&pred_samples)?;
    if pred_volume.dim() != gt.dim() {
        return Err(EvalError::ShapeMismatch(format!(
            "reassembled prediction {:?} vs gt {:?}",
            pred_volume.dim(),
            gt.dim()
        )));
    }
    let k = model.config.num_classes;
    let per_class: Vec<f64> = (1..k)
        .map(|c| dice(&pred_volume, gt, c))
        .collect::<Result<_, _>>()?;
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(DiceScores { per_class, mean })
}

/// Volume-level Dice averaged over all volumes of a dataset (volumes first,
/// then classes). Uses training labels when present, else evaluation labels.
pub fn dataset_dice(model: &ModelSplit, ds: &SliceDataset) -> Result<DiceScores, EvalError> {
    if ds.volumes.is_empty() {
        return Err(EvalError::Empty("dataset has no volumes".into()));
    }
    if ds.labels.is_none() && ds.eval_labels.is_none() {
        return Err(EvalError::MissingLabels);
    }
    let k = model.config.num_classes;
    let mut per_class = vec![0.0f64; k - 1];
    let mut mean = 0.0f64;
    for span in &ds.volumes {
        let samples = ds.volume_samples(span);
        let gt = reassemble(&samples)?;
        let d = volume_dice(model, &samples, &gt)?;
        for (acc, v) in per_class.iter_mut().zip(d.per_class.iter()) {
            *acc += v;
        }
        mean += d.mean;
    }
    let inv = 1.0 / ds.volumes.len() as f64;
    Ok(DiceScores {
        per_class: per_class.into_iter().map(|v| v * inv).collect(),
        mean: mean * inv,
    })
}

/// Sample mean and sample standard deviation (n-1 denominator) of final
/// mean-Dice values across runs.
pub fn aggregate_runs(dice_means: &[f64]) -> Result<(f64, f64), EvalError> {
    let n = dice_means.len();
    if n < 2 {
        return Err(EvalError::TooFewRuns(n));
    }
    let mean = dice_means.iter().sum::<f64>() / n as f64;
    let var = dice_means.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, var.sqrt()))
}

/// One named freeze configuration of the ablation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationConfig {
    pub name: String,
    pub blocks: Vec<BlockId>,
}

/// The frozen-layer ablation grid: freeze configurations crossed with probe
/// epochs at which target Dice is recorded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSpec {
    pub configs: Vec<AblationConfig>,
    pub probe_epochs: Vec<usize>,
}

impl AblationSpec {
    /// The standard seven-row grid for a backbone of the given depth
    /// (encoder blocks 0..depth, decoder blocks 0..depth-1), probed at
    /// epochs 2, 6 and 12.
    pub fn table_default(depth: usize) -> Self {
        let enc = |n: usize| (0..n).map(BlockId::encoder).collect::<Vec<_>>();
        AblationSpec {
            configs: vec![
                AblationConfig {
                    name: "first encoder block".into(),
                    blocks: enc(1),
                },
                AblationConfig {
                    name: "first 2 encoder blocks".into(),
                    blocks: enc(2),
                },
                AblationConfig {
                    name: "first 3 encoder blocks".into(),
                    blocks: enc(3),
                },
                AblationConfig {
                    name: "all of encoder".into(),
                    blocks: enc(depth),
                },
                AblationConfig {
                    name: "last 2 encoder blocks".into(),
                    blocks: vec![BlockId::encoder(depth - 2), BlockId::encoder(depth - 1)],
                },
                AblationConfig {
                    name: "last encoder block + first decoder block".into(),
                    blocks: vec![BlockId::encoder(depth - 1), BlockId::decoder(0)],
                },
                AblationConfig {
                    name: "first 2 decoder blocks".into(),
                    blocks: vec![BlockId::decoder(0), BlockId::decoder(1)],
                },
            ],
            probe_epochs: vec![2, 6, 12],
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.configs.is_empty() || self.probe_epochs.is_empty() {
            return Err(EvalError::InvalidSpec("configs and probe_epochs must be non-empty".into()));
        }
        if !self.probe_epochs.windows(2).all(|w| w[0] < w[1]) || self.probe_epochs[0] == 0 {
            return Err(EvalError::InvalidSpec(format!(
                "probe epochs must be strictly increasing and >= 1, got {:?}",
                self.probe_epochs
            )));
        }
        Ok(())
    }
}

/// Freeze configurations crossed with probe epochs; cells hold target Dice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub probe_epochs: Vec<usize>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frozen_blocks");
        for e in &self.probe_epochs {
            out.push_str(&format!(",epoch_{e}"));
        }
        out.push('\n');
        for (name, cells) in &self.rows {
            out.push_str(name);
            for c in cells {
                out.push_str(&format!(",{}", sig6(*c)));
            }
            out.push('\n');
        }
        out
    }
}

/// Run the ablation: for each freeze configuration, restart adaptation from
/// the same pretrained checkpoint with early stopping disabled, and record
/// target Dice at each probe epoch.
pub fn run_ablation(
    checkpoint: &Path,
    spec: &AblationSpec,
    src: &SliceDataset,
    tgt: &SliceDataset,
    cfg: &AdaptConfig,
) -> Result<AblationTable, EvalError> {
    spec.validate()?;
    let max_probe = *spec.probe_epochs.last().expect("validated non-empty");
    let mut rows = Vec::with_capacity(spec.configs.len());
    for config in &spec.configs {
        let (mut model, _phase) = load_checkpoint(checkpoint)?;
        let mut probe_cfg = cfg.clone();
        probe_cfg.freeze_spec = config.blocks.clone();
        probe_cfg.xi = f64::INFINITY; // probing must reach every epoch
        probe_cfg.max_epochs = max_probe;
        let outcome = run_adaptation(&mut model, src, tgt, &probe_cfg, &config.name)?;
        let cells = spec
            .probe_epochs
            .iter()
            .map(|&e| {
                outcome
                    .curve
                    .iter()
                    .find(|r| r.epoch == e)
                    .map(|r| r.dice_mean)
                    .unwrap_or(f64::NAN)
            })
            .collect();
        rows.push((config.name.clone(), cells));
    }
    Ok(AblationTable {
        probe_epochs: spec.probe_epochs.clone(),
        rows,
    })
}

/// 6-significant-digit decimal formatting used by all exported CSV cells.
pub fn sig6(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.5e}")
    }
}

pub const CURVES_HEADER: &str = "run_id,epoch,phase,dice_mean,dice_c1,dice_c2,loss_c,loss_a_src,stopped";

fn curves_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for r in records {
        let c1 = r.dice_per_class.first().copied().unwrap_or(f64::NAN);
        let c2 = r.dice_per_class.get(1).copied().unwrap_or(f64::NAN);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.run_id,
            r.epoch,
            r.phase,
            sig6(r.dice_mean),
            sig6(c1),
            sig6(c2),
            sig6(r.loss_c),
            sig6(r.loss_a_src),
            u8::from(r.stopped),
        ));
    }
    out
}

/// Reload a curves.csv written by [`export_curves`]. Fields not carried by
/// the CSV come back zeroed.
pub fn load_curves(path: &Path) -> Result<Vec<MetricsRecord>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CURVES_HEADER => {}
        other => {
            return Err(EvalError::MalformedCsv(format!(
                "bad header: {:?}",
                other.unwrap_or("<empty file>")
            )))
        }
    }
    let mut records = Vec::new();
    for (ln, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(EvalError::MalformedCsv(format!(
                "line {}: expected 9 fields, got {}",
                ln + 2,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64, EvalError> {
            s.parse::<f64>()
                .map_err(|e| EvalError::MalformedCsv(format!("line {}: {e}", ln + 2)))
        };
        let dice_c1 = num(fields[4])?;
        let dice_c2 = num(fields[5])?;
        records.push(MetricsRecord {
            run_id: fields[0].to_string(),
            epoch: fields[1]
                .parse()
                .map_err(|e| EvalError::MalformedCsv(format!("line {}: {e}", ln + 2)))?,
            phase: fields[2].to_string(),
            dice_per_class: vec![dice_c1, dice_c2],
            dice_mean: num(fields[3])?,
            loss_c: num(fields[6])?,
            loss_a_src: num(fields[7])?,
            loss_a_tgt: 0.0,
            loss_a_total: 0.0,
            objective: 0.0,
            stopped: fields[8] == "1",
        });
    }
    if records.is_empty() {
        return Err(EvalError::MalformedCsv("no data rows".into()));
    }
    Ok(records)
}

const SVG_PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Render target Dice vs epoch, one polyline per run, each line ending at
/// that run's last recorded (stopping) epoch.
pub fn curves_svg(records: &[MetricsRecord]) -> String {
    let (width, height) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (50.0, 15.0, 15.0, 40.0);
    let max_epoch = records.iter().map(|r| r.epoch).max().unwrap_or(1).max(1) as f64;
    let x_of = |e: f64| ml + (e - 1.0) / (max_epoch - 1.0).max(1.0) * (width - ml - mr);
    let y_of = |d: f64| height - mb - d.clamp(0.0, 1.0) * (height - mt - mb);

    let mut run_ids: Vec<&str> = Vec::new();
    for r in records {
        if !run_ids.contains(&r.run_id.as_str()) {
            run_ids.push(&r.run_id);
        }
    }
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    );
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{0}\" stroke=\"black\"/>\n",
        height - mb,
        width - mr
    ));
    for tick in 0..=5 {
        let d = tick as f64 / 5.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{d:.1}</text>\n",
            ml - 6.0,
            y_of(d) + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">epoch</text>\n",
        (ml + width - mr) / 2.0,
        height - 10.0
    ));
    for (ri, run_id) in run_ids.iter().enumerate() {
        let color = SVG_PALETTE[ri % SVG_PALETTE.len()];
        let pts: Vec<String> = records
            .iter()
            .filter(|r| r.run_id == *run_id && r.dice_mean.is_finite())
            .map(|r| format!("{:.1},{:.1}", x_of(r.epoch as f64), y_of(r.dice_mean)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{run_id}</text>\n",
            width - mr - 120.0,
            mt + 14.0 * (ri + 1) as f64
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write `curves.csv` and `curves.svg` into `dir`.
pub fn export_curves(records: &[MetricsRecord], dir: &Path) -> Result<(), EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("export_curves: no records".into()));
    }
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("curves.csv"), curves_csv(records).as_bytes())?;
    write_atomic(&dir.join("curves.svg"), curves_svg(records).as_bytes())?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EvalError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
