//! The training engine: source-domain pre-training, the gradient reversal
//! layer, the MDD minimax step with per-part learning rates, and the
//! early-stopping monitor on the adversary's source loss.

#[cfg(test)]
mod tests;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SliceDataset;
use crate::evaluation::{dataset_dice, MetricsRecord};
use crate::losses::{self, LossError, LossReport, MarginConfig};
use crate::model::{BlockId, ModelError, ModelSplit};
use crate::nn::adam::Adam;
use crate::nn::param::{Param, ParamArena};
use crate::nn::Part;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("dataset carries no training labels")]
    MissingLabels,
    #[error("divergence at step {step}: {what}")]
    Divergence { step: usize, what: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Hyperparameters of the MDD adaptation phase. Defaults follow the training
/// regime this laboratory reproduces: the adversary trains much slower than
/// the classifier, and the encoder/decoder at 2/3 and 4/9 of the classifier
/// rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub lr_adversary: f64,
    pub lr_classifier: f64,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    /// Gradient reversal constant.
    pub eta: f64,
    pub margin: MarginConfig,
    /// Early-stopping threshold on the adversary's source loss.
    pub xi: f64,
    pub freeze_spec: Vec<BlockId>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lr_adversary: 1e-6,
            lr_classifier: 1e-3,
            lr_encoder: 1e-3 * 2.0 / 3.0,
            lr_decoder: 1e-3 * 4.0 / 9.0,
            eta: 1.4,
            margin: MarginConfig::default(),
            xi: 0.02,
            freeze_spec: vec![BlockId::encoder(0), BlockId::encoder(1)],
            max_epochs: 20,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        for (name, lr) in [
            ("lr_adversary", self.lr_adversary),
            ("lr_classifier", self.lr_classifier),
            ("lr_encoder", self.lr_encoder),
            ("lr_decoder", self.lr_decoder),
        ] {
            if lr <= 0.0 || !lr.is_finite() {
                return Err(AdaptError::InvalidConfig(format!("{name} must be > 0, got {lr}")));
            }
        }
        if self.eta <= 0.0 {
            return Err(AdaptError::InvalidConfig(format!("eta must be > 0, got {}", self.eta)));
        }
        // xi = 0 and xi = inf are degenerate but well-defined thresholds
        if self.xi < 0.0 || self.xi.is_nan() {
            return Err(AdaptError::InvalidConfig(format!("xi must be >= 0, got {}", self.xi)));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(AdaptError::InvalidConfig("max_epochs and batch_size must be >= 1".into()));
        }
        self.margin
            .validate()
            .map_err(|e| AdaptError::InvalidConfig(e.to_string()))
    }

    /// Learning rate for one parameter, by part.
    pub fn lr_for(&self, part: Part) -> f64 {
        match part {
            Part::Encoder => self.lr_encoder,
            Part::Decoder => self.lr_decoder,
            Part::Classifier => self.lr_classifier,
            Part::Adversary => self.lr_adversary,
        }
    }
}

/// Hyperparameters of the source-only pre-training phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    /// Learning rate halves every this many epochs.
    pub lr_halving_period: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 60,
            lr_initial: 1e-3,
            lr_halving_period: 10,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        if self.epochs == 0 || self.lr_halving_period == 0 || self.batch_size == 0 {
            return Err(AdaptError::InvalidConfig(
                "epochs, lr_halving_period and batch_size must be >= 1".into(),
            ));
        }
        if self.lr_initial <= 0.0 || !self.lr_initial.is_finite() {
            return Err(AdaptError::InvalidConfig(format!(
                "lr_initial must be > 0, got {}",
                self.lr_initial
            )));
        }
        Ok(())
    }

    /// Learning rate in force during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr_initial * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }
}

/// L2 norms of the accumulated gradients, by part.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GradNorms {
    pub encoder: f64,
    pub decoder: f64,
    pub classifier: f64,
    pub adversary: f64,
}

impl GradNorms {
    fn of(arena: &ParamArena) -> Self {
        let mut sums = [0.0f64; 4];
        for (_, p) in arena.iter() {
            let idx = match p.part {
                Part::Encoder => 0,
                Part::Decoder => 1,
                Part::Classifier => 2,
                Part::Adversary => 3,
            };
            sums[idx] += p.grad.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>();
        }
        GradNorms {
            encoder: sums[0].sqrt(),
            decoder: sums[1].sqrt(),
            classifier: sums[2].sqrt(),
            adversary: sums[3].sqrt(),
        }
    }
}

/// Outcome of one minimax step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub losses: LossReport,
    pub early_stop_triggered: bool,
    pub grad_norms: GradNorms,
    pub step_index: usize,
}

/// Gradient reversal layer: identity forward, gradient scaled by -eta
/// backward. Placed only on the feature path feeding the adversary head.
#[derive(Debug, Clone, Copy)]
pub struct Grl {
    pub eta: f64,
}

impl Grl {
    pub fn new(eta: f64) -> Result<Self, AdaptError> {
        if eta <= 0.0 || !eta.is_finite() {
            return Err(AdaptError::InvalidConfig(format!("eta must be > 0, got {eta}")));
        }
        Ok(Grl { eta })
    }

    /// Forward pass: bit-identical to the input.
    pub fn forward(&self, features: &Array4<f32>) -> Array4<f32> {
        features.clone()
    }

    /// Backward pass: upstream gradient = -eta * downstream gradient.
    pub fn backward(&self, dfeatures: &Array4<f32>) -> Array4<f32> {
        let neg_eta = -(self.eta as f32);
        dfeatures.mapv(|v| neg_eta * v)
    }
}

/// True iff the adversary's source loss strictly exceeds the threshold.
pub fn early_stop_check(adv_source_loss: f64, xi: f64) -> bool {
    adv_source_loss > xi
}

/// Seed override hook: `MDDLAB_SEED` beats the configured seed when set to a
/// parseable integer.
pub fn seed_from_env(default: u64) -> u64 {
    std::env::var("MDDLAB_SEED")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(default)
}

fn check_finite(step: usize, pairs: &[(&str, f64)]) -> Result<(), AdaptError> {
    for (name, v) in pairs {
        if !v.is_finite() {
            return Err(AdaptError::Divergence {
                step,
                what: format!("{name} = {v}"),
            });
        }
    }
    Ok(())
}

/// Train the plain segmentation network (classifier head over psi) on labeled
/// source data with Eq.-2-style cross entropy. The adversary head is not in
/// the graph and stays bit-identical. Returns the per-epoch source Dice curve.
pub fn pretrain(
    model: &mut ModelSplit,
    source: &SliceDataset,
    cfg: &PretrainConfig,
    run_id: &str,
) -> Result<Vec<MetricsRecord>, AdaptError> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(AdaptError::EmptyDataset("pretrain source".into()));
    }
    if source.labels.is_none() {
        return Err(AdaptError::MissingLabels);
    }
    let mut opt = Adam::new(model.arena());
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            model.arena_mut().zero_grads();
            let images = source.image_batch(chunk);
            let labels = source.label_batch(chunk).expect("labels checked above");
            let (feats, psi_cache) = model.forward_features_cached(&images)?;
            let (scores, head_cache) = model.forward_head_cached(Part::Classifier, &feats)?;
            let (loss, dscores) = losses::classifier_loss_grad(&scores, &labels)?;
            check_finite(step, &[("classifier loss", loss)])?;
            let dfeats = model.backward_head(Part::Classifier, &head_cache, dscores)?;
            model.backward_features(&psi_cache, dfeats);
            opt.step(model.arena_mut(), |p: &Param| match p.part {
                Part::Adversary => 0.0,
                _ => lr,
            });
            loss_sum += loss;
            n_steps += 1;
            step += 1;
        }
        let dice = dataset_dice(model, source).map_err(|e| AdaptError::InvalidConfig(e.to_string()))?;
        curve.push(MetricsRecord {
            run_id: run_id.to_string(),
            epoch: epoch + 1,
            phase: "pretrain".into(),
            dice_per_class: dice.per_class,
            dice_mean: dice.mean,
            loss_c: loss_sum / n_steps as f64,
            loss_a_src: 0.0,
            loss_a_tgt: 0.0,
            loss_a_total: 0.0,
            objective: loss_sum / n_steps as f64,
            stopped: false,
        });
    }
    Ok(curve)
}

/// One MDD minimax step over a paired source/target batch.
///
/// Forward both batches through psi once; the classifier scores drive Eq. 2
/// on source and supply detached pseudo-labels for both domains; the
/// adversary scores (features passed through the GRL) give the source and
/// target adversarial terms. A single backward pass propagates the Eq.-6 sum,
/// with the GRL sign-flipping the adversarial gradient into psi, followed by
/// one Adam update with per-part learning rates.
pub fn adapt_step(
    model: &mut ModelSplit,
    opt: &mut Adam,
    src_images: &Array4<f32>,
    src_labels: &Array3<u8>,
    tgt_images: &Array4<f32>,
    cfg: &AdaptConfig,
    step_index: usize,
) -> Result<StepReport, AdaptError> {
    if src_images.dim().2 != tgt_images.dim().2 || src_images.dim().3 != tgt_images.dim().3 {
        return Err(AdaptError::Model(ModelError::ShapeMismatch(format!(
            "source {:?} vs target {:?} spatial sizes",
            src_images.dim(),
            tgt_images.dim()
        ))));
    }
    let grl = Grl { eta: cfg.eta };
    let gamma = cfg.margin.gamma;
    model.arena_mut().zero_grads();

    let (feat_s, psi_s) = model.forward_features_cached(src_images)?;
    let (scores_c_s, head_c_s) = model.forward_head_cached(Part::Classifier, &feat_s)?;
    let (loss_c, dscores_c) = losses::classifier_loss_grad(&scores_c_s, src_labels)?;
    check_finite(step_index, &[("classifier loss", loss_c)])?;
    let pseudo_s = crate::model::predict(&scores_c_s)?;

    let (feat_t, psi_t) = model.forward_features_cached(tgt_images)?;
    let scores_c_t = model.forward_head(Part::Classifier, &feat_t)?;
    let pseudo_t = crate::model::predict(&scores_c_t)?;

    let (scores_a_s, head_a_s) = model.forward_head_cached(Part::Adversary, &grl.forward(&feat_s))?;
    let (scores_a_t, head_a_t) = model.forward_head_cached(Part::Adversary, &grl.forward(&feat_t))?;
    let (loss_a_src, d_a_src) = losses::adv_source_loss_grad(&scores_a_s, &pseudo_s)?;
    let (loss_a_tgt, d_a_tgt) = losses::adv_target_loss_grad(&scores_a_t, &pseudo_t)?;
    let loss_a_total = losses::adv_total_loss(loss_a_src, loss_a_tgt, gamma);
    let objective = losses::total_objective(loss_c, loss_a_total);
    check_finite(
        step_index,
        &[
            ("classifier loss", loss_c),
            ("adversary source loss", loss_a_src),
            ("adversary target loss", loss_a_tgt),
        ],
    )?;

    // classifier path (no GRL)
    let dfeat_c = model.backward_head(Part::Classifier, &head_c_s, dscores_c)?;
    // adversary path: d(L^a)/d(scores) with L^a = -L^{a''} + gamma * L^{a'}
    let gamma_f = gamma as f32;
    let dfeat_a_s = model.backward_head(Part::Adversary, &head_a_s, d_a_src.mapv(|v| gamma_f * v))?;
    let dfeat_a_t = model.backward_head(Part::Adversary, &head_a_t, d_a_tgt.mapv(|v| -v))?;
    // the GRL mediates the adversarial gradient flowing into psi
    model.backward_features(&psi_s, dfeat_c + grl.backward(&dfeat_a_s));
    model.backward_features(&psi_t, grl.backward(&dfeat_a_t));

    let grad_norms = GradNorms::of(model.arena());
    opt.step(model.arena_mut(), |p: &Param| cfg.lr_for(p.part));

    let (b, _, h, w) = src_images.dim();
    Ok(StepReport {
        losses: LossReport {
            classifier_loss: loss_c,
            adv_source_loss: loss_a_src,
            adv_target_loss: loss_a_tgt,
            adv_total_loss: loss_a_total,
            total_objective: objective,
            pixel_count: b * h * w,
        },
        early_stop_triggered: early_stop_check(loss_a_src, cfg.xi),
        grad_norms,
        step_index,
    })
}

/// Why adaptation ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    Divergence,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::Divergence => "divergence",
        })
    }
}

/// Result of a full adaptation run.
pub struct AdaptOutcome {
    pub curve: Vec<MetricsRecord>,
    pub steps: Vec<StepReport>,
    pub stop_reason: StopReason,
    /// Diagnostic message when stop_reason is divergence.
    pub diagnostic: Option<String>,
}

fn epoch_batches(n: usize, batch: usize, steps: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    (0..steps)
        .map(|s| (0..batch).map(|k| order[(s * batch + k) % n]).collect())
        .collect()
}

/// The full MDD fine-tuning phase: copy the classifier head into the
/// adversary, apply the freeze spec, then iterate [`adapt_step`] over paired
/// batches (cycling the shorter dataset, both reshuffled each epoch) until
/// the early-stopping monitor fires, max_epochs elapse, or the loss
/// diverges. The target dataset's evaluation labels, when present, are used
/// only to record the per-epoch Dice curve, never by the optimization path.
/// The step that triggers early stopping is kept.
pub fn run_adaptation(
    model: &mut ModelSplit,
    src: &SliceDataset,
    tgt: &SliceDataset,
    cfg: &AdaptConfig,
    run_id: &str,
) -> Result<AdaptOutcome, AdaptError> {
    cfg.validate()?;
    if src.is_empty() || tgt.is_empty() {
        return Err(AdaptError::EmptyDataset("adaptation source/target".into()));
    }
    if src.labels.is_none() {
        return Err(AdaptError::MissingLabels);
    }
    model.copy_head();
    model.set_frozen(&cfg.freeze_spec)?;
    let mut opt = Adam::new(model.arena());
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let b = cfg.batch_size;
    let steps_per_epoch = src.len().max(tgt.len()).div_ceil(b);
    let evaluate_target = tgt.labels.is_some() || tgt.eval_labels.is_some();

    let mut steps: Vec<StepReport> = Vec::new();
    let mut curve = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut diagnostic = None;
    let mut step_index = 0usize;

    'outer: for epoch in 1..=cfg.max_epochs {
        let src_batches = epoch_batches(src.len(), b, steps_per_epoch, &mut rng);
        let tgt_batches = epoch_batches(tgt.len(), b, steps_per_epoch, &mut rng);
        let mut sums = [0.0f64; 4]; // loss_c, a_src, a_tgt, a_total
        let mut n_steps = 0usize;
        let mut stopped = false;
        for s in 0..steps_per_epoch {
            let xs = src.image_batch(&src_batches[s]);
            let ys = src.label_batch(&src_batches[s]).expect("labels checked above");
            let xt = tgt.image_batch(&tgt_batches[s]);
            let report = match adapt_step(model, &mut opt, &xs, &ys, &xt, cfg, step_index) {
                Ok(r) => r,
                Err(AdaptError::Divergence { step, what }) => {
                    stop_reason = StopReason::Divergence;
                    diagnostic = Some(format!("step {step}: {what}"));
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            step_index += 1;
            n_steps += 1;
            sums[0] += report.losses.classifier_loss;
            sums[1] += report.losses.adv_source_loss;
            sums[2] += report.losses.adv_target_loss;
            sums[3] += report.losses.adv_total_loss;
            let triggered = report.early_stop_triggered;
            steps.push(report);
            if triggered {
                stopped = true;
                break;
            }
        }
        let (dice_per_class, dice_mean) = if evaluate_target {
            let d = dataset_dice(model, tgt).map_err(|e| AdaptError::InvalidConfig(e.to_string()))?;
            (d.per_class, d.mean)
        } else {
            (Vec::new(), f64::NAN)
        };
        let inv = 1.0 / n_steps.max(1) as f64;
        curve.push(MetricsRecord {
            run_id: run_id.to_string(),
            epoch,
            phase: "adapt".into(),
            dice_per_class,
            dice_mean,
            loss_c: sums[0] * inv,
            loss_a_src: sums[1] * inv,
            loss_a_tgt: sums[2] * inv,
            loss_a_total: sums[3] * inv,
            objective: (sums[0] + sums[3]) * inv,
            stopped,
        });
        if stopped {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    Ok(AdaptOutcome {
        curve,
        steps,
        stop_reason,
        diagnostic,
    })
}
