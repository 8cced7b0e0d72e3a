//! Scalar objectives: margin loss, margin disparity, the empirical MDD
//! brute-force oracle, the cross-entropy surrogates driving training, and
//! the combined adversarial/total objectives.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid class index {0} for {1} classes")]
    InvalidClass(usize, usize),
    #[error("invalid rho: {0} (must be > 0)")]
    InvalidRho(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid label {0} for {1} classes")]
    InvalidLabel(usize, usize),
    #[error("classifier family is empty")]
    EmptyFamily,
}

/// Margin hyperparameters. `gamma` weights the adversary's source term;
/// `rho` is the maximal margin used only by the margin metrics. The
/// theoretical link gamma = exp(rho) is recorded but not enforced: the two
/// are independent knobs here.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MarginConfig {
    pub rho: f64,
    pub gamma: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig { rho: 1.0, gamma: 0.08 }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.rho <= 0.0 {
            return Err(LossError::InvalidRho(self.rho));
        }
        if self.gamma <= 0.0 {
            return Err(LossError::InvalidRho(self.gamma));
        }
        Ok(())
    }
}

/// Per-step loss summary.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub classifier_loss: f64,
    pub adv_source_loss: f64,
    pub adv_target_loss: f64,
    pub adv_total_loss: f64,
    pub total_objective: f64,
    pub pixel_count: usize,
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "step,phase,loss_c,loss_a_src,loss_a_tgt,loss_a_total,objective,n_pixels"
    }

    pub fn csv_row(&self, step: usize, phase: &str) -> String {
        format!(
            "{step},{phase},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{}",
            self.classifier_loss,
            self.adv_source_loss,
            self.adv_target_loss,
            self.adv_total_loss,
            self.total_objective,
            self.pixel_count
        )
    }
}

/// Half the gap between the score of class `y` and the best other class.
pub fn margin(scores: &[f32], y: usize) -> Result<f64, LossError> {
    let k = scores.len();
    if y >= k {
        return Err(LossError::InvalidClass(y, k));
    }
    let best_other = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != y)
        .map(|(_, v)| *v as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(0.5 * (scores[y] as f64 - best_other))
}

/// Ramp penalty on the margin: 0 above rho, 1 at or below 0, linear between.
pub fn ramp(margin: f64, rho: f64) -> f64 {
    if margin >= rho {
        0.0
    } else if margin <= 0.0 {
        1.0
    } else {
        1.0 - margin / rho
    }
}

/// Margin loss of a single score vector against class `y`.
pub fn margin_loss(scores: &[f32], y: usize, rho: f64) -> Result<f64, LossError> {
    if rho <= 0.0 {
        return Err(LossError::InvalidRho(rho));
    }
    Ok(ramp(margin(scores, y)?, rho))
}

fn check_shapes(scores: &Array4<f32>, labels: &Array3<u8>) -> Result<(), LossError> {
    let (b, _, h, w) = scores.dim();
    if labels.dim() != (b, h, w) {
        return Err(LossError::ShapeMismatch(format!(
            "scores {:?} vs labels {:?}",
            scores.dim(),
            labels.dim()
        )));
    }
    Ok(())
}

/// Mean margin loss of `scores_fprime` against the argmax labels of another
/// classifier, averaged over all B*H*W pixels. Always in [0, 1].
pub fn margin_disparity(scores_fprime: &Array4<f32>, labels_f: &Array3<u8>, rho: f64) -> Result<f64, LossError> {
    if rho <= 0.0 {
        return Err(LossError::InvalidRho(rho));
    }
    check_shapes(scores_fprime, labels_f)?;
    let (b, k, h, w) = scores_fprime.dim();
    let mut acc = 0.0f64;
    let mut vec = vec![0f32; k];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                for c in 0..k {
                    vec[c] = scores_fprime[[bi, c, i, j]];
                }
                acc += ramp(margin(&vec, labels_f[[bi, i, j]] as usize)?, rho);
            }
        }
    }
    Ok(acc / (b * h * w) as f64)
}

/// A scoring classifier over image batches. Implemented by the model heads
/// and by test stubs; the brute-force MDD oracle enumerates these.
pub trait Scorer {
    fn score_batch(&self, images: &Array4<f32>) -> Array4<f32>;
}

impl<F> Scorer for F
where
    F: Fn(&Array4<f32>) -> Array4<f32>,
{
    fn score_batch(&self, images: &Array4<f32>) -> Array4<f32> {
        self(images)
    }
}

/// Empirical MDD by full enumeration over a finite classifier family:
/// max over f' of disp_S(f', f) - disp_T(f', f), with the attaining index.
/// Test oracle; the adversarial head approximates this supremum.
pub fn mdd_bruteforce(
    family: &[&dyn Scorer],
    f: &dyn Scorer,
    source_images: &Array4<f32>,
    target_images: &Array4<f32>,
    rho: f64,
) -> Result<(f64, usize), LossError> {
    if family.is_empty() {
        return Err(LossError::EmptyFamily);
    }
    let labels_s = crate::nn::ops::argmax_classes(&f.score_batch(source_images));
    let labels_t = crate::nn::ops::argmax_classes(&f.score_batch(target_images));
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for (idx, fp) in family.iter().enumerate() {
        let ds = margin_disparity(&fp.score_batch(source_images), &labels_s, rho)?;
        let dt = margin_disparity(&fp.score_batch(target_images), &labels_t, rho)?;
        let v = ds - dt;
        if v > best {
            best = v;
            best_idx = idx;
        }
    }
    Ok((best, best_idx))
}

/// log-sum-exp over a score vector, optionally excluding one class.
fn logsumexp(scores: &[f64], exclude: Option<usize>) -> f64 {
    let m = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(_, v)| (v - m).exp())
        .sum();
    m + s.ln()
}

const PROB_EPS: f64 = 1e-12;

fn per_pixel<FA>(scores: &Array4<f32>, labels: &Array3<u8>, mut f: FA) -> Result<(), LossError>
where
    FA: FnMut(usize, usize, usize, &[f64], usize),
{
    check_shapes(scores, labels)?;
    let (b, k, h, w) = scores.dim();
    let mut vec = vec![0f64; k];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let y = labels[[bi, i, j]] as usize;
                if y >= k {
                    return Err(LossError::InvalidLabel(y, k));
                }
                for c in 0..k {
                    vec[c] = scores[[bi, c, i, j]] as f64;
                }
                f(bi, i, j, &vec, y);
            }
        }
    }
    Ok(())
}

/// Mean pixel cross entropy -log softmax(scores)_y.
pub fn classifier_loss(scores: &Array4<f32>, labels: &Array3<u8>) -> Result<f64, LossError> {
    let mut acc = 0.0;
    let mut n = 0usize;
    per_pixel(scores, labels, |_, _, _, s, y| {
        acc += logsumexp(s, None) - s[y];
        n += 1;
    })?;
    Ok(acc / n as f64)
}

/// Cross entropy and its analytic gradient with respect to the scores.
pub fn classifier_loss_grad(scores: &Array4<f32>, labels: &Array3<u8>) -> Result<(f64, Array4<f32>), LossError> {
    let (b, k, h, w) = scores.dim();
    let n = (b * h * w) as f64;
    let mut grad = Array4::<f32>::zeros(scores.raw_dim());
    let mut acc = 0.0;
    per_pixel(scores, labels, |bi, i, j, s, y| {
        let lse = logsumexp(s, None);
        acc += lse - s[y];
        for c in 0..k {
            let p = (s[c] - lse).exp();
            let ind = if c == y { 1.0 } else { 0.0 };
            grad[[bi, c, i, j]] = ((p - ind) / n) as f32;
        }
    })?;
    Ok((acc / n, grad))
}

/// Adversary-vs-pseudo-label cross entropy on source data (always >= 0).
pub fn adv_source_loss(scores_a_src: &Array4<f32>, pseudo_labels_src: &Array3<u8>) -> Result<f64, LossError> {
    classifier_loss(scores_a_src, pseudo_labels_src)
}

pub fn adv_source_loss_grad(
    scores_a_src: &Array4<f32>,
    pseudo_labels_src: &Array3<u8>,
) -> Result<(f64, Array4<f32>), LossError> {
    classifier_loss_grad(scores_a_src, pseudo_labels_src)
}

/// Mean of log(1 - softmax(scores)_y) over pixels (always <= 0). Computed as
/// logsumexp over the complementary classes minus the full logsumexp, with
/// probabilities clamped away from 0 and 1.
pub fn adv_target_loss(scores_a_tgt: &Array4<f32>, pseudo_labels_tgt: &Array3<u8>) -> Result<f64, LossError> {
    let mut acc = 0.0;
    let mut n = 0usize;
    per_pixel(scores_a_tgt, pseudo_labels_tgt, |_, _, _, s, y| {
        let log_comp = (logsumexp(s, Some(y)) - logsumexp(s, None)).max(PROB_EPS.ln());
        acc += log_comp;
        n += 1;
    })?;
    Ok(acc / n as f64)
}

pub fn adv_target_loss_grad(
    scores_a_tgt: &Array4<f32>,
    pseudo_labels_tgt: &Array3<u8>,
) -> Result<(f64, Array4<f32>), LossError> {
    let (b, k, h, w) = scores_a_tgt.dim();
    let n = (b * h * w) as f64;
    let mut grad = Array4::<f32>::zeros(scores_a_tgt.raw_dim());
    let mut acc = 0.0;
    per_pixel(scores_a_tgt, pseudo_labels_tgt, |bi, i, j, s, y| {
        let lse = logsumexp(s, None);
        let log_comp_raw = logsumexp(s, Some(y)) - lse;
        acc += log_comp_raw.max(PROB_EPS.ln());
        // d/ds_c log(1 - p_y) = -p_y (delta_cy - p_c) / (1 - p_y),
        // with the complement clamped below to keep the factor bounded
        let p_y = (s[y] - lse).exp().min(1.0 - PROB_EPS);
        let comp = (1.0 - p_y).max(PROB_EPS);
        for c in 0..k {
            let p_c = (s[c] - lse).exp();
            let ind = if c == y { 1.0 } else { 0.0 };
            grad[[bi, c, i, j]] = ((-p_y * (ind - p_c) / comp) / n) as f32;
        }
    })?;
    Ok((acc / n, grad))
}

/// Eq-5-style combination: -adv_tgt + gamma * adv_src.
pub fn adv_total_loss(adv_src: f64, adv_tgt: f64, gamma: f64) -> f64 {
    -adv_tgt + gamma * adv_src
}

/// The scalar whose gradients drive one adaptation step.
pub fn total_objective(classifier_loss: f64, adv_total: f64) -> f64 {
    classifier_loss + adv_total
}
