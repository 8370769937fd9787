//! Batch-level combined Dice + binary cross-entropy loss and the
//! confusion-matrix evaluation metrics.
//!
//! Both terms pool over every pixel of the batch: the Dice ratio is computed
//! from batch-wide sums rather than averaged per sample, which damps the
//! loss fluctuations caused by single noisy samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{bce_with_logits, c, fl, Element, Tensor};

/// Weights of the combined loss: `(1 - alpha) * CE + alpha * Dice`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.5, epsilon: 1e-5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

fn ensure_binary<E: Element>(target: &Tensor<E>) -> Result<()> {
    if let Some((i, &v)) = target
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| v != E::zero() && v != E::one())
    {
        return Err(Error::Validation(format!(
            "target is not binary: value {} at flat index {i}",
            fl(v)
        )));
    }
    Ok(())
}

/// Differentiable batch-level loss on raw logits against a binary target of
/// the same shape. Cross-entropy averages over all pixels; the Dice term is
/// `1 - 2*sum(p*t) / (sum(p) + sum(t) + eps)` with sums over the whole batch.
pub fn combined_loss<E: Element>(
    cfg: &LossConfig,
    logits: &Tensor<E>,
    target: &Tensor<E>,
) -> Result<Tensor<E>> {
    cfg.validate()?;
    if logits.shape() != target.shape() {
        return Err(Error::Tensor(crate::error::TensorError::ShapeMismatch {
            op: "combined_loss",
            lhs: logits.shape().to_vec(),
            rhs: target.shape().to_vec(),
        }));
    }
    ensure_binary(target)?;

    let ce = bce_with_logits(logits, target)?.mean();

    let p = logits.sigmoid();
    let overlap = p.mul(target)?.sum().scale(c::<E>(2.0));
    let mass = p.sum().add(&target.sum())?.add_scalar(c::<E>(cfg.epsilon));
    let dice_loss = Tensor::scalar(E::one()).sub(&overlap.div(&mass)?)?;

    Ok(ce.scale(c::<E>(1.0 - cfg.alpha)).add(&dice_loss.scale(c::<E>(cfg.alpha)))?)
}

// ── Metrics ──────────────────────────────────────────────────────────

/// Pixel confusion counts plus the five derived metrics.
///
/// Division guard: when a metric's denominator is zero, the class it
/// measures is absent from prediction and target alike and the metric is
/// reported as 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub miou: f64,
    pub dsc: f64,
    pub acc: f64,
    pub spe: f64,
    pub sen: f64,
}

fn guarded(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_counts(true_pos: u64, true_neg: u64, false_pos: u64, false_neg: u64) -> Self {
        let (tp, tn, fp, fneg) = (true_pos, true_neg, false_pos, false_neg);
        let fg_iou = guarded(tp, tp + fp + fneg);
        let bg_iou = guarded(tn, tn + fp + fneg);
        MetricsReport {
            true_pos: tp,
            true_neg: tn,
            false_pos: fp,
            false_neg: fneg,
            miou: 0.5 * (fg_iou + bg_iou),
            dsc: guarded(2 * tp, 2 * tp + fp + fneg),
            acc: guarded(tp + tn, tp + tn + fp + fneg),
            spe: guarded(tn, tn + fp),
            sen: guarded(tp, tp + fneg),
        }
    }

    pub fn total_pixels(&self) -> u64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    /// Foreground intersection-over-union.
    pub fn foreground_iou(&self) -> f64 {
        guarded(self.true_pos, self.true_pos + self.false_pos + self.false_neg)
    }
}

/// Streaming confusion-count accumulator over an evaluation split.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConfusionAccumulator {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl ConfusionAccumulator {
    pub fn add<E: Element>(&mut self, pred_logits: &Tensor<E>, target: &Tensor<E>, threshold: f64) -> Result<()> {
        if pred_logits.shape() != target.shape() {
            return Err(Error::Tensor(crate::error::TensorError::ShapeMismatch {
                op: "evaluate",
                lhs: pred_logits.shape().to_vec(),
                rhs: target.shape().to_vec(),
            }));
        }
        ensure_binary(target)?;
        let logits = pred_logits.data();
        let targets = target.data();
        for (&x, &t) in logits.iter().zip(targets.iter()) {
            let p = 1.0 / (1.0 + (-fl(x)).exp());
            let pred_pos = p > threshold;
            let is_pos = t == E::one();
            match (pred_pos, is_pos) {
                (true, true) => self.true_pos += 1,
                (false, false) => self.true_neg += 1,
                (true, false) => self.false_pos += 1,
                (false, true) => self.false_neg += 1,
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport::from_counts(self.true_pos, self.true_neg, self.false_pos, self.false_neg)
    }
}

/// Binarize `sigmoid(pred_logits)` at `threshold` and score it against the
/// binary target.
pub fn evaluate<E: Element>(pred_logits: &Tensor<E>, target: &Tensor<E>, threshold: f64) -> Result<MetricsReport> {
    let mut acc = ConfusionAccumulator::default();
    acc.add(pred_logits, target, threshold)?;
    Ok(acc.report())
}
