//! Classification losses over network logits.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// One logit per class.
    #[default]
    SoftmaxCrossEntropy,
    /// A single logit for two classes; class 1 when the logit is positive.
    BinaryLogistic,
}

impl LossKind {
    /// Number of output nodes this loss expects for `n_classes` classes.
    pub fn output_width(self, n_classes: usize) -> usize {
        match self {
            LossKind::SoftmaxCrossEntropy => n_classes,
            LossKind::BinaryLogistic => 1,
        }
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(KanError::DimensionMismatch(format!(
            "{} labels for {batch} logit rows",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(KanError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Mean loss over the batch and its gradient with respect to the logits.
pub fn loss_eval(logits: ArrayView2<f64>, labels: &[usize], kind: LossKind) -> Result<(f64, Array2<f64>)> {
    let (batch, width) = logits.dim();
    if batch == 0 {
        return Err(KanError::EmptySplit("loss over an empty batch".into()));
    }
    let n = batch as f64;
    let mut grad = Array2::zeros((batch, width));
    let mut total = 0.0;
    match kind {
        LossKind::SoftmaxCrossEntropy => {
            check_labels(labels, batch, width)?;
            for (b, row) in logits.rows().into_iter().enumerate() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = row.iter().map(|z| (z - max).exp()).sum();
                let lse = max + sum_exp.ln();
                total += lse - row[labels[b]];
                for (c, z) in row.iter().enumerate() {
                    let p = (z - lse).exp();
                    grad[[b, c]] = (p - (c == labels[b]) as u8 as f64) / n;
                }
            }
        }
        LossKind::BinaryLogistic => {
            if width != 1 {
                return Err(KanError::DimensionMismatch(format!(
                    "binary logistic loss needs one logit, got {width}"
                )));
            }
            check_labels(labels, batch, 2)?;
            for b in 0..batch {
                let z = logits[[b, 0]];
                let y = labels[b] as f64;
                total += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
                let sigma = 1.0 / (1.0 + (-z).exp());
                grad[[b, 0]] = (sigma - y) / n;
            }
        }
    }
    Ok((total / n, grad))
}

/// Predicted class per row: argmax with ties going to the lowest index, or
/// `logit > 0` for the binary case.
pub fn predict(logits: ArrayView2<f64>, kind: LossKind) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| match kind {
            LossKind::BinaryLogistic => (row[0] > 0.0) as usize,
            LossKind::SoftmaxCrossEntropy => {
                let mut best = 0;
                for (c, &z) in row.iter().enumerate() {
                    if z > row[best] {
                        best = c;
                    }
                }
                best
            }
        })
        .collect()
}
