//! Pixel accuracy and mean IoU.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub step: usize,
    pub loss: f64,
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
}

/// Accumulates a confusion matrix over batches.
#[derive(Clone, Debug)]
pub struct Confusion {
    classes: usize,
    /// `[truth, predicted]`, row-major.
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn add(&mut self, predicted: &[usize], truth: &[usize]) -> Result<()> {
        if predicted.len() != truth.len() {
            return dim_err(format!("{} predictions for {} labels", predicted.len(), truth.len()));
        }
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= self.classes || t >= self.classes {
                return dim_err(format!("label {} out of {} classes", p.max(t), self.classes));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let hit: u64 = (0..self.classes).map(|c| self.counts[c * self.classes + c]).sum();
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    /// Mean of `TP / (TP + FP + FN)` over classes present in the ground truth.
    pub fn mean_iou(&self) -> f64 {
        let k = self.classes;
        let mut sum = 0.0;
        let mut present = 0;
        for c in 0..k {
            let tp = self.counts[c * k + c];
            let truth: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
            if truth == 0 {
                continue;
            }
            let predicted: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
            sum += tp as f64 / (truth + predicted - tp) as f64;
            present += 1;
        }
        if present == 0 {
            0.0
        } else {
            sum / present as f64
        }
    }
}

/// Arg-max over the class axis of `[classes, H, W]` logits.
pub fn argmax_classes(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[0];
    let n = logits.numel() / k;
    let d = logits.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
