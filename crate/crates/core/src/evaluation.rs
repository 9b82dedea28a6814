//! Confusion matrices and mean intersection-over-union.

use std::ops::AddAssign;

use crate::error::{CianError, Result};
use crate::mask::{SeedMask, IGNORE};

/// `(C+1)×(C+1)` counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    size: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// `classes` includes background.
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            size: classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.size
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.size + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every non-IGNORE ground-truth pixel.
    pub fn accumulate(&mut self, truth: &SeedMask, pred: &SeedMask) -> Result<()> {
        if (truth.height(), truth.width()) != (pred.height(), pred.width()) {
            return Err(CianError::shape(
                "accumulate",
                &[truth.height(), truth.width()],
                &[pred.height(), pred.width()],
            ));
        }
        truth.validate(self.size)?;
        if pred.labels().contains(&IGNORE) {
            return Err(CianError::invalid("predictions must not contain IGNORE"));
        }
        pred.validate(self.size)?;
        for (&g, &p) in truth.labels().iter().zip(pred.labels()) {
            if g != IGNORE {
                self.counts[g as usize * self.size + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Per-class IoU (`None` when the class never occurs in truth or
    /// prediction) and the mean over the defined classes.
    pub fn miou(&self) -> (Vec<Option<f64>>, f64) {
        let n = self.size;
        let per_class: Vec<Option<f64>> = (0..n)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..n).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..n).map(|g| self.get(g, c)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        (per_class, mean)
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, other: &ConfusionMatrix) {
        assert_eq!(
            self.size, other.size,
            "confusion matrices of different sizes"
        );
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Confusion matrix over a whole evaluation set.
pub fn evaluate(classes: usize, truth: &[SeedMask], preds: &[SeedMask]) -> Result<ConfusionMatrix> {
    if truth.len() != preds.len() {
        return Err(CianError::invalid(format!(
            "{} predictions for {} images",
            preds.len(),
            truth.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (t, p) in truth.iter().zip(preds) {
        cm.accumulate(t, p)?;
    }
    Ok(cm)
}

/// Name of class `c` in reports.
pub fn class_name(c: usize) -> String {
    if c == 0 {
        "background".into()
    } else {
        format!("class{c}")
    }
}

/// CSV with a `class,iou` header, one row per class and a final mean row.
/// Undefined classes are written as `nan`.
pub fn iou_csv(cm: &ConfusionMatrix) -> String {
    let (per_class, mean) = cm.miou();
    let mut out = String::from("class,iou\n");
    for (c, iou) in per_class.iter().enumerate() {
        match iou {
            Some(v) => out.push_str(&format!("{},{v:.6}\n", class_name(c))),
            None => out.push_str(&format!("{},nan\n", class_name(c))),
        }
    }
    out.push_str(&format!("mean,{mean:.6}\n"));
    out
}
