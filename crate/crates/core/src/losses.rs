//! Seed cross-entropy, online pseudo-labels, completion loss and the
//! four-term training objective.

pub use crate::mask::{ImageLabelSet, SeedMask, IGNORE};

use crate::error::{CianError, Result};
use crate::model::Classifier;
use crate::tensor::{Real, Tensor};

fn check_logits<T: Real>(logits: &Tensor<T>, mask: &SeedMask) -> Result<(usize, usize, usize)> {
    let (h, w, k) = logits.dims3()?;
    if h != mask.height() || w != mask.width() {
        return Err(CianError::shape(
            "cross_entropy",
            logits.shape(),
            &[mask.height(), mask.width()],
        ));
    }
    mask.validate(k)?;
    Ok((h, w, k))
}

/// Softmax cross-entropy averaged over the non-IGNORE pixels of `targets`.
/// Returns the loss and its gradient w.r.t. `logits`; an all-IGNORE mask
/// gives zero for both.
pub fn seeded_ce<T: Real>(logits: &Tensor<T>, targets: &SeedMask) -> Result<(T, Tensor<T>)> {
    let (_, _, k) = check_logits(logits, targets)?;
    let mut grad = Tensor::zeros(logits.shape());
    let valid = targets.valid_count();
    if valid == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::lit(valid as f64);
    let mut loss = T::zero();
    for ((row, g), &label) in logits
        .data()
        .chunks(k)
        .zip(grad.data_mut().chunks_mut(k))
        .zip(targets.labels())
    {
        if label == IGNORE {
            continue;
        }
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp();
            total += *gi;
        }
        let label = label as usize;
        loss += total.ln() - (row[label] - max);
        for gi in g.iter_mut() {
            *gi = *gi / total * inv;
        }
        g[label] -= inv;
    }
    let loss = loss * inv;
    if !loss.is_finite() {
        return Err(CianError::NonFinite("cross-entropy".into()));
    }
    Ok((loss, grad))
}

/// Hard pseudo-labels: the per-pixel argmax class (ties to the lowest
/// index) if it is background or one of the image's labels, else IGNORE.
pub fn online_pseudo_label<T: Real>(
    logits: &Tensor<T>,
    labels: &ImageLabelSet,
) -> Result<SeedMask> {
    let (h, w, k) = logits.dims3()?;
    let out = logits
        .data()
        .chunks(k)
        .map(|row| {
            let best = argmax(row) as u8;
            if labels.admits(best) {
                best
            } else {
                IGNORE
            }
        })
        .collect();
    SeedMask::new(h, w, out)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy against pseudo-labels; same form as [`seeded_ce`] with the
/// average taken over the pseudo mask's valid pixels.
pub fn completion_loss<T: Real>(logits: &Tensor<T>, pseudo: &SeedMask) -> Result<(T, Tensor<T>)> {
    seeded_ce(logits, pseudo)
}

/// The four terms of the objective, cross branch then self branch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms<T> {
    pub ce_cross: T,
    pub ce_self: T,
    pub cp_cross: T,
    pub cp_self: T,
}

impl<T: Real> LossTerms<T> {
    pub fn total(&self) -> T {
        self.ce_cross + self.ce_self + self.cp_cross + self.cp_self
    }
}

/// Loss of one branch's logits: seed CE plus, optionally, the completion
/// loss against pseudo-labels derived from the same logits. Returns
/// `(ce, cp, d_logits)`; the pseudo-labels are constants.
pub fn branch_loss<T: Real>(
    logits: &Tensor<T>,
    seeds: &SeedMask,
    labels: &ImageLabelSet,
    with_completion: bool,
) -> Result<(T, T, Tensor<T>)> {
    let (ce, mut grad) = seeded_ce(logits, seeds)?;
    if !with_completion {
        return Ok((ce, T::zero(), grad));
    }
    let pseudo = online_pseudo_label(logits, labels)?;
    let (cp, g_cp) = completion_loss(logits, &pseudo)?;
    grad.add_scaled(&g_cp, T::one())?;
    Ok((ce, cp, grad))
}

/// `L_ce(x̂ᶜ) + L_ce(x̂ˢ) + L_cp(x̂ᶜ) + L_cp(x̂ˢ)` with unit weights; each
/// completion term uses pseudo-labels from its own branch.
pub fn overall_loss<T: Real>(
    cross: &Tensor<T>,
    own: &Tensor<T>,
    classifier: &Classifier<T>,
    seeds: &SeedMask,
    labels: &ImageLabelSet,
) -> Result<LossTerms<T>> {
    let logits_c = classifier.forward(cross)?;
    let logits_s = classifier.forward(own)?;
    let (ce_cross, cp_cross, _) = branch_loss(&logits_c, seeds, labels, true)?;
    let (ce_self, cp_self, _) = branch_loss(&logits_s, seeds, labels, true)?;
    Ok(LossTerms {
        ce_cross,
        ce_self,
        cp_cross,
        cp_self,
    })
}
