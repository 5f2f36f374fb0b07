//! Pseudo-labels from the previous model and supervision-label remodeling.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::model::{proposal_predict, ModelState};
use crate::proposals::ProposalSet;
use crate::scenario::ClassId;

/// Remodeled label of pixels assigned to the future-class group.
pub const FUTURE: u8 = 255;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Previous-model predictions restricted to its seen classes.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMap {
    pub labels: Array2<u8>,
    /// `σ(max logit)` per pixel.
    pub scores: Array2<f64>,
}

/// Supervision over current classes, historical classes and [`FUTURE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemodeledLabel {
    pub labels: Array2<u8>,
}

impl RemodeledLabel {
    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }
}

/// Argmax and sigmoid-of-max over the first `registry.len()` channels; the
/// unseen slots never compete. Ties go to the lowest registry index.
pub fn pseudo_labels_from_logits(logits: &Array3<f64>, registry: &[ClassId]) -> Result<PseudoLabelMap> {
    let (channels, h, w) = logits.dim();
    if registry.is_empty() || channels < registry.len() {
        return Err(Error::Shape(format!(
            "{channels} logit channels cannot hold {} seen classes",
            registry.len()
        )));
    }
    let mut labels = Array2::zeros((h, w));
    let mut scores = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::NEG_INFINITY;
            let mut label = registry[0].0;
            for (c, class) in registry.iter().enumerate() {
                let v = logits[[c, y, x]];
                if v > best {
                    best = v;
                    label = class.0;
                }
            }
            labels[[y, x]] = label;
            scores[[y, x]] = sigmoid(best);
        }
    }
    Ok(PseudoLabelMap { labels, scores })
}

/// Pseudo-labels for step `t` from the step `t-1` model's proposal branch.
pub fn pseudo_labels(
    prev_state: &ModelState,
    image: &Array3<f32>,
    proposals: &ProposalSet,
    t: usize,
) -> Result<PseudoLabelMap> {
    if t < 2 {
        return Err(Error::Config(format!("step {t} has no previous model for pseudo-labels")));
    }
    let logits = proposal_predict(prev_state, image, proposals)?;
    pseudo_labels_from_logits(&logits, prev_state.registry())
}

/// Per pixel: annotated classes keep their label; unseen pixels whose
/// pseudo-label score is strictly above `tau` take the pseudo-label; all
/// remaining pixels become [`FUTURE`].
///
/// `annotated` is the current class set, widened to every seen class for
/// replayed memory samples.
pub fn remodel_labels(
    gt: &Array2<u8>,
    pseudo: Option<&PseudoLabelMap>,
    annotated: &BTreeSet<ClassId>,
    tau: f64,
) -> Result<RemodeledLabel> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    if let Some(p) = pseudo {
        if p.labels.dim() != gt.dim() || p.scores.dim() != gt.dim() {
            return Err(Error::Shape("pseudo-label map and mask differ in size".into()));
        }
    }
    let mut keep = [false; 256];
    for c in annotated {
        keep[c.0 as usize] = true;
    }
    let mut labels = Array2::from_elem(gt.dim(), FUTURE);
    for ((y, x), &g) in gt.indexed_iter() {
        labels[[y, x]] = if keep[g as usize] {
            g
        } else if g == ClassId::UNSEEN {
            match pseudo {
                Some(p) if p.scores[[y, x]] > tau => p.labels[[y, x]],
                _ => FUTURE,
            }
        } else {
            return Err(Error::UnexpectedLabel { label: g, row: y, col: x });
        };
    }
    Ok(RemodeledLabel { labels })
}
