//! Unseen-slot aggregation, branch BCE losses, the contrastive separation
//! loss and the combined objective.

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::remodel::{sigmoid, RemodeledLabel, FUTURE};
use crate::scenario::ClassId;

/// Loss components of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub bce_proposal: Option<f64>,
    /// Present only when the dense branch is supervised.
    pub bce_dense: Option<f64>,
    pub contrastive: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Splits `|C_out| × H × W` logits into the seen-class channels and the
/// unseen score map, the sum of the trailing `k` channels.
pub fn aggregate_unseen(pixel_logits: &Array3<f64>, k: usize) -> Result<(Array3<f64>, Array2<f64>)> {
    let channels = pixel_logits.dim().0;
    if k == 0 || k > channels {
        return Err(Error::Shape(format!("{k} unseen slots in {channels} channels")));
    }
    let seen = channels - k;
    let seen_logits = pixel_logits.slice(ndarray::s![..seen, .., ..]).to_owned();
    let unseen = pixel_logits
        .slice(ndarray::s![seen.., .., ..])
        .sum_axis(Axis(0));
    Ok((seen_logits, unseen))
}

/// Binary cross-entropy on a logit, `−y·log σ(x) − (1−y)·log(1−σ(x))`,
/// evaluated without forming `log σ`.
#[inline]
pub fn bce_with_logit(x: f64, target: bool) -> f64 {
    let y = if target { 1.0 } else { 0.0 };
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

fn check_finite(a: &Array3<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("pixel logits"))
    }
}

fn channel_table(registry: &[ClassId]) -> [Option<usize>; 256] {
    let mut table = [None; 256];
    for (i, c) in registry.iter().enumerate() {
        table[c.0 as usize] = Some(i);
    }
    table
}

/// BCE over the seen classes averaged over `|C_{1:t}|·Q`, plus BCE of the
/// aggregated unseen score against the [`FUTURE`] indicator averaged over
/// `Q`. Returns the loss and its gradient w.r.t. every pixel logit.
pub fn bce_loss_grad(
    pixel_logits: &Array3<f64>,
    remodeled: &RemodeledLabel,
    registry: &[ClassId],
    k: usize,
) -> Result<(f64, Array3<f64>)> {
    let (channels, h, w) = pixel_logits.dim();
    if channels != registry.len() + k || k == 0 {
        return Err(Error::Shape(format!(
            "{channels} channels for {} classes and {k} unseen slots",
            registry.len()
        )));
    }
    if remodeled.dim() != (h, w) {
        return Err(Error::Shape("remodeled label and logits differ in size".into()));
    }
    check_finite(pixel_logits)?;
    let table = channel_table(registry);
    let plane = h * w;
    let seen = registry.len();
    let q = plane as f64;
    let l = pixel_logits.as_slice().expect("standard layout");
    let labels = remodeled.labels.as_slice().expect("standard layout");
    let mut grad = vec![0.0; channels * plane];

    let mut target_channel = Vec::with_capacity(plane);
    for (i, &y) in labels.iter().enumerate() {
        let ch = if y == FUTURE {
            None
        } else {
            Some(table[y as usize].ok_or(Error::UnexpectedLabel {
                label: y,
                row: i / w,
                col: i % w,
            })?)
        };
        target_channel.push(ch);
    }

    let mut seen_sum = 0.0;
    if seen > 0 {
        let norm = 1.0 / (seen as f64 * q);
        for c in 0..seen {
            for i in 0..plane {
                let x = l[c * plane + i];
                let y = target_channel[i] == Some(c);
                seen_sum += bce_with_logit(x, y);
                grad[c * plane + i] = (sigmoid(x) - if y { 1.0 } else { 0.0 }) * norm;
            }
        }
        seen_sum *= norm;
    }

    let mut unseen_sum = 0.0;
    for i in 0..plane {
        let u: f64 = (seen..channels).map(|c| l[c * plane + i]).sum();
        let y = target_channel[i].is_none();
        unseen_sum += bce_with_logit(u, y);
        let g = (sigmoid(u) - if y { 1.0 } else { 0.0 }) / q;
        for c in seen..channels {
            grad[c * plane + i] = g;
        }
    }
    unseen_sum /= q;

    let grad = Array3::from_shape_vec((channels, h, w), grad).expect("sized above");
    Ok((seen_sum + unseen_sum, grad))
}

pub fn bce_loss(
    pixel_logits: &Array3<f64>,
    remodeled: &RemodeledLabel,
    registry: &[ClassId],
    k: usize,
) -> Result<f64> {
    bce_loss_grad(pixel_logits, remodeled, registry, k).map(|(l, _)| l)
}

/// BCE of the supervised branches: proposal plus dense at step 1, proposal
/// alone afterwards.
pub fn branch_loss(t: usize, bce_proposal: f64, bce_dense: Option<f64>) -> Result<f64> {
    match (t, bce_dense) {
        (0, _) => Err(Error::LossContract("steps are numbered from 1".into())),
        (1, Some(d)) => Ok(bce_proposal + d),
        (1, None) => Err(Error::LossContract("step 1 needs the dense-branch loss".into())),
        (_, None) => Ok(bce_proposal),
        (_, Some(_)) => Err(Error::LossContract(format!(
            "dense-branch loss supplied at step {t}"
        ))),
    }
}

fn unit_rows(maps: &Array3<f64>) -> (Array2<f64>, Vec<f64>) {
    let k = maps.dim().0;
    let flat = maps
        .to_shape((k, maps.len() / k.max(1)))
        .expect("contiguous")
        .to_owned();
    let mut unit = flat;
    let mut norms = Vec::with_capacity(k);
    for mut row in unit.outer_iter_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
        norms.push(n);
    }
    (unit, norms)
}

/// Contrastive separation of the `K` unseen-slot maps (`K × H × W`): each map
/// is flattened and scaled to unit length (zero maps stay zero), then
/// `L = −(1/K) Σ_i log(exp(v_i·v_i) / Σ_j exp(v_i·v_j))`.
pub fn contrastive_loss_grad(maps: &Array3<f64>) -> Result<(f64, Array3<f64>)> {
    let k = maps.dim().0;
    if k == 0 {
        return Err(Error::LossContract("contrastive loss needs K >= 1".into()));
    }
    if !maps.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("unseen maps"));
    }
    let (v, norms) = unit_rows(maps);
    let gram = v.dot(&v.t());
    let kf = k as f64;
    let mut loss = 0.0;
    // dL/dG
    let mut dg = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        let row = gram.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&g| (g - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - gram[[i, i]];
        for j in 0..k {
            let softmax = (gram[[i, j]] - lse).exp();
            dg[[i, j]] = (softmax - if i == j { 1.0 } else { 0.0 }) / kf;
        }
    }
    loss /= kf;
    let dv = (&dg + &dg.t()).dot(&v);
    let mut grad = Array2::<f64>::zeros(v.dim());
    for i in 0..k {
        if norms[i] == 0.0 {
            continue;
        }
        let vi = v.row(i);
        let dvi = dv.row(i);
        let radial = vi.dot(&dvi);
        let gi = (&dvi - &(&vi * radial)) / norms[i];
        grad.row_mut(i).assign(&gi);
    }
    let grad = grad.into_shape_with_order(maps.dim()).expect("same length");
    Ok((loss, grad))
}

pub fn contrastive_loss(maps: &Array3<f64>) -> Result<f64> {
    contrastive_loss_grad(maps).map(|(l, _)| l)
}

/// `branch_loss + λ·contrastive`.
pub fn total_loss(
    t: usize,
    bce_proposal: f64,
    bce_dense: Option<f64>,
    contrastive: f64,
    lambda: f64,
) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::LossContract(format!("lambda must be non-negative, got {lambda}")));
    }
    let bce = branch_loss(t, bce_proposal, bce_dense)?;
    let total = bce + lambda * contrastive;
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss"));
    }
    Ok(LossBreakdown {
        bce_proposal: Some(bce_proposal),
        bce_dense,
        contrastive,
        total,
        lambda,
    })
}
