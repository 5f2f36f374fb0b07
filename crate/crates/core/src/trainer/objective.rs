use ndarray::{s, Array3, Zip};

use crate::error::Result;
use crate::losses::{bce_loss_grad, contrastive_loss_grad, total_loss, LossBreakdown};
use crate::model::{
    extract_features_traced, extractor_backward, masked_average_pool, masked_average_pool_backward, reorganize,
    reorganize_backward, ModelState, Params, PrototypeMatrix,
};
use crate::proposals::ProposalSet;
use crate::remodel::{sigmoid, RemodeledLabel};

/// Which terms enter the per-sample objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub step: usize,
    pub dense: bool,
    pub proposal: bool,
    /// Weight of the contrastive term on the proposal branch's unseen maps.
    pub lambda: f64,
}

/// Features and prototypes computed once under a frozen extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenInput {
    pub features: Array3<f64>,
    pub prototypes: PrototypeMatrix,
}

impl FrozenInput {
    pub fn new(state: &ModelState, image: &Array3<f32>, proposals: &ProposalSet) -> Result<Self> {
        let features = crate::model::extract_features(state, image)?;
        let prototypes = masked_average_pool(&features, proposals)?;
        Ok(FrozenInput { features, prototypes })
    }
}

pub enum SampleInput<'a> {
    /// Runs the extractor; its gradients are accumulated unless frozen.
    Image(&'a Array3<f32>),
    Frozen(&'a FrozenInput),
}

/// Loss of one sample and its gradient w.r.t. every parameter.
///
/// Dense and proposal BCE are summed, plus `λ` times the contrastive loss of
/// `σ` of the proposal branch's unseen-slot logits.
pub fn sample_objective(
    state: &ModelState,
    input: SampleInput<'_>,
    proposals: &ProposalSet,
    target: &RemodeledLabel,
    spec: ObjectiveSpec,
) -> Result<(LossBreakdown, Params)> {
    let mut grads = state.params.zeros_like();
    let registry = state.registry();
    let k = state.num_unseen();
    let seen = registry.len();

    let (trace, features, cached_protos) = match input {
        SampleInput::Image(image) => {
            let trace = extract_features_traced(state, image)?;
            (Some(trace), None, None)
        }
        SampleInput::Frozen(f) => (None, Some(&f.features), Some(&f.prototypes)),
    };
    let features = match (&trace, features) {
        (Some(t), _) => t.features(),
        (None, Some(f)) => f,
        (None, None) => unreachable!(),
    };
    let backprop_features = trace.is_some() && !state.frozen_extractor;
    let mut grad_features = backprop_features.then(|| Array3::<f64>::zeros(features.dim()));

    let mut bce_p = None;
    let mut contrastive = 0.0;
    if spec.proposal {
        let owned;
        let protos = match cached_protos {
            Some(p) => p,
            None => {
                owned = masked_average_pool(features, proposals)?;
                &owned
            }
        };
        let head = &state.params.proposal_head;
        let logits = head.forward_rows(&protos.values);
        let pixels = reorganize(&logits, proposals)?;
        let (loss, mut grad_pixels) = bce_loss_grad(&pixels, target, registry, k)?;
        bce_p = Some(loss);
        if spec.lambda > 0.0 && k > 1 {
            let maps = pixels.slice(s![seen.., .., ..]).mapv(sigmoid);
            let (lc, grad_maps) = contrastive_loss_grad(&maps)?;
            contrastive = lc;
            Zip::from(grad_pixels.slice_mut(s![seen.., .., ..]))
                .and(&grad_maps)
                .and(&maps)
                .for_each(|g, &gm, &m| *g += spec.lambda * gm * m * (1.0 - m));
        }
        let grad_logits = reorganize_backward(&grad_pixels, proposals);
        let grad_protos = head.backward_rows(&protos.values, &grad_logits, &mut grads.proposal_head);
        if let Some(gf) = grad_features.as_mut() {
            masked_average_pool_backward(&grad_protos, protos, proposals, gf);
        }
    }

    let mut bce_d = None;
    if spec.dense {
        let head = &state.params.dense_head;
        let logits = head.forward_field(features);
        let (loss, grad) = bce_loss_grad(&logits, target, registry, k)?;
        bce_d = Some(loss);
        if let Some(gin) = head.backward_field(features, &grad, &mut grads.dense_head, grad_features.is_some()) {
            if let Some(gf) = grad_features.as_mut() {
                *gf += &gin;
            }
        }
    }

    if let (Some(trace), Some(gf)) = (trace.as_ref(), grad_features) {
        extractor_backward(state, trace, gf, &mut grads);
    }

    let breakdown = match bce_p {
        Some(p) => total_loss(spec.step, p, bce_d, contrastive, spec.lambda)?,
        None => {
            let d = bce_d.unwrap_or(0.0);
            LossBreakdown {
                bce_proposal: None,
                bce_dense: bce_d,
                contrastive: 0.0,
                total: d,
                lambda: spec.lambda,
            }
        }
    };
    Ok((breakdown, grads))
}

/// Scalar objective used for finite-difference checks.
pub fn sample_loss(
    state: &ModelState,
    image: &Array3<f32>,
    proposals: &ProposalSet,
    target: &RemodeledLabel,
    spec: ObjectiveSpec,
) -> Result<f64> {
    sample_objective(state, SampleInput::Image(image), proposals, target, spec).map(|(b, _)| b.total)
}
