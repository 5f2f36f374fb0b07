//! The segmentation model: a small convolutional feature extractor shared by
//! a dense 1×1 head and a proposal head over masked-average-pooled
//! prototypes.

mod checkpoint;
mod layers;
mod optim;

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::proposals::{validate_partition, ProposalSet};
use crate::scenario::ClassId;

pub use checkpoint::{checkpoint_bytes, parse_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use layers::{Conv2d, Linear};
pub use optim::{Sgd, SgdConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub in_channels: usize,
    pub feature_channels: usize,
    pub depth: usize,
    pub kernel_size: usize,
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.feature_channels < 4 || self.in_channels == 0 {
            return Err(Error::Config(format!(
                "extractor needs depth >= 1, feature_channels >= 4 and input channels, got {self:?}"
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} is not odd", self.kernel_size)));
        }
        Ok(())
    }

    /// Default scale for new head rows, `1/sqrt(C)`.
    pub fn default_init_scale(&self) -> f64 {
        1.0 / (self.feature_channels as f64).sqrt()
    }
}

/// All trainable tensors. Also used for gradients and optimizer buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub extractor: Vec<Conv2d>,
    pub dense_head: Linear,
    pub proposal_head: Linear,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            extractor: self
                .extractor
                .iter()
                .map(|c| Conv2d::zeros(c.in_channels, c.out_channels, c.kernel))
                .collect(),
            dense_head: Linear::zeros(self.dense_head.in_dim, self.dense_head.out_dim),
            proposal_head: Linear::zeros(self.proposal_head.in_dim, self.proposal_head.out_dim),
        }
    }

    /// `(name, dims)` of every tensor in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (l, c) in self.extractor.iter().enumerate() {
            out.push((
                format!("extractor.{l}.weight"),
                vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
            ));
            out.push((format!("extractor.{l}.bias"), vec![c.out_channels]));
        }
        for (name, h) in [("dense", &self.dense_head), ("proposal", &self.proposal_head)] {
            out.push((format!("{name}.weight"), vec![h.out_dim, h.in_dim]));
            out.push((format!("{name}.bias"), vec![h.out_dim]));
        }
        out
    }

    /// Tensor payloads in [`Params::layout`] order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for c in &self.extractor {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        for h in [&self.dense_head, &self.proposal_head] {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.extractor {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for h in [&mut self.dense_head, &mut self.proposal_head] {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    /// Number of leading tensors that belong to the extractor.
    pub fn extractor_tensor_count(&self) -> usize {
        2 * self.extractor.len()
    }

    /// `self += other`, element-wise.
    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= factor;
            }
        }
    }
}

/// Model parameters plus the output-channel registry.
///
/// Output channels of both heads are the seen classes in learning order
/// followed by `K` unseen sub-class slots.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ExtractorConfig,
    pub params: Params,
    registry: Vec<ClassId>,
    num_unseen: usize,
    pub frozen_extractor: bool,
    pub step: usize,
}

impl ModelState {
    /// Fresh model with no classes and `k` unseen slots.
    pub fn new<R: Rng + ?Sized>(
        config: ExtractorConfig,
        k: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        let mut extractor = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels;
        for _ in 0..config.depth {
            extractor.push(Conv2d::glorot(cin, config.feature_channels, config.kernel_size, rng));
            cin = config.feature_channels;
        }
        let c = config.feature_channels;
        let mut heads = [Linear::zeros(c, 0), Linear::zeros(c, 0)];
        for head in &mut heads {
            let w: Vec<f64> = (0..k * c).map(|_| rng.gen_range(-init_scale..=init_scale)).collect();
            head.insert_rows(0, &w, &vec![0.0; k]);
        }
        let [dense_head, proposal_head] = heads;
        Ok(ModelState {
            config,
            params: Params {
                extractor,
                dense_head,
                proposal_head,
            },
            registry: Vec::new(),
            num_unseen: k,
            frozen_extractor: false,
            step: 0,
        })
    }

    pub(crate) fn from_parts(
        config: ExtractorConfig,
        params: Params,
        registry: Vec<ClassId>,
        num_unseen: usize,
        frozen_extractor: bool,
        step: usize,
    ) -> Self {
        ModelState {
            config,
            params,
            registry,
            num_unseen,
            frozen_extractor,
            step,
        }
    }

    /// Seen classes in learning order.
    pub fn registry(&self) -> &[ClassId] {
        &self.registry
    }

    /// `K`, the number of unseen sub-class slots.
    pub fn num_unseen(&self) -> usize {
        self.num_unseen
    }

    pub fn num_outputs(&self) -> usize {
        self.registry.len() + self.num_unseen
    }

    pub fn channel_of(&self, class: ClassId) -> Option<usize> {
        self.registry.iter().position(|&c| c == class)
    }
}

/// Adds output channels for `new_classes` just before the unseen slots of
/// both heads. Existing rows are untouched; new rows are uniform in
/// `[-init_scale, init_scale]` with zero bias.
pub fn expand_head<R: Rng + ?Sized>(
    state: &ModelState,
    new_classes: &[ClassId],
    init_scale: f64,
    rng: &mut R,
) -> Result<ModelState> {
    let mut next = state.clone();
    for (i, &c) in new_classes.iter().enumerate() {
        if c.0 == ClassId::UNSEEN || state.registry.contains(&c) || new_classes[..i].contains(&c) {
            return Err(Error::DuplicateClass(c.0));
        }
    }
    let c = state.config.feature_channels;
    let at = state.registry.len();
    let n = new_classes.len();
    for head in [&mut next.params.dense_head, &mut next.params.proposal_head] {
        let w: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-init_scale..=init_scale)).collect();
        head.insert_rows(at, &w, &vec![0.0; n]);
    }
    next.registry.extend_from_slice(new_classes);
    Ok(next)
}

pub fn freeze_extractor(mut state: ModelState) -> ModelState {
    state.frozen_extractor = true;
    state
}

/// Network input: intensities shifted from `[0, 1]` to `[-0.5, 0.5]`.
pub(crate) fn image_to_f64(image: &Array3<f32>) -> Array3<f64> {
    image.mapv(|v| f64::from(v) - 0.5)
}

/// SiLU, `z·σ(z)`.
#[inline]
fn silu(z: f64) -> f64 {
    z * crate::remodel::sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = crate::remodel::sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Activations of every extractor layer; `activations[0]` is the input.
pub struct ExtractorTrace {
    pub activations: Vec<Array3<f64>>,
    /// Convolution outputs before the nonlinearity, one per layer.
    pub pre_activations: Vec<Array3<f64>>,
}

impl ExtractorTrace {
    pub fn features(&self) -> &Array3<f64> {
        self.activations.last().expect("at least the input")
    }
}

fn check_channels(state: &ModelState, image: &Array3<f32>) -> Result<()> {
    if image.dim().0 != state.config.in_channels {
        return Err(Error::Shape(format!(
            "image has {} channels, extractor expects {}",
            image.dim().0,
            state.config.in_channels
        )));
    }
    Ok(())
}

/// Forward pass that keeps every activation for backpropagation.
pub fn extract_features_traced(state: &ModelState, image: &Array3<f32>) -> Result<ExtractorTrace> {
    check_channels(state, image)?;
    let mut activations = vec![image_to_f64(image)];
    let mut pre_activations = Vec::with_capacity(state.params.extractor.len());
    for conv in &state.params.extractor {
        let z = conv.forward(activations.last().unwrap());
        activations.push(z.mapv(silu));
        pre_activations.push(z);
    }
    Ok(ExtractorTrace {
        activations,
        pre_activations,
    })
}

/// `C × H × W` features: `depth` stride-1 convolutions, each followed by SiLU.
pub fn extract_features(state: &ModelState, image: &Array3<f32>) -> Result<Array3<f64>> {
    let mut trace = extract_features_traced(state, image)?;
    Ok(trace.activations.pop().unwrap())
}

/// Accumulates extractor gradients for `dL/dfeatures`.
pub fn extractor_backward(
    state: &ModelState,
    trace: &ExtractorTrace,
    grad_features: Array3<f64>,
    grads: &mut Params,
) {
    let mut g = grad_features;
    for l in (0..state.params.extractor.len()).rev() {
        let z = &trace.pre_activations[l];
        ndarray::Zip::from(&mut g).and(z).for_each(|g, &z| *g *= silu_grad(z));
        let mut gin = (l > 0).then(|| Array3::zeros(trace.activations[l].dim()));
        state.params.extractor[l].backward(
            &trace.activations[l],
            &g,
            &mut grads.extractor[l],
            gin.as_mut(),
        );
        match gin {
            Some(next) => g = next,
            None => break,
        }
    }
}

/// One mean feature vector per proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMatrix {
    /// `N × C`.
    pub values: Array2<f64>,
    /// Pixel count per proposal; zero marks an empty (padding) proposal
    /// whose row is all zeros.
    pub areas: Vec<usize>,
}

impl PrototypeMatrix {
    pub fn is_empty_row(&self, n: usize) -> bool {
        self.areas[n] == 0
    }
}

fn check_spatial(features: &Array3<f64>, proposals: &ProposalSet) -> Result<()> {
    let (_, h, w) = features.dim();
    if (h, w) != (proposals.height(), proposals.width()) {
        return Err(Error::Shape(format!(
            "features are {h}x{w}, proposals are {}x{}",
            proposals.height(),
            proposals.width()
        )));
    }
    Ok(())
}

/// Masked average pooling: row `n` is the mean feature vector over the pixels
/// of proposal `n`.
pub fn masked_average_pool(features: &Array3<f64>, proposals: &ProposalSet) -> Result<PrototypeMatrix> {
    check_spatial(features, proposals)?;
    let (c, h, w) = features.dim();
    let plane = h * w;
    let f = features.as_slice().expect("standard layout");
    let masks = proposals.masks().as_slice().expect("standard layout");
    let n = proposals.len();
    let mut values = Array2::zeros((n, c));
    let mut areas = vec![0; n];
    for k in 0..n {
        let m = &masks[k * plane..(k + 1) * plane];
        let area = m.iter().filter(|&&v| v == 1).count();
        areas[k] = area;
        if area == 0 {
            continue;
        }
        for ch in 0..c {
            let fc = &f[ch * plane..(ch + 1) * plane];
            let sum: f64 = m
                .iter()
                .zip(fc)
                .filter(|(&mv, _)| mv == 1)
                .map(|(_, &v)| v)
                .sum();
            values[[k, ch]] = sum / area as f64;
        }
    }
    Ok(PrototypeMatrix { values, areas })
}

/// Backward of [`masked_average_pool`].
pub fn masked_average_pool_backward(
    grad_prototypes: &Array2<f64>,
    prototypes: &PrototypeMatrix,
    proposals: &ProposalSet,
    grad_features: &mut Array3<f64>,
) {
    let (c, h, w) = grad_features.dim();
    let plane = h * w;
    let masks = proposals.masks().as_slice().expect("standard layout");
    let gf = grad_features.as_slice_mut().expect("standard layout");
    for (k, &area) in prototypes.areas.iter().enumerate() {
        if area == 0 {
            continue;
        }
        let m = &masks[k * plane..(k + 1) * plane];
        for ch in 0..c {
            let share = grad_prototypes[[k, ch]] / area as f64;
            if share == 0.0 {
                continue;
            }
            for (g, &mv) in gf[ch * plane..(ch + 1) * plane].iter_mut().zip(m) {
                if mv == 1 {
                    *g += share;
                }
            }
        }
    }
}

/// Proposal logits `N × |C_out|` from the proposal head.
pub fn classify_prototypes(state: &ModelState, prototypes: &PrototypeMatrix) -> Result<Array2<f64>> {
    if prototypes.values.ncols() != state.config.feature_channels {
        return Err(Error::Shape(format!(
            "prototype width {} differs from feature channels {}",
            prototypes.values.ncols(),
            state.config.feature_channels
        )));
    }
    Ok(state.params.proposal_head.forward_rows(&prototypes.values))
}

/// Scatters proposal logits to pixels: the contraction of `logitsᵀ`
/// (`|C_out| × N`) with the `N × (H·W)` mask matrix.
pub fn reorganize(proposal_logits: &Array2<f64>, proposals: &ProposalSet) -> Result<Array3<f64>> {
    validate_partition(proposals)?;
    reorganize_unchecked(proposal_logits, proposals)
}

pub(crate) fn reorganize_unchecked(
    proposal_logits: &Array2<f64>,
    proposals: &ProposalSet,
) -> Result<Array3<f64>> {
    let (n, classes) = proposal_logits.dim();
    if n != proposals.len() {
        return Err(Error::Shape(format!(
            "{n} logit rows for {} proposals",
            proposals.len()
        )));
    }
    let (h, w) = (proposals.height(), proposals.width());
    let plane = h * w;
    let masks = proposals.masks().as_slice().expect("standard layout");
    let mut out = Array3::zeros((classes, h, w));
    let o = out.as_slice_mut().expect("standard layout");
    for k in 0..n {
        let m = &masks[k * plane..(k + 1) * plane];
        for c in 0..classes {
            let l = proposal_logits[[k, c]];
            for (dst, &mv) in o[c * plane..(c + 1) * plane].iter_mut().zip(m) {
                if mv == 1 {
                    *dst += l;
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`reorganize`]: sums pixel gradients inside each proposal.
pub fn reorganize_backward(grad_pixels: &Array3<f64>, proposals: &ProposalSet) -> Array2<f64> {
    let (classes, h, w) = grad_pixels.dim();
    let plane = h * w;
    let masks = proposals.masks().as_slice().expect("standard layout");
    let g = grad_pixels.as_slice().expect("standard layout");
    let n = proposals.len();
    Array2::from_shape_fn((n, classes), |(k, c)| {
        masks[k * plane..(k + 1) * plane]
            .iter()
            .zip(&g[c * plane..(c + 1) * plane])
            .filter(|(&mv, _)| mv == 1)
            .map(|(_, &v)| v)
            .sum()
    })
}

/// Dense branch: a 1×1 convolution over the features.
pub fn dense_predict(state: &ModelState, features: &Array3<f64>) -> Result<Array3<f64>> {
    if features.dim().0 != state.config.feature_channels {
        return Err(Error::Shape(format!(
            "feature map has {} channels, head expects {}",
            features.dim().0,
            state.config.feature_channels
        )));
    }
    Ok(state.params.dense_head.forward_field(features))
}

/// Proposal branch on precomputed features.
pub fn proposal_predict_from_features(
    state: &ModelState,
    features: &Array3<f64>,
    proposals: &ProposalSet,
) -> Result<Array3<f64>> {
    let prototypes = masked_average_pool(features, proposals)?;
    let logits = classify_prototypes(state, &prototypes)?;
    reorganize(&logits, proposals)
}

/// Proposal branch: `reorganize(classify(MAP(extract(image), P)), P)`.
pub fn proposal_predict(
    state: &ModelState,
    image: &Array3<f32>,
    proposals: &ProposalSet,
) -> Result<Array3<f64>> {
    let features = extract_features(state, image)?;
    proposal_predict_from_features(state, &features, proposals)
}

/// Per-pixel argmax over `|C_out| × H × W` logits.
///
/// The unseen score is the sum of the `K` trailing slots; it competes only
/// when `include_unseen` is set and maps to label `0`. Ties go to the lowest
/// registry index, with the unseen score last.
pub fn predict_labels(
    logits: &Array3<f64>,
    registry: &[ClassId],
    k: usize,
    include_unseen: bool,
) -> Result<Array2<u8>> {
    let (channels, h, w) = logits.dim();
    if channels != registry.len() + k {
        return Err(Error::Shape(format!(
            "{channels} logit channels for {} classes and {k} unseen slots",
            registry.len()
        )));
    }
    if registry.is_empty() && !include_unseen {
        return Err(Error::Shape("no seen classes to predict".into()));
    }
    let plane = h * w;
    let l = logits.as_slice().expect("standard layout");
    let seen = registry.len();
    let labels = (0..plane)
        .map(|q| {
            let mut best = f64::NEG_INFINITY;
            let mut label = ClassId::UNSEEN;
            for (c, class) in registry.iter().enumerate() {
                let v = l[c * plane + q];
                if v > best {
                    best = v;
                    label = class.0;
                }
            }
            if include_unseen {
                let unseen: f64 = (seen..channels).map(|c| l[c * plane + q]).sum();
                if unseen > best || seen == 0 {
                    label = ClassId::UNSEEN;
                }
            }
            label
        })
        .collect();
    Ok(Array2::from_shape_vec((h, w), labels).expect("sized above"))
}

/// Which head produces the model output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Dense,
    Proposal,
}

/// Predicted mask from the proposal branch.
pub fn inference(
    state: &ModelState,
    image: &Array3<f32>,
    proposals: &ProposalSet,
    include_unseen: bool,
) -> Result<Array2<u8>> {
    inference_with(state, image, proposals, Branch::Proposal, include_unseen)
}

pub fn inference_with(
    state: &ModelState,
    image: &Array3<f32>,
    proposals: &ProposalSet,
    branch: Branch,
    include_unseen: bool,
) -> Result<Array2<u8>> {
    let features = extract_features(state, image)?;
    let logits = branch_logits(state, &features, proposals, branch)?;
    predict_labels(&logits, state.registry(), state.num_unseen(), include_unseen)
}

pub fn branch_logits(
    state: &ModelState,
    features: &Array3<f64>,
    proposals: &ProposalSet,
    branch: Branch,
) -> Result<Array3<f64>> {
    match branch {
        Branch::Dense => dense_predict(state, features),
        Branch::Proposal => proposal_predict_from_features(state, features, proposals),
    }
}
