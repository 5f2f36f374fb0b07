//! Incremental scenarios, the synthetic dataset and per-step dataset views.

mod io;
mod synthetic;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use io::{
    read_dataset, read_mask, read_sample, read_scenario_file, scenario_file_text, write_dataset,
    write_mask, write_sample, MASK_EXT, IMAGE_EXT,
};
pub use synthetic::{generate_synthetic_dataset, NUM_CHANNELS};
pub(crate) use io::{scenario_from_map, SCENARIO_KEYS};

/// Foreground class identifier. `0` is reserved for the step-local unseen
/// class in ground-truth masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassId(pub u8);

impl ClassId {
    /// Label of the unseen class in on-disk and step-local masks.
    pub const UNSEEN: u8 = 0;

    pub fn get(self) -> u8 {
        self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleId(pub u32);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolMode {
    /// Step images may contain pixels of any class.
    Overlapped,
    /// Step images contain only classes seen so far.
    Disjoint,
}

impl FromStr for ProtocolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlapped" => Ok(ProtocolMode::Overlapped),
            "disjoint" => Ok(ProtocolMode::Disjoint),
            other => Err(Error::Scenario(format!("unknown protocol mode {other:?}"))),
        }
    }
}

impl fmt::Display for ProtocolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolMode::Overlapped => "overlapped",
            ProtocolMode::Disjoint => "disjoint",
        })
    }
}

/// Class ordering and per-step class counts of an incremental protocol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioSpec {
    class_order: Vec<ClassId>,
    step_sizes: Vec<usize>,
    mode: ProtocolMode,
}

/// Parses `"B-I"` into `(B, I)`.
pub fn parse_notation(notation: &str) -> Result<(usize, usize)> {
    let bad = || Error::Notation(notation.to_string());
    let (b, i) = notation.trim().split_once('-').ok_or_else(bad)?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    let i: usize = i.trim().parse().map_err(|_| bad())?;
    if b == 0 || i == 0 {
        return Err(bad());
    }
    Ok((b, i))
}

/// Builds a scenario from `"B-I"` notation: `B` classes in the first step,
/// then `I` classes per step.
pub fn build_scenario(
    num_classes: usize,
    notation: &str,
    mode: ProtocolMode,
    class_order: Option<Vec<ClassId>>,
) -> Result<ScenarioSpec> {
    let (base, increment) = parse_notation(notation)?;
    if base >= num_classes || (num_classes - base) % increment != 0 {
        return Err(Error::ScenarioRemainder {
            base,
            increment,
            num_classes,
        });
    }
    let mut sizes = vec![base];
    sizes.extend(std::iter::repeat_n(increment, (num_classes - base) / increment));
    ScenarioSpec::from_step_sizes(num_classes, sizes, mode, class_order)
}

/// A seed-driven permutation of `1..=num_classes`.
pub fn shuffled_order(num_classes: usize, seed: u64) -> Vec<ClassId> {
    let mut order = ascending(num_classes);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

fn ascending(num_classes: usize) -> Vec<ClassId> {
    (1..=num_classes).map(|c| ClassId(c as u8)).collect()
}

impl ScenarioSpec {
    /// Explicit, possibly irregular step sizes (e.g. `[5, 3, 3]`).
    pub fn from_step_sizes(
        num_classes: usize,
        step_sizes: Vec<usize>,
        mode: ProtocolMode,
        class_order: Option<Vec<ClassId>>,
    ) -> Result<Self> {
        if num_classes == 0 || num_classes > 254 {
            return Err(Error::Scenario(format!(
                "num_classes must be in 1..=254, got {num_classes}"
            )));
        }
        if step_sizes.is_empty() || step_sizes.contains(&0) {
            return Err(Error::Scenario("step sizes must be positive and non-empty".into()));
        }
        let total: usize = step_sizes.iter().sum();
        if total != num_classes {
            return Err(Error::Scenario(format!(
                "step sizes sum to {total}, expected {num_classes}"
            )));
        }
        let class_order = class_order.unwrap_or_else(|| ascending(num_classes));
        let mut sorted = class_order.clone();
        sorted.sort();
        if sorted != ascending(num_classes) {
            return Err(Error::Scenario(format!(
                "class order must be a permutation of 1..={num_classes}"
            )));
        }
        Ok(ScenarioSpec {
            class_order,
            step_sizes,
            mode,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn num_steps(&self) -> usize {
        self.step_sizes.len()
    }

    pub fn step_sizes(&self) -> &[usize] {
        &self.step_sizes
    }

    pub fn class_order(&self) -> &[ClassId] {
        &self.class_order
    }

    pub fn mode(&self) -> ProtocolMode {
        self.mode
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::StepOutOfRange {
                step: t,
                num_steps: self.num_steps(),
            });
        }
        Ok(())
    }

    /// Classes introduced at step `t` (1-based), in learning order.
    pub fn step_classes(&self, t: usize) -> Result<&[ClassId]> {
        self.check_step(t)?;
        let start: usize = self.step_sizes[..t - 1].iter().sum();
        Ok(&self.class_order[start..start + self.step_sizes[t - 1]])
    }

    /// Classes seen through step `t`, in learning order.
    pub fn seen_classes(&self, t: usize) -> Result<&[ClassId]> {
        self.check_step(t)?;
        let end: usize = self.step_sizes[..t].iter().sum();
        Ok(&self.class_order[..end])
    }

    /// Classes introduced at step 1.
    pub fn base_classes(&self) -> &[ClassId] {
        &self.class_order[..self.step_sizes[0]]
    }
}

/// One image and its full ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `channels × H × W`.
    pub image: Array3<f32>,
    /// `H × W`; `0` or a foreground class id.
    pub mask: Array2<u8>,
    pub sample_id: SampleId,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.mask.iter().any(|&v| v == class.0)
    }

    /// Distinct foreground classes present in the mask.
    pub fn classes(&self) -> BTreeSet<ClassId> {
        let mut present = [false; 256];
        for &v in &self.mask {
            present[v as usize] = true;
        }
        (1..=255u8)
            .filter(|&v| present[v as usize])
            .map(ClassId)
            .collect()
    }

    /// Copy whose mask keeps only `keep` labels; everything else becomes `0`.
    pub fn relabeled(&self, keep: &BTreeSet<ClassId>) -> SegSample {
        let mut table = [ClassId::UNSEEN; 256];
        for c in keep {
            table[c.0 as usize] = c.0;
        }
        SegSample {
            image: self.image.clone(),
            mask: self.mask.mapv(|v| table[v as usize]),
            sample_id: self.sample_id,
        }
    }
}

/// Training view of one learning step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDataset {
    /// Masks carry only `current_classes` labels and `0`, except for
    /// replayed memory samples which keep historical annotations.
    pub samples: Vec<SegSample>,
    pub current_classes: BTreeSet<ClassId>,
    pub seen_classes: BTreeSet<ClassId>,
    /// Sample ids that came from the replay memory.
    pub replayed: BTreeSet<SampleId>,
}

impl StepDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Selects the original samples used at step `t` (masks untouched).
pub fn select_step_samples<'a>(
    dataset: &'a [SegSample],
    spec: &ScenarioSpec,
    t: usize,
) -> Result<Vec<&'a SegSample>> {
    let current: BTreeSet<ClassId> = spec.step_classes(t)?.iter().copied().collect();
    let seen: BTreeSet<ClassId> = spec.seen_classes(t)?.iter().copied().collect();
    let selected: Vec<&SegSample> = dataset
        .iter()
        .filter(|s| {
            let classes = s.classes();
            let has_current = classes.iter().any(|c| current.contains(c));
            match spec.mode {
                ProtocolMode::Overlapped => has_current,
                ProtocolMode::Disjoint => has_current && classes.is_subset(&seen),
            }
        })
        .collect();
    if selected.is_empty() {
        return Err(Error::EmptyStep { step: t });
    }
    Ok(selected)
}

/// Step-`t` view: samples with at least one current-class pixel (and, in
/// disjoint mode, only seen classes); every non-current label becomes `0`.
pub fn filter_step_dataset(
    dataset: &[SegSample],
    spec: &ScenarioSpec,
    t: usize,
) -> Result<StepDataset> {
    let current: BTreeSet<ClassId> = spec.step_classes(t)?.iter().copied().collect();
    let seen: BTreeSet<ClassId> = spec.seen_classes(t)?.iter().copied().collect();
    let samples = select_step_samples(dataset, spec, t)?
        .into_iter()
        .map(|s| s.relabeled(&current))
        .collect();
    Ok(StepDataset {
        samples,
        current_classes: current,
        seen_classes: seen,
        replayed: BTreeSet::new(),
    })
}
