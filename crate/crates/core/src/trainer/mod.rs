//! Incremental training runs: per-step head expansion, freezing, label
//! remodeling, optimization, evaluation and run artifacts.

mod config;
mod objective;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{fmt_sig6, miou, summary_csv, ConfusionMatrix, MiouReport};
use crate::losses::LossBreakdown;
use crate::memory::{merge_for_training, update_memory, MemoryBuffer};
use crate::model::{
    branch_logits, checkpoint_bytes, expand_head, extract_features, freeze_extractor, predict_labels, reorganize,
    Branch, ModelState, Sgd,
};
use crate::par::Exec;
use crate::proposals::{generate_grid_proposals, generate_oracle_proposals, ProposalSet};
use crate::remodel::{pseudo_labels, pseudo_labels_from_logits, remodel_labels, PseudoLabelMap, RemodeledLabel};
use crate::scenario::{
    filter_step_dataset, generate_synthetic_dataset, read_dataset, select_step_samples, ClassId, SampleId, ScenarioSpec,
    SegSample, StepDataset,
};

pub use config::{DataSource, ProposalSource, RunConfig, Variant};
pub use objective::{sample_loss, sample_objective, FrozenInput, ObjectiveSpec, SampleInput};

/// Losses above this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub const METRICS_HEADER: &str = "step,epoch,batch,loss_total,loss_bce_p,loss_bce_d,loss_contrastive";

/// Training and validation samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
}

impl Dataset {
    pub fn load(config: &RunConfig) -> Result<Self> {
        let (train, val) = match &config.data {
            DataSource::Directory(dir) => read_dataset(dir)?,
            DataSource::Synthetic {
                num_train,
                num_val,
                height,
                width,
                seed,
            } => generate_synthetic_dataset(
                *seed,
                config.scenario.num_classes(),
                *num_train,
                *num_val,
                *height,
                *width,
            )?,
        };
        Ok(Dataset { train, val })
    }
}

/// Precomputed proposals keyed by sample id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalBank(BTreeMap<SampleId, ProposalSet>);

impl ProposalBank {
    /// Oracle proposals come from each sample's full mask.
    pub fn build(samples: &[SegSample], source: ProposalSource, fixed_n: Option<usize>, exec: Exec) -> Result<Self> {
        let sets = exec.try_map(samples, |s| {
            let p = match source {
                ProposalSource::Oracle { max_n } => generate_oracle_proposals(&s.mask, max_n)?,
                ProposalSource::Grid { rows, cols } => generate_grid_proposals(s.height(), s.width(), rows, cols)?,
            };
            match fixed_n {
                Some(n) => p.padded_to(n),
                None => Ok(p),
            }
        })?;
        Ok(ProposalBank(samples.iter().map(|s| s.sample_id).zip(sets).collect()))
    }

    pub fn get(&self, id: SampleId) -> Result<&ProposalSet> {
        self.0
            .get(&id)
            .ok_or_else(|| Error::Proposals(format!("no proposals for sample {id}")))
    }
}

/// Batch-mean losses of one optimizer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchRecord {
    pub step: usize,
    pub epoch: usize,
    pub batch: usize,
    pub loss: LossBreakdown,
}

/// Evaluation and checkpoint of one finished step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub report: MiouReport,
    pub checkpoint: ModelState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub config: RunConfig,
    pub steps: Vec<StepRecord>,
    pub metrics: Vec<BatchRecord>,
    /// Buffer contents used at each step.
    pub memory: Vec<(usize, MemoryBuffer)>,
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let opt = |f: fn(&LossBreakdown) -> Option<f64>| {
        items
            .iter()
            .map(f)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n)
    };
    LossBreakdown {
        bce_proposal: opt(|b| b.bce_proposal),
        bce_dense: opt(|b| b.bce_dense),
        contrastive: items.iter().map(|b| b.contrastive).sum::<f64>() / n,
        total: items.iter().map(|b| b.total).sum::<f64>() / n,
        lambda: items.first().map_or(0.0, |b| b.lambda),
    }
}

struct Prepared<'a> {
    sample: &'a SegSample,
    proposals: &'a ProposalSet,
    target: RemodeledLabel,
    frozen: Option<FrozenInput>,
}

fn objective_spec(config: &RunConfig, t: usize) -> ObjectiveSpec {
    let dense_only = config.variant.dense_only();
    ObjectiveSpec {
        step: t,
        dense: dense_only || t == 1,
        proposal: !dense_only,
        lambda: config.effective_lambda(),
    }
}

fn step_pseudo_labels(
    prev: &ModelState,
    state: &ModelState,
    sample: &SegSample,
    proposals: &ProposalSet,
    frozen: Option<&FrozenInput>,
    t: usize,
) -> Result<PseudoLabelMap> {
    match frozen {
        Some(f) if prev.params.extractor == state.params.extractor => {
            let logits = prev.params.proposal_head.forward_rows(&f.prototypes.values);
            let pixels = reorganize(&logits, proposals)?;
            pseudo_labels_from_logits(&pixels, prev.registry())
        }
        _ => pseudo_labels(prev, &sample.image, proposals, t),
    }
}

fn prepare<'a>(
    sample: &'a SegSample,
    state: &ModelState,
    data: &StepDataset,
    proposals: &'a ProposalBank,
    prev: Option<&ModelState>,
    tau: f64,
    t: usize,
) -> Result<Prepared<'a>> {
    let props = proposals.get(sample.sample_id)?;
    let frozen = if state.frozen_extractor {
        Some(FrozenInput::new(state, &sample.image, props)?)
    } else {
        None
    };
    let pseudo = match prev {
        Some(p) => Some(step_pseudo_labels(p, state, sample, props, frozen.as_ref(), t)?),
        None => None,
    };
    let annotated = if data.replayed.contains(&sample.sample_id) {
        &data.seen_classes
    } else {
        &data.current_classes
    };
    let target = remodel_labels(&sample.mask, pseudo.as_ref(), annotated, tau)?;
    Ok(Prepared {
        sample,
        proposals: props,
        target,
        frozen,
    })
}

/// Trains the expanded model of step `t` for the configured epochs.
///
/// Batches follow a shuffled order drawn from the run seed; per-sample
/// gradients are summed in batch order, so results do not depend on
/// `config.exec`.
pub fn run_step(
    mut state: ModelState,
    data: &StepDataset,
    proposals: &ProposalBank,
    prev: Option<&ModelState>,
    config: &RunConfig,
    t: usize,
) -> Result<(ModelState, Vec<BatchRecord>)> {
    if prev.is_some() != (t >= 2) {
        return Err(Error::Config(format!("step {t} needs a previous model iff t >= 2")));
    }
    let seen: BTreeSet<ClassId> = state.registry().iter().copied().collect();
    if seen != data.seen_classes {
        return Err(Error::Config(format!("model registry does not match the classes seen at step {t}")));
    }
    let exec = config.exec;
    let pseudo_prev = prev.filter(|_| config.variant.uses_pseudo_labels());
    let prepared = exec
        .map_range(data.len(), |i| {
            prepare(&data.samples[i], &state, data, proposals, pseudo_prev, config.tau, t)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let spec = objective_spec(config, t);
    let mut sgd = Sgd::new(config.optimizer, &state.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1000 + t as u64);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut records = Vec::new();
    for epoch in 1..=config.epochs_per_step {
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let outcomes = exec.try_map(batch, |&i| {
                let p = &prepared[i];
                let input = match &p.frozen {
                    Some(f) => SampleInput::Frozen(f),
                    None => SampleInput::Image(&p.sample.image),
                };
                sample_objective(&state, input, p.proposals, &p.target, spec)
            })?;
            let mut iter = outcomes.into_iter();
            let (first_loss, mut grads) = iter.next().expect("non-empty batch");
            let mut losses = vec![first_loss];
            for (loss, g) in iter {
                grads.add_assign(&g);
                losses.push(loss);
            }
            grads.scale(1.0 / batch.len() as f64);
            let loss = mean_breakdown(&losses);
            if !(loss.total <= DIVERGENCE_LIMIT) {
                return Err(Error::Diverged {
                    step: t,
                    epoch,
                    batch: b + 1,
                    loss: loss.total,
                });
            }
            sgd.step(&mut state, &grads);
            records.push(BatchRecord {
                step: t,
                epoch,
                batch: b + 1,
                loss,
            });
        }
    }
    Ok((state, records))
}

/// Branch whose predictions are evaluated for a variant.
pub fn eval_branch(variant: Variant) -> Branch {
    if variant.dense_only() {
        Branch::Dense
    } else {
        Branch::Proposal
    }
}

/// Confusion matrix over the classes seen by `state`, against validation
/// masks relabeled to those classes. Unseen predictions count as label 0.
pub fn evaluate(
    state: &ModelState,
    val: &[SegSample],
    proposals: &ProposalBank,
    branch: Branch,
    exec: Exec,
) -> Result<ConfusionMatrix> {
    let seen: BTreeSet<ClassId> = state.registry().iter().copied().collect();
    let parts = exec.try_map(val, |s| -> Result<ConfusionMatrix> {
        let features = extract_features(state, &s.image)?;
        let logits = branch_logits(state, &features, proposals.get(s.sample_id)?, branch)?;
        let pred = predict_labels(&logits, state.registry(), state.num_unseen(), true)?;
        let mut conf = ConfusionMatrix::new(state.registry())?;
        conf.accumulate(&pred, &s.relabeled(&seen).mask)?;
        Ok(conf)
    })?;
    let mut conf = ConfusionMatrix::new(state.registry())?;
    for p in &parts {
        conf.merge(p)?;
    }
    Ok(conf)
}

fn step_report(conf: &ConfusionMatrix, spec: &ScenarioSpec, t: usize) -> Result<MiouReport> {
    let base: BTreeSet<ClassId> = spec.base_classes().iter().copied().collect();
    let novel: BTreeSet<ClassId> = spec.seen_classes(t)?.iter().copied().filter(|c| !base.contains(c)).collect();
    miou(conf, &base, &novel)
}

fn joint_scenario(spec: &ScenarioSpec) -> Result<ScenarioSpec> {
    ScenarioSpec::from_step_sizes(
        spec.num_classes(),
        vec![spec.num_classes()],
        spec.mode(),
        Some(spec.class_order().to_vec()),
    )
}

/// Runs every step of the scenario on a loaded dataset.
pub fn run_scenario_on(config: &RunConfig, data: &Dataset) -> Result<RunArtifacts> {
    config.validate()?;
    let mut config = config.clone();
    if config.variant == Variant::Joint {
        config.scenario = joint_scenario(&config.scenario)?;
    }
    let spec = config.scenario.clone();
    let exec = config.exec;
    let train_props = ProposalBank::build(&data.train, config.proposals, config.fixed_n, exec)?;
    let val_props = ProposalBank::build(&data.val, config.proposals, config.fixed_n, exec)?;
    let branch = eval_branch(config.variant);
    let init_scale = config.init_scale();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = ModelState::new(config.extractor, config.effective_k(), init_scale, &mut rng)?;
    let mut buffer = MemoryBuffer::new(config.memory_capacity, config.seed);
    let mut artifacts = RunArtifacts {
        config: config.clone(),
        steps: Vec::new(),
        metrics: Vec::new(),
        memory: Vec::new(),
    };
    let mut prev: Option<ModelState> = None;
    for t in 1..=spec.num_steps() {
        let mut step_data = filter_step_dataset(&data.train, &spec, t)?;
        if t >= 2 {
            prev = Some(state.clone());
            state = freeze_extractor(state);
        }
        let mut step_rng = ChaCha8Rng::seed_from_u64(config.seed);
        step_rng.set_stream(t as u64);
        state = expand_head(&state, spec.step_classes(t)?, init_scale, &mut step_rng)?;
        state.step = t;
        if config.variant.uses_memory() && t >= 2 {
            let candidates: Vec<SegSample> = select_step_samples(&data.train, &spec, t - 1)?
                .into_iter()
                .cloned()
                .collect();
            let seen: BTreeSet<ClassId> = spec.seen_classes(t - 1)?.iter().copied().collect();
            buffer = update_memory(&buffer, &candidates, &seen, config.memory_capacity, t - 1)?;
            step_data = merge_for_training(&step_data, &buffer, t)?;
            artifacts.memory.push((t, buffer.clone()));
        }
        let (trained, records) = run_step(state, &step_data, &train_props, prev.as_ref(), &config, t)?;
        state = trained;
        artifacts.metrics.extend(records);
        let conf = evaluate(&state, &data.val, &val_props, branch, exec)?;
        artifacts.steps.push(StepRecord {
            step: t,
            report: step_report(&conf, &spec, t)?,
            checkpoint: state.clone(),
        });
    }
    Ok(artifacts)
}

pub fn run_scenario(config: &RunConfig) -> Result<RunArtifacts> {
    run_scenario_on(config, &Dataset::load(config)?)
}

/// All classes in a single step with the full objective, trained for
/// `epochs_per_step` epochs.
pub fn joint_train(config: &RunConfig) -> Result<RunArtifacts> {
    let mut config = config.clone();
    config.variant = Variant::Joint;
    run_scenario(&config)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn opt_cell(x: Option<f64>) -> String {
    x.map(fmt_sig6).unwrap_or_default()
}

impl RunArtifacts {
    pub fn final_report(&self) -> Option<&MiouReport> {
        self.steps.last().map(|s| &s.report)
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.metrics {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                r.batch,
                fmt_sig6(r.loss.total),
                opt_cell(r.loss.bce_proposal),
                opt_cell(r.loss.bce_dense),
                fmt_sig6(r.loss.contrastive)
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let records: Vec<(usize, MiouReport)> = self.steps.iter().map(|s| (s.step, s.report.clone())).collect();
        summary_csv(&records)
    }

    /// Writes checkpoints, metrics, summary, memory manifests and run info
    /// into `dir`. Returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: String, bytes: &[u8]| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, bytes)?;
            written.push(path);
            Ok(())
        };
        let mut index = String::from("step,file,sha256,all_miou\n");
        for s in &self.steps {
            let bytes = checkpoint_bytes(&s.checkpoint);
            let name = format!("step_{}.ckpt", s.step);
            let _ = writeln!(index, "{},{name},{},{}", s.step, sha256_hex(&bytes), fmt_sig6(s.report.all_miou));
            put(name, &bytes)?;
        }
        put("checkpoints.csv".into(), index.as_bytes())?;
        put("metrics.csv".into(), self.metrics_csv().as_bytes())?;
        put("summary.csv".into(), self.summary_csv().as_bytes())?;
        for (t, buffer) in &self.memory {
            put(format!("memory_step_{t}.txt"), buffer.manifest_text().as_bytes())?;
        }
        put("config.txt".into(), self.config.to_text().as_bytes())?;
        let info = format!(
            "variant={}\nseed={}\nsteps={}\n",
            self.config.variant,
            self.config.seed,
            self.steps.len()
        );
        put("run_info.txt".into(), info.as_bytes())?;
        Ok(written)
    }
}
