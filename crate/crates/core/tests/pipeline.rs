use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ciss::model::{checkpoint_bytes, ModelState};
use ciss::trainer::{run_scenario_on, Dataset, RunConfig, Variant};
use ciss::Exec;

const TINY: &str = "num_classes = 4
notation = 2-1
mode = overlapped
num_train = 24
num_val = 8
height = 16
width = 16
feature_channels = 4
depth = 1
k = 3
epochs = 2
batch_size = 4
memory_capacity = 6
";

fn tiny(variant: Variant) -> RunConfig {
    RunConfig {
        variant,
        ..RunConfig::parse(TINY).unwrap()
    }
}

#[test]
fn one_checkpoint_and_report_per_step() {
    let config = tiny(Variant::FullMemory);
    let data = Dataset::load(&config).unwrap();
    let artifacts = run_scenario_on(&config, &data).unwrap();
    assert_eq!(artifacts.steps.len(), 3);
    let dir = tempfile::tempdir().unwrap();
    artifacts.write(dir.path()).unwrap();
    for name in [
        "step_1.ckpt",
        "step_2.ckpt",
        "step_3.ckpt",
        "checkpoints.csv",
        "metrics.csv",
        "summary.csv",
        "memory_step_2.txt",
        "memory_step_3.txt",
        "config.txt",
        "run_info.txt",
    ] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    let written = RunConfig::parse(&fs::read_to_string(dir.path().join("config.txt")).unwrap()).unwrap();
    assert_eq!(written, config);
}

#[test]
fn registry_grows_by_prefix() {
    let config = tiny(Variant::Full);
    let artifacts = run_scenario_on(&config, &Dataset::load(&config).unwrap()).unwrap();
    for pair in artifacts.steps.windows(2) {
        let (old, new) = (pair[0].checkpoint.registry(), pair[1].checkpoint.registry());
        assert!(new.len() > old.len());
        assert_eq!(&new[..old.len()], old);
    }
    let last = artifacts.steps.last().unwrap().checkpoint.registry();
    assert_eq!(last, config.scenario.class_order());
}

#[test]
fn serial_and_parallel_runs_are_bit_identical() {
    let serial = RunConfig {
        exec: Exec::Serial,
        ..tiny(Variant::FullMemory)
    };
    let parallel = RunConfig {
        exec: Exec::Parallel,
        ..serial.clone()
    };
    let data = Dataset::load(&serial).unwrap();
    let a = run_scenario_on(&serial, &data).unwrap();
    let b = run_scenario_on(&parallel, &data).unwrap();
    for (x, y) in a.steps.iter().zip(&b.steps) {
        assert!(checkpoint_bytes(&x.checkpoint) == checkpoint_bytes(&y.checkpoint), "step {}", x.step);
    }
    assert_eq!(a.metrics_csv(), b.metrics_csv());
}

#[test]
fn pseudo_labels_do_not_affect_the_first_step() {
    let full = tiny(Variant::Full);
    let data = Dataset::load(&full).unwrap();
    let a = run_scenario_on(&full, &data).unwrap();
    let b = run_scenario_on(&tiny(Variant::NoRemodel), &data).unwrap();
    assert!(checkpoint_bytes(&a.steps[0].checkpoint) == checkpoint_bytes(&b.steps[0].checkpoint));
}

#[test]
fn zero_learning_rate_keeps_initial_extractor() {
    let mut config = tiny(Variant::Full);
    config.optimizer.learning_rate = 0.0;
    let artifacts = run_scenario_on(&config, &Dataset::load(&config).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fresh = ModelState::new(config.extractor, config.k, config.init_scale(), &mut rng).unwrap();
    let n = fresh.params.extractor_tensor_count();
    for step in &artifacts.steps {
        let got = step.checkpoint.params.tensors();
        assert_eq!(&got[..n], &fresh.params.tensors()[..n]);
    }
}

#[test]
fn dense_loss_is_logged_only_at_the_first_step() {
    let config = tiny(Variant::Full);
    let artifacts = run_scenario_on(&config, &Dataset::load(&config).unwrap()).unwrap();
    for r in &artifacts.metrics {
        assert_eq!(r.loss.bce_dense.is_some(), r.step == 1, "step {}", r.step);
        assert!(r.loss.bce_proposal.is_some());
    }
    let csv = artifacts.metrics_csv();
    let later = csv.lines().skip(1).find(|l| l.starts_with("2,")).unwrap();
    assert_eq!(later.split(',').nth(5), Some(""));
}

#[test]
fn baseline_uses_the_dense_branch_alone() {
    let config = tiny(Variant::Baseline);
    let artifacts = run_scenario_on(&config, &Dataset::load(&config).unwrap()).unwrap();
    assert_eq!(artifacts.steps[0].checkpoint.num_unseen(), 1);
    for r in &artifacts.metrics {
        assert!(r.loss.bce_proposal.is_none());
        assert_eq!(r.loss.contrastive, 0.0);
    }
}

#[test]
fn joint_training_is_a_single_step() {
    let config = tiny(Variant::Joint);
    let artifacts = run_scenario_on(&config, &Dataset::load(&config).unwrap()).unwrap();
    assert_eq!(artifacts.steps.len(), 1);
    assert_eq!(artifacts.steps[0].checkpoint.registry().len(), 4);
}
