//! Acceptance gate: one PASS/FAIL line per criterion.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ciss::eval::{emit_report, parse_comparison_csv, read_run_summary, RunSummary, StepMiou};
use ciss::losses::contrastive_loss;
use ciss::memory::{update_memory, MemoryBuffer};
use ciss::model::{
    expand_head, masked_average_pool, reorganize, ExtractorConfig, ModelState,
};
use ciss::proposals::{generate_oracle_proposals, ProposalSet};
use ciss::remodel::{remodel_labels, PseudoLabelMap, RemodeledLabel, FUTURE};
use ciss::scenario::{build_scenario, ClassId, ProtocolMode, SampleId, SegSample};
use ciss::trainer::{run_scenario_on, sample_loss, sample_objective, Dataset, ObjectiveSpec, RunConfig, SampleInput, Variant};
use ciss::Exec;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_remodel_truth_table() -> Outcome {
    let eps = 1e-9;
    let annotated: BTreeSet<ClassId> = [ClassId(16)].into_iter().collect();
    let mut cases = 0;
    for tau in [0.3, 0.5, 0.7, 0.9] {
        for gt_current in [true, false] {
            for pseudo_available in [true, false] {
                for score in [tau - eps, tau, tau + eps] {
                    let gt = Array2::from_elem((1, 1), if gt_current { 16 } else { 0 });
                    let pseudo = PseudoLabelMap {
                        labels: Array2::from_elem((1, 1), 7),
                        scores: Array2::from_elem((1, 1), score),
                    };
                    let got = remodel_labels(&gt, pseudo_available.then_some(&pseudo), &annotated, tau)
                        .map_err(|e| e.to_string())?
                        .labels[[0, 0]];
                    let want = if gt_current {
                        16
                    } else if pseudo_available && score > tau {
                        7
                    } else {
                        FUTURE
                    };
                    if got != want {
                        return Err(format!(
                            "tau {tau}, current {gt_current}, pseudo {pseudo_available}, score {score}: got {got}, want {want}"
                        ));
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} cases match"))
}

fn random_partition(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> ProposalSet {
    let assignment = Array2::from_shape_fn((h, w), |_| rng.gen_range(0..n));
    ProposalSet::from_assignment(&assignment, n).expect("valid assignment")
}

fn c2_reorganize_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..1000 {
        let n = rng.gen_range(1..=10);
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let classes = rng.gen_range(1..=6);
        let props = random_partition(&mut rng, n, h, w);
        let logits = Array2::from_shape_fn((n, classes), |_| rng.gen_range(-10.0..10.0));
        let pixels = reorganize(&logits, &props).map_err(|e| e.to_string())?;
        for y in 0..h {
            for x in 0..w {
                let k = (0..n).find(|&k| props.masks()[[k, y, x]] == 1).expect("partition");
                for c in 0..classes {
                    if pixels[[c, y, x]].to_bits() != logits[[k, c]].to_bits() {
                        return Err(format!("instance {trial}: pixel ({y}, {x}) class {c} differs"));
                    }
                }
            }
        }
    }
    Ok("1000 instances bit-equal".into())
}

fn c3_map_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=10);
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let c = rng.gen_range(1..=8);
        let props = random_partition(&mut rng, n, h, w);
        let features = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-5.0..5.0));
        let protos = masked_average_pool(&features, &props).map_err(|e| e.to_string())?;
        for k in 0..n {
            let mut sum = vec![0.0; c];
            let mut area = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if props.masks()[[k, y, x]] == 1 {
                        area += 1;
                        for (ch, s) in sum.iter_mut().enumerate() {
                            *s += features[[ch, y, x]];
                        }
                    }
                }
            }
            for (ch, s) in sum.iter().enumerate() {
                let want = if area == 0 { 0.0 } else { s / area as f64 };
                worst = worst.max((protos.values[[k, ch]] - want).abs());
            }
        }
    }
    check(worst <= 1e-9, format!("max abs error {worst:.3e} over 1000 instances"))
}

fn random_instance(rng: &mut ChaCha8Rng) -> (ModelState, Array3<f32>, ProposalSet, RemodeledLabel, ObjectiveSpec) {
    let config = ExtractorConfig {
        in_channels: 3,
        feature_channels: 4,
        depth: rng.gen_range(1..=2),
        kernel_size: 3,
    };
    let k = rng.gen_range(1..=3);
    let num_classes = rng.gen_range(1..=4);
    let mut state = ModelState::new(config, k, 0.5, rng).expect("valid config");
    let classes: Vec<ClassId> = (1..=num_classes as u8).map(ClassId).collect();
    state = expand_head(&state, &classes, 0.5, rng).expect("fresh classes");
    for t in state.params.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let image = Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(0.0f32..1.0));
    let mask = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0..=num_classes as u8));
    let proposals = generate_oracle_proposals(&mask, 16).expect("at most 16 components");
    let alphabet: Vec<u8> = classes.iter().map(|c| c.0).chain([FUTURE]).collect();
    let labels = Array2::from_shape_fn((4, 4), |_| alphabet[rng.gen_range(0..alphabet.len())]);
    let step = rng.gen_range(1..=2);
    let spec = ObjectiveSpec {
        step,
        dense: step == 1,
        proposal: true,
        lambda: rng.gen_range(0.5..2.0),
    };
    (state, image, proposals, RemodeledLabel { labels }, spec)
}

fn c4_gradient_suite() -> Outcome {
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for trial in 0..100 {
        let (state, image, props, target, spec) = random_instance(&mut rng);
        let (_, grads) = sample_objective(&state, SampleInput::Image(&image), &props, &target, spec)
            .map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = grads.tensors().into_iter().flatten().copied().collect();
        let sizes: Vec<usize> = state.params.tensors().iter().map(|t| t.len()).collect();
        let mut flat = 0;
        for (ti, &len) in sizes.iter().enumerate() {
            for i in 0..len {
                let eval = |delta: f64| {
                    let mut s = state.clone();
                    s.params.tensors_mut()[ti][i] += delta;
                    sample_loss(&s, &image, &props, &target, spec)
                };
                let plus = eval(h).map_err(|e| e.to_string())?;
                let minus = eval(-h).map_err(|e| e.to_string())?;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic[flat];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                if rel > worst {
                    worst = rel;
                }
                if rel > 1e-4 {
                    return Err(format!(
                        "instance {trial}, tensor {ti}, index {i}: analytic {a:.6e}, numeric {numeric:.6e}"
                    ));
                }
                flat += 1;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} partials, max relative error {worst:.2e}"))
}

fn c5_contrastive_closed_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let single = Array3::from_shape_fn((1, 3, 3), |_| rng.gen_range(0.0..1.0));
    let l1 = contrastive_loss(&single).map_err(|e| e.to_string())?;
    if l1 != 0.0 {
        return Err(format!("K=1 gives {l1}"));
    }
    for k in [2usize, 3, 5] {
        let base = Array2::from_shape_fn((3, 3), |_| rng.gen_range(0.1..1.0));
        let maps = Array3::from_shape_fn((k, 3, 3), |(_, y, x)| base[[y, x]]);
        let l = contrastive_loss(&maps).map_err(|e| e.to_string())?;
        if (l - (k as f64).ln()).abs() > 1e-9 {
            return Err(format!("identical maps at K={k}: {l}, want ln K"));
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.gen_range(2..=6);
        let maps = Array3::from_shape_fn((k, 4, 4), |_| rng.gen_range(0.0..1.0));
        let l = contrastive_loss(&maps).map_err(|e| e.to_string())?;
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permuted = maps.select(ndarray::Axis(0), &perm);
        worst = worst.max((contrastive_loss(&permuted).map_err(|e| e.to_string())? - l).abs());
    }
    check(worst <= 1e-12, format!("ln K exact to 1e-9, permutation deviation {worst:.1e}"))
}

fn sample_with(id: u32, classes: &BTreeSet<u8>) -> SegSample {
    let mut mask = Array2::zeros((4, 4));
    for (i, &c) in classes.iter().enumerate() {
        mask[[i / 4, i % 4]] = c;
    }
    SegSample {
        image: Array3::zeros((1, 4, 4)),
        mask,
        sample_id: SampleId(id),
    }
}

fn c6_memory_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut satisfiable = 0;
    let mut rejected = 0;
    for scenario in 0..200 {
        let num_classes = rng.gen_range(2..=8u8);
        let steps = rng.gen_range(2..=4);
        let seed = rng.gen();
        let mut buffer = MemoryBuffer::new(0, seed);
        let mut twin = MemoryBuffer::new(0, seed);
        let mut seen = BTreeSet::new();
        let mut next_id = 0;
        for step in 1..=steps {
            let count = rng.gen_range(1..=12);
            let candidates: Vec<SegSample> = (0..count)
                .map(|_| {
                    let k = rng.gen_range(0..=3);
                    let cs: BTreeSet<u8> = (0..k).map(|_| rng.gen_range(1..=num_classes)).collect();
                    next_id += 1;
                    sample_with(next_id, &cs)
                })
                .collect();
            for _ in 0..rng.gen_range(1..=3) {
                seen.insert(ClassId(rng.gen_range(1..=num_classes)));
            }
            let capacity = seen.len() + rng.gen_range(0..=4);
            let pool_covers = |c: &ClassId| {
                candidates.iter().any(|s| s.contains(*c)) || buffer.entries().iter().any(|e| e.sample.contains(*c))
            };
            let coverable = seen.iter().all(pool_covers);
            let a = update_memory(&buffer, &candidates, &seen, capacity, step);
            let b = update_memory(&twin, &candidates, &seen, capacity, step);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    if !coverable {
                        return Err(format!("scenario {scenario}: uncoverable inputs accepted"));
                    }
                    if a != b {
                        return Err(format!("scenario {scenario}: equal seeds gave different buffers"));
                    }
                    if a.len() > capacity {
                        return Err(format!("scenario {scenario}: {} entries over capacity {capacity}", a.len()));
                    }
                    let ids: BTreeSet<SampleId> = a.entries().iter().map(|e| e.sample.sample_id).collect();
                    if ids.len() != a.len() {
                        return Err(format!("scenario {scenario}: duplicate entries"));
                    }
                    if let Some(c) = seen.iter().find(|c| !a.covers(**c)) {
                        return Err(format!("scenario {scenario}: class {c} not covered"));
                    }
                    satisfiable += 1;
                    buffer = a;
                    twin = b;
                }
                (Err(_), Err(_)) if !coverable => {
                    rejected += 1;
                    break;
                }
                (a, b) => {
                    return Err(format!("scenario {scenario}: unexpected outcome {:?} / {:?}", a.err(), b.err()));
                }
            }
        }
    }
    Ok(format!("{satisfiable} updates covered, {rejected} unsatisfiable inputs rejected"))
}

struct FixtureRuns {
    summaries: Vec<RunSummary>,
    time_ablation: Duration,
    time_total: Duration,
    comparison: std::collections::BTreeMap<String, Vec<StepMiou>>,
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn fixture_runs(out: &Path) -> Result<FixtureRuns, String> {
    let base = RunConfig {
        exec: Exec::Serial,
        ..RunConfig::standard()
    };
    let data = Dataset::load(&base).map_err(|e| e.to_string())?;
    let mut summaries = Vec::new();
    let mut time_ablation = Duration::ZERO;
    let mut time_total = Duration::ZERO;
    let variants = [
        Variant::Baseline,
        Variant::NoRemodel,
        Variant::Full,
        Variant::FullMemory,
        Variant::Joint,
    ];
    for variant in variants {
        for seed in SEEDS {
            let config = RunConfig {
                variant,
                seed,
                ..base.clone()
            };
            let started = Instant::now();
            let artifacts = run_scenario_on(&config, &data).map_err(|e| format!("{variant} seed {seed}: {e}"))?;
            let elapsed = started.elapsed();
            time_total += elapsed;
            if matches!(variant, Variant::Baseline | Variant::NoRemodel | Variant::Full) {
                time_ablation += elapsed;
            }
            let dir = out.join(format!("{variant}_s{seed}"));
            artifacts.write(&dir).map_err(|e| e.to_string())?;
            summaries.push(read_run_summary(&dir).map_err(|e| e.to_string())?);
            let last = artifacts.final_report().expect("at least one step");
            println!(
                "    {variant:<12} seed {seed}: final all {:.4} base {:.4} novel {:.4} ({:.1}s)",
                last.all_miou,
                last.base_miou.unwrap_or(f64::NAN),
                last.novel_miou.unwrap_or(f64::NAN),
                elapsed.as_secs_f64()
            );
        }
    }
    let report = out.join("report");
    emit_report(&summaries, &report).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(report.join("comparison.csv")).map_err(|e| e.to_string())?;
    let comparison = parse_comparison_csv(&text).map_err(|e| e.to_string())?;
    Ok(FixtureRuns {
        summaries,
        time_ablation,
        time_total,
        comparison,
    })
}

fn final_all(runs: &FixtureRuns, variant: Variant, seed: u64) -> f64 {
    let name = format!("{variant}_s{seed}");
    runs.summaries
        .iter()
        .find(|r| r.name == name)
        .and_then(|r| r.last())
        .and_then(|s| s.all)
        .unwrap_or(f64::NAN)
}

fn last_row(runs: &FixtureRuns, variant: Variant) -> StepMiou {
    *runs.comparison[variant.name()].last().expect("steps present")
}

fn c7_ablation(runs: &FixtureRuns) -> Outcome {
    let mut details = Vec::new();
    let mut ordered = true;
    for seed in SEEDS {
        let (f, n, b) = (
            final_all(runs, Variant::Full, seed),
            final_all(runs, Variant::NoRemodel, seed),
            final_all(runs, Variant::Baseline, seed),
        );
        ordered &= f >= n && n >= b;
        details.push(format!("s{seed} {:.1}/{:.1}/{:.1}", 100.0 * f, 100.0 * n, 100.0 * b));
    }
    let gap = 100.0 * (last_row(runs, Variant::Full).all.unwrap_or(f64::NAN) - last_row(runs, Variant::Baseline).all.unwrap_or(f64::NAN));
    let secs = runs.time_ablation.as_secs_f64();
    check(
        ordered && gap >= 10.0 && secs < 600.0,
        format!(
            "full/no_remodel/baseline {}; mean gap {gap:.1} points; {secs:.0}s serial",
            details.join(", ")
        ),
    )
}

fn c8_memory_trend(runs: &FixtureRuns) -> Outcome {
    let m = last_row(runs, Variant::FullMemory).novel.unwrap_or(f64::NAN);
    let f = last_row(runs, Variant::Full).novel.unwrap_or(f64::NAN);
    check(m >= f, format!("novel mIoU full_memory {:.1} vs full {:.1}", 100.0 * m, 100.0 * f))
}

fn c9_upper_bound(runs: &FixtureRuns) -> Outcome {
    let joint = last_row(runs, Variant::Joint).all.unwrap_or(f64::NAN);
    let mut parts = vec![format!("joint {:.1}", 100.0 * joint)];
    let mut ok = true;
    for v in [Variant::Baseline, Variant::NoRemodel, Variant::Full, Variant::FullMemory] {
        let a = last_row(runs, v).all.unwrap_or(f64::NAN);
        ok &= joint >= a;
        parts.push(format!("{v} {:.1}", 100.0 * a));
    }
    check(ok, parts.join(", "))
}

fn c10_forgetting_curve(runs: &FixtureRuns) -> Outcome {
    let full = &runs.comparison[Variant::Full.name()];
    let base = &runs.comparison[Variant::Baseline.name()];
    let mut ok = full.len() == base.len();
    let mut parts = Vec::new();
    for (f, b) in full.iter().zip(base).filter(|(f, _)| f.step >= 2) {
        let (fv, bv) = (f.base.unwrap_or(f64::NAN), b.base.unwrap_or(f64::NAN));
        ok &= fv >= bv;
        parts.push(format!("t{} {:.1}>={:.1}", f.step, 100.0 * fv, 100.0 * bv));
    }
    check(ok, parts.join(", "))
}

fn c11_determinism(out: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_ciss");
    let dirs = [out.join("det_a"), out.join("det_b")];
    for dir in &dirs {
        let status = Command::new(bin)
            .args(["run", "--seed", "0", "--out"])
            .arg(dir)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
    }
    let mut files: Vec<String> = std::fs::read_dir(&dirs[0])
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv") || n.ends_with(".ckpt"))
        .collect();
    files.sort();
    for name in &files {
        let a = std::fs::read(dirs[0].join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].join(name)).map_err(|e| format!("{name}: {e}"))?;
        if a != b {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok(format!("{} metrics and checkpoint files byte-identical", files.len()))
}

fn c12_protocols() -> Outcome {
    let mut parts = Vec::new();
    for (n, notation, want) in [(20, "15-1", 6), (20, "2-2", 10), (150, "100-10", 6)] {
        let spec = build_scenario(n, notation, ProtocolMode::Overlapped, None).map_err(|e| e.to_string())?;
        if spec.num_steps() != want {
            return Err(format!("{notation} over {n} classes gives {} steps", spec.num_steps()));
        }
        parts.push(format!("{notation}: {want}"));
    }
    Ok(parts.join(", "))
}

fn report(results: &mut Vec<bool>, id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
    let started = Instant::now();
    let outcome = f();
    let elapsed = started.elapsed();
    let (ok, detail) = match outcome {
        Ok(d) => match limit {
            Some(l) if elapsed > l => (false, format!("{d}; took {:.2}s, limit {:.0}s", elapsed.as_secs_f64(), l.as_secs_f64())),
            _ => (true, d),
        },
        Err(d) => (false, d),
    };
    println!(
        "{} [{id:>2}] {name}: {detail} ({:.2}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    results.push(ok);
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    let secs = Duration::from_secs;
    report(&mut results, 1, "remodeling truth table", Some(secs(1)), c1_remodel_truth_table);
    report(&mut results, 2, "reorganization oracle", Some(secs(10)), c2_reorganize_oracle);
    report(&mut results, 3, "masked average pooling oracle", None, c3_map_oracle);
    report(&mut results, 4, "gradient suite", Some(secs(60)), c4_gradient_suite);
    report(&mut results, 5, "contrastive closed forms", None, c5_contrastive_closed_forms);
    report(&mut results, 6, "memory properties", None, c6_memory_properties);

    let scratch = tempfile::tempdir().expect("temporary directory");
    println!("     fixture runs (8 classes, 4-1 overlapped, seeds 0 1 2):");
    match fixture_runs(scratch.path()) {
        Ok(runs) => {
            println!("     all fixture runs: {:.0}s serial", runs.time_total.as_secs_f64());
            report(&mut results, 7, "ablation ordering", None, || c7_ablation(&runs));
            report(&mut results, 8, "memory trend", None, || c8_memory_trend(&runs));
            report(&mut results, 9, "joint upper bound", None, || c9_upper_bound(&runs));
            report(&mut results, 10, "forgetting curve", None, || c10_forgetting_curve(&runs));
        }
        Err(e) => {
            for (id, name) in [(7, "ablation ordering"), (8, "memory trend"), (9, "joint upper bound"), (10, "forgetting curve")] {
                report(&mut results, id, name, None, || Err(e.clone()));
            }
        }
    }
    report(&mut results, 11, "determinism", None, || c11_determinism(scratch.path()));
    report(&mut results, 12, "protocol conformance", None, c12_protocols);

    let passed = results.iter().filter(|&&ok| ok).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
