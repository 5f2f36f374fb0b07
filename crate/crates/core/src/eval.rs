//! Confusion matrices, grouped mIoU and comparison reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scenario::ClassId;

/// Rows are ground truth, columns predictions. Axis 0 is the unseen slot
/// (label 0); the seen classes follow in the given order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<ClassId>,
    index: Vec<Option<usize>>,
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: &[ClassId]) -> Result<Self> {
        let mut index = vec![None; 256];
        index[ClassId::UNSEEN as usize] = Some(0);
        for (i, c) in classes.iter().enumerate() {
            if index[c.0 as usize].is_some() {
                return Err(Error::DuplicateClass(c.0));
            }
            index[c.0 as usize] = Some(i + 1);
        }
        let n = classes.len() + 1;
        Ok(ConfusionMatrix {
            classes: classes.to_vec(),
            index,
            counts: Array2::zeros((n, n)),
        })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Count at `(gt, pred)` by label.
    pub fn get(&self, gt: u8, pred: u8) -> u64 {
        match (self.index[gt as usize], self.index[pred as usize]) {
            (Some(g), Some(p)) => self.counts[[g, p]],
            _ => 0,
        }
    }

    /// Adds one `(gt, pred)` pair per pixel.
    pub fn accumulate(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} and ground truth {:?} differ",
                pred.dim(),
                gt.dim()
            )));
        }
        let mut delta = Array2::<u64>::zeros(self.counts.dim());
        for (((row, col), &g), &p) in gt.indexed_iter().zip(pred.iter()) {
            let gi = self.index[g as usize].ok_or(Error::UnexpectedLabel { label: g, row, col })?;
            let pi = self.index[p as usize].ok_or(Error::UnexpectedLabel { label: p, row, col })?;
            delta[[gi, pi]] += 1;
        }
        self.counts += &delta;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::Eval("merging confusion matrices over different classes".into()));
        }
        self.counts += &other.counts;
        Ok(())
    }

    /// IoU per seen class, `None` when the class never occurs in either axis.
    pub fn class_iou(&self, class: ClassId) -> Option<f64> {
        let i = self.index[class.0 as usize]?;
        let tp = self.counts[[i, i]];
        let fn_ = self.counts.row(i).sum() - tp;
        let fp = self.counts.column(i).sum() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: BTreeMap<ClassId, Option<f64>>,
    pub base_miou: Option<f64>,
    pub novel_miou: Option<f64>,
    pub all_miou: f64,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Per-class IoU and group means over the defined classes; the unseen slot
/// never enters a mean.
pub fn miou(conf: &ConfusionMatrix, base: &BTreeSet<ClassId>, novel: &BTreeSet<ClassId>) -> Result<MiouReport> {
    let all: BTreeSet<ClassId> = conf.classes.iter().copied().collect();
    if !base.is_disjoint(novel) || base.union(novel).copied().collect::<BTreeSet<_>>() != all {
        return Err(Error::Eval(
            "base and novel classes must partition the evaluated classes".into(),
        ));
    }
    let per_class: BTreeMap<ClassId, Option<f64>> = all.iter().map(|&c| (c, conf.class_iou(c))).collect();
    let all_miou = mean(per_class.values().copied())
        .ok_or_else(|| Error::Eval("no class occurs in predictions or ground truth".into()))?;
    Ok(MiouReport {
        base_miou: mean(base.iter().map(|c| per_class[c])),
        novel_miou: mean(novel.iter().map(|c| per_class[c])),
        per_class,
        all_miou,
    })
}

/// `%.6g`-style formatting; `nan` for undefined values.
pub fn fmt_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        trim_zeros(&format!("{:.*}", (5 - exp) as usize, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    fmt_sig6(x.unwrap_or(f64::NAN))
}

fn parse_opt(what: &'static str, raw: &str) -> Result<Option<f64>> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| Error::format(what, format!("bad number {raw:?}")))?;
    Ok((!v.is_nan()).then_some(v))
}

/// Grouped mIoU of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMiou {
    pub step: usize,
    pub base: Option<f64>,
    pub novel: Option<f64>,
    pub all: Option<f64>,
}

pub const SUMMARY_HEADER: &str = "step,class_id,iou";
pub const COMPARISON_HEADER: &str = "variant,step,base_miou,novel_miou,all_miou";

/// Per-step class IoUs followed by the three group rows.
pub fn summary_csv(records: &[(usize, MiouReport)]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for (step, r) in records {
        for (c, iou) in &r.per_class {
            let _ = writeln!(out, "{step},{c},{}", fmt_opt(*iou));
        }
        let _ = writeln!(out, "{step},base_mIoU,{}", fmt_opt(r.base_miou));
        let _ = writeln!(out, "{step},novel_mIoU,{}", fmt_opt(r.novel_miou));
        let _ = writeln!(out, "{step},all_mIoU,{}", fmt_sig6(r.all_miou));
    }
    out
}

pub fn parse_summary_csv(text: &str) -> Result<Vec<StepMiou>> {
    const WHAT: &str = "summary csv";
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(Error::format(WHAT, "missing header"));
    }
    let mut steps: BTreeMap<usize, StepMiou> = BTreeMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::format(WHAT, format!("bad row {line:?}")));
        }
        let step: usize = cols[0]
            .parse()
            .map_err(|_| Error::format(WHAT, format!("bad step in {line:?}")))?;
        let entry = steps.entry(step).or_insert(StepMiou {
            step,
            base: None,
            novel: None,
            all: None,
        });
        match cols[1] {
            "base_mIoU" => entry.base = parse_opt(WHAT, cols[2])?,
            "novel_mIoU" => entry.novel = parse_opt(WHAT, cols[2])?,
            "all_mIoU" => entry.all = parse_opt(WHAT, cols[2])?,
            _ => {}
        }
    }
    Ok(steps.into_values().collect())
}

/// Final-step metrics and per-step curve of one run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub variant: String,
    pub steps: Vec<StepMiou>,
}

impl RunSummary {
    pub fn last(&self) -> Option<&StepMiou> {
        self.steps.last()
    }
}

/// Reads `summary.csv` and the `variant` line of `run_info.txt`.
pub fn read_run_summary(dir: &Path) -> Result<RunSummary> {
    let summary = dir.join("summary.csv");
    let info = dir.join("run_info.txt");
    if !summary.is_file() {
        return Err(Error::MissingMetrics(summary));
    }
    if !info.is_file() {
        return Err(Error::MissingMetrics(info));
    }
    let steps = parse_summary_csv(&fs::read_to_string(&summary)?)?;
    let info_text = fs::read_to_string(&info)?;
    let variant = info_text
        .lines()
        .find_map(|l| l.strip_prefix("variant="))
        .ok_or_else(|| Error::format("run info", "missing variant"))?
        .trim()
        .to_string();
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| variant.clone());
    Ok(RunSummary { name, variant, steps })
}

/// Per-variant mean over runs at every step; undefined values are skipped.
pub fn variant_means(runs: &[RunSummary]) -> BTreeMap<String, Vec<StepMiou>> {
    let mut grouped: BTreeMap<String, BTreeMap<usize, Vec<StepMiou>>> = BTreeMap::new();
    for run in runs {
        for s in &run.steps {
            grouped
                .entry(run.variant.clone())
                .or_default()
                .entry(s.step)
                .or_default()
                .push(*s);
        }
    }
    grouped
        .into_iter()
        .map(|(variant, steps)| {
            let rows = steps
                .into_iter()
                .map(|(step, v)| StepMiou {
                    step,
                    base: mean(v.iter().map(|s| s.base)),
                    novel: mean(v.iter().map(|s| s.novel)),
                    all: mean(v.iter().map(|s| s.all)),
                })
                .collect();
            (variant, rows)
        })
        .collect()
}

pub fn comparison_csv(means: &BTreeMap<String, Vec<StepMiou>>) -> String {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for (variant, rows) in means {
        for s in rows {
            let _ = writeln!(
                out,
                "{variant},{},{},{},{}",
                s.step,
                fmt_opt(s.base),
                fmt_opt(s.novel),
                fmt_opt(s.all)
            );
        }
    }
    out
}

pub fn curve_csv(run: &RunSummary) -> String {
    let mut out = String::from("step,base_miou,novel_miou,all_miou\n");
    for s in &run.steps {
        let _ = writeln!(out, "{},{},{},{}", s.step, fmt_opt(s.base), fmt_opt(s.novel), fmt_opt(s.all));
    }
    out
}

fn summary_table(means: &BTreeMap<String, Vec<StepMiou>>, counts: &BTreeMap<String, usize>) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x));
    let mut out = format!("{:<14} {:>5} {:>5} {:>7} {:>7} {:>7}\n", "variant", "runs", "steps", "base", "novel", "all");
    for (variant, rows) in means {
        if let Some(s) = rows.last() {
            let _ = writeln!(
                out,
                "{:<14} {:>5} {:>5} {:>7} {:>7} {:>7}",
                variant,
                counts.get(variant).copied().unwrap_or(0),
                s.step,
                pct(s.base),
                pct(s.novel),
                pct(s.all)
            );
        }
    }
    out
}

/// Writes `comparison.csv`, one `curve_<run>.csv` per run and `summary.txt`.
pub fn emit_report(runs: &[RunSummary], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::Eval("report needs at least one run".into()));
    }
    fs::create_dir_all(out_dir)?;
    let means = variant_means(runs);
    let mut counts = BTreeMap::new();
    for r in runs {
        *counts.entry(r.variant.clone()).or_insert(0) += 1;
    }
    let mut written = Vec::new();
    let comparison = out_dir.join("comparison.csv");
    fs::write(&comparison, comparison_csv(&means))?;
    written.push(comparison);
    let mut sorted: Vec<&RunSummary> = runs.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    for run in sorted {
        let path = out_dir.join(format!("curve_{}.csv", run.name));
        fs::write(&path, curve_csv(run))?;
        written.push(path);
    }
    let table = out_dir.join("summary.txt");
    fs::write(&table, summary_table(&means, &counts))?;
    written.push(table);
    Ok(written)
}

/// Parses a comparison CSV back into per-variant rows.
pub fn parse_comparison_csv(text: &str) -> Result<BTreeMap<String, Vec<StepMiou>>> {
    const WHAT: &str = "comparison csv";
    let mut lines = text.lines();
    if lines.next() != Some(COMPARISON_HEADER) {
        return Err(Error::format(WHAT, "missing header"));
    }
    let mut out: BTreeMap<String, Vec<StepMiou>> = BTreeMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::format(WHAT, format!("bad row {line:?}")));
        }
        let step = cols[1]
            .parse()
            .map_err(|_| Error::format(WHAT, format!("bad step in {line:?}")))?;
        out.entry(cols[0].to_string()).or_default().push(StepMiou {
            step,
            base: parse_opt(WHAT, cols[2])?,
            novel: parse_opt(WHAT, cols[3])?,
            all: parse_opt(WHAT, cols[4])?,
        });
    }
    Ok(out)
}
