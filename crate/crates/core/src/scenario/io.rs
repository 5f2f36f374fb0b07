//! Dataset and scenario files.
//!
//! Each sample is stored as `NNNN.img` (little-endian `f32`, channels × H × W)
//! and `NNNN.msk` (`u8` class ids, H × W). Both start with a 16-byte header:
//! the magic `CISS` followed by `u32` channels, height and width.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};

use super::{build_scenario, shuffled_order, ProtocolMode, SampleId, ScenarioSpec, SegSample};
use crate::error::{Error, Result};
use crate::kv;

const MAGIC: &[u8; 4] = b"CISS";
pub const IMAGE_EXT: &str = "img";
pub const MASK_EXT: &str = "msk";

fn header(channels: usize, height: usize, width: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    out.extend_from_slice(MAGIC);
    for v in [channels, height, width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out
}

fn parse_header(bytes: &[u8], what: &'static str) -> Result<(usize, usize, usize)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::format(what, "missing CISS header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    Ok((word(4), word(8), word(12)))
}

pub fn image_bytes(image: &Array3<f32>) -> Vec<u8> {
    let (c, h, w) = image.dim();
    let mut out = header(c, h, w);
    out.reserve(c * h * w * 4);
    for v in image.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn mask_bytes(mask: &Array2<u8>) -> Vec<u8> {
    let (h, w) = mask.dim();
    let mut out = header(1, h, w);
    out.extend(mask.iter().copied());
    out
}

pub fn parse_image(bytes: &[u8]) -> Result<Array3<f32>> {
    let (c, h, w) = parse_header(bytes, "image file")?;
    let body = &bytes[16..];
    if body.len() != c * h * w * 4 {
        return Err(Error::format("image file", format!("expected {} payload bytes, found {}", c * h * w * 4, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Array3::from_shape_vec((c, h, w), data).expect("length checked"))
}

pub fn parse_mask(bytes: &[u8]) -> Result<Array2<u8>> {
    let (c, h, w) = parse_header(bytes, "mask file")?;
    let body = &bytes[16..];
    if c != 1 || body.len() != h * w {
        return Err(Error::format("mask file", format!("expected 1 channel and {} bytes", h * w)));
    }
    Ok(Array2::from_shape_vec((h, w), body.to_vec()).expect("length checked"))
}

pub fn write_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    fs::write(path, mask_bytes(mask))?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    parse_mask(&fs::read(path)?)
}

pub fn write_sample(dir: &Path, sample: &SegSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let stem = sample.sample_id.to_string();
    fs::write(dir.join(format!("{stem}.{IMAGE_EXT}")), image_bytes(&sample.image))?;
    write_mask(&dir.join(format!("{stem}.{MASK_EXT}")), &sample.mask)
}

pub fn read_sample(dir: &Path, id: SampleId) -> Result<SegSample> {
    let image = parse_image(&fs::read(dir.join(format!("{id}.{IMAGE_EXT}")))?)?;
    let mask = read_mask(&dir.join(format!("{id}.{MASK_EXT}")))?;
    if image.dim().1 != mask.nrows() || image.dim().2 != mask.ncols() {
        return Err(Error::format("sample", format!("image and mask sizes differ for {id}")));
    }
    Ok(SegSample {
        image,
        mask,
        sample_id: id,
    })
}

fn read_split(dir: &Path) -> Result<Vec<SegSample>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(IMAGE_EXT) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let id: u32 = stem
            .parse()
            .map_err(|_| Error::format("dataset", format!("bad sample file name {}", path.display())))?;
        ids.push(SampleId(id));
    }
    ids.sort();
    ids.into_iter().map(|id| read_sample(dir, id)).collect()
}

/// Writes `root/train` and `root/val`.
pub fn write_dataset(root: &Path, train: &[SegSample], val: &[SegSample]) -> Result<()> {
    for (name, split) in [("train", train), ("val", val)] {
        let dir = root.join(name);
        fs::create_dir_all(&dir)?;
        for s in split {
            write_sample(&dir, s)?;
        }
    }
    Ok(())
}

pub fn read_dataset(root: &Path) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    Ok((read_split(&root.join("train"))?, read_split(&root.join("val"))?))
}

pub(crate) const SCENARIO_KEYS: &[&str] = &["num_classes", "notation", "step_sizes", "mode", "order_seed"];

/// Parses a scenario file (`num_classes`, `notation` or `step_sizes`, `mode`,
/// optional `order_seed`).
pub fn read_scenario_file(text: &str) -> Result<ScenarioSpec> {
    let map = kv::parse(text, SCENARIO_KEYS)?;
    scenario_from_map(&map)
}

pub(crate) fn scenario_from_map(
    map: &std::collections::BTreeMap<String, String>,
) -> Result<ScenarioSpec> {
    let num_classes: usize = kv::value(
        "num_classes",
        map.get("num_classes")
            .ok_or_else(|| Error::Config("num_classes is required".into()))?,
    )?;
    let mode: ProtocolMode = match map.get("mode") {
        Some(m) => m.parse()?,
        None => ProtocolMode::Overlapped,
    };
    let order = match map.get("order_seed") {
        Some(s) => Some(shuffled_order(num_classes, kv::value("order_seed", s)?)),
        None => None,
    };
    match (map.get("notation"), map.get("step_sizes")) {
        (Some(n), None) => build_scenario(num_classes, n, mode, order),
        (None, Some(s)) => ScenarioSpec::from_step_sizes(num_classes, kv::list("step_sizes", s)?, mode, order),
        _ => Err(Error::Config("exactly one of notation or step_sizes is required".into())),
    }
}

/// Scenario file text for `spec`, using explicit step sizes.
pub fn scenario_file_text(spec: &ScenarioSpec, order_seed: Option<u64>) -> String {
    let mut out = Vec::new();
    writeln!(out, "num_classes = {}", spec.num_classes()).unwrap();
    let sizes: Vec<String> = spec.step_sizes().iter().map(|s| s.to_string()).collect();
    writeln!(out, "step_sizes = {}", sizes.join(",")).unwrap();
    writeln!(out, "mode = {}", spec.mode()).unwrap();
    if let Some(seed) = order_seed {
        writeln!(out, "order_seed = {seed}").unwrap();
    }
    String::from_utf8(out).unwrap()
}
