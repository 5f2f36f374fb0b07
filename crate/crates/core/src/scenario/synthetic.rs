//! Deterministic synthetic segmentation data: coloured, textured shapes on a
//! noisy grey background.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClassId, SampleId, SegSample};
use crate::error::{Error, Result};

pub const NUM_CHANNELS: usize = 3;

const MIN_TRAIN_IMAGES: usize = 5;
const MIN_VAL_IMAGES: usize = 2;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Square,
    Disc,
    Diamond,
    Cross,
    Ring,
    Triangle,
}

const SHAPES: [Shape; 6] = [
    Shape::Square,
    Shape::Disc,
    Shape::Diamond,
    Shape::Cross,
    Shape::Ring,
    Shape::Triangle,
];

impl Shape {
    fn contains(self, dy: f32, dx: f32, r: f32) -> bool {
        match self {
            Shape::Square => dy.abs() <= r && dx.abs() <= r,
            Shape::Disc => dy * dy + dx * dx <= r * r,
            Shape::Diamond => dy.abs() + dx.abs() <= r,
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            Shape::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 > 0.25 * r * r
            }
            Shape::Triangle => dy.abs() <= r && dx.abs() <= 0.5 * (dy + r),
        }
    }
}

/// Visual identity of one class: shape, colour and texture.
struct ClassStyle {
    shape: Shape,
    rgb: [f32; 3],
    texture: u8,
}

impl ClassStyle {
    fn new(class: usize, num_classes: usize) -> Self {
        let k = class - 1;
        let hue = k as f32 / num_classes as f32;
        ClassStyle {
            shape: SHAPES[k % SHAPES.len()],
            rgb: hsv_to_rgb(hue, 0.85, 0.9),
            texture: ((k / SHAPES.len()) % 3) as u8,
        }
    }

    fn modulation(&self, y: usize, x: usize) -> f32 {
        match self.texture {
            0 => 0.0,
            1 => if (y / 2) % 2 == 0 { 0.12 } else { -0.12 },
            _ => if (y / 2 + x / 2) % 2 == 0 { 0.12 } else { -0.12 },
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).min(5.999_999);
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render(
    rng: &mut ChaCha8Rng,
    styles: &[ClassStyle],
    guaranteed: usize,
    height: usize,
    width: usize,
    id: u32,
) -> SegSample {
    let mut image = Array3::<f32>::zeros((NUM_CHANNELS, height, width));
    let mut mask = Array2::<u8>::zeros((height, width));

    let base: f32 = rng.gen_range(0.25..0.55);
    for y in 0..height {
        for x in 0..width {
            for c in 0..NUM_CHANNELS {
                image[[c, y, x]] = base + rng.gen_range(-0.15f32..0.15);
            }
        }
    }

    let extra = rng.gen_range(0..=3usize);
    let mut classes: Vec<usize> = (0..extra).map(|_| rng.gen_range(1..=styles.len())).collect();
    // drawn last so it is never occluded
    classes.push(guaranteed);

    let r_max = (height.min(width) / 4).max(5);
    for class in classes {
        let style = &styles[class - 1];
        let r = rng.gen_range(4..=r_max);
        let cy = rng.gen_range(r..height - r) as f32;
        let cx = rng.gen_range(r..width - r) as f32;
        let rf = r as f32;
        for y in 0..height {
            for x in 0..width {
                if !style.shape.contains(y as f32 - cy, x as f32 - cx, rf) {
                    continue;
                }
                mask[[y, x]] = class as u8;
                let m = 1.0 + style.modulation(y, x);
                for c in 0..NUM_CHANNELS {
                    image[[c, y, x]] = style.rgb[c] * m + rng.gen_range(-0.06f32..0.06);
                }
            }
        }
    }

    SegSample {
        image,
        mask,
        sample_id: SampleId(id),
    }
}

fn split(
    rng: &mut ChaCha8Rng,
    styles: &[ClassStyle],
    count: usize,
    height: usize,
    width: usize,
) -> Vec<SegSample> {
    let num_classes = styles.len();
    (0..count)
        .map(|i| render(rng, styles, i % num_classes + 1, height, width, i as u32))
        .collect()
}

fn check_coverage(samples: &[SegSample], num_classes: usize, min: usize, split: &str) -> Result<()> {
    for class in 1..=num_classes {
        let n = samples.iter().filter(|s| s.contains(ClassId(class as u8))).count();
        if n < min {
            return Err(Error::Coverage(format!(
                "class {class} appears in {n} {split} images, need {min}"
            )));
        }
    }
    Ok(())
}

/// Generates `(train, val)` splits. Each class is a distinct shape, colour
/// and texture; every image holds one to four instances on a noisy
/// background labelled `0`. Every class appears in at least five training
/// and two validation images.
pub fn generate_synthetic_dataset(
    seed: u64,
    num_classes: usize,
    num_train: usize,
    num_val: usize,
    height: usize,
    width: usize,
) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    if height < 16 || width < 16 {
        return Err(Error::Coverage(format!(
            "images must be at least 16x16, got {height}x{width}"
        )));
    }
    if !(2..=254).contains(&num_classes) {
        return Err(Error::Coverage(format!(
            "num_classes must be in 2..=254, got {num_classes}"
        )));
    }
    if num_train < MIN_TRAIN_IMAGES * num_classes || num_val < MIN_VAL_IMAGES * num_classes {
        return Err(Error::Coverage(format!(
            "{num_classes} classes need at least {} train and {} val images, got {num_train} and {num_val}",
            MIN_TRAIN_IMAGES * num_classes,
            MIN_VAL_IMAGES * num_classes
        )));
    }

    let styles: Vec<ClassStyle> = (1..=num_classes)
        .map(|c| ClassStyle::new(c, num_classes))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let train = split(&mut rng, &styles, num_train, height, width);
    rng.set_stream(1);
    rng.set_word_pos(0);
    let val = split(&mut rng, &styles, num_val, height, width);

    check_coverage(&train, num_classes, MIN_TRAIN_IMAGES, "train")?;
    check_coverage(&val, num_classes, MIN_VAL_IMAGES, "val")?;
    Ok((train, val))
}
