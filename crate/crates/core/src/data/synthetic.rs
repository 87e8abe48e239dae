use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageSample, ImageShape};
use crate::error::{Result, RgfsError};
use crate::rng::{derive_rng, stream};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub shape: ImageShape,
    pub seed: u64,
}

/// The three procedural factors that define a class.
#[derive(Debug, Clone, Copy)]
struct ClassTexture {
    hue: f64,
    stripe_angle: f64,
    blob_cycles: f64,
}

const NOISE_STD: f64 = 0.05;

/// Each factor takes one of `levels` values and every class is a distinct
/// combination, so classes share hues, orientations and blob sizes with
/// each other and only the joint pattern identifies them.
fn class_textures(seed: u64, num_classes: usize) -> Vec<ClassTexture> {
    let levels = (3..).find(|l: &usize| l.pow(3) >= num_classes).unwrap();
    let mut rng = derive_rng(seed, stream::SYNTH, &[u64::MAX]);
    let mut combos: Vec<usize> = (0..levels.pow(3)).collect();
    combos.shuffle(&mut rng);
    let hue0 = rng.random_range(0.0..1.0);
    let l = levels as f64;
    combos[..num_classes]
        .iter()
        .map(|&c| {
            let (a, b, h) = (c % levels, (c / levels) % levels, c / (levels * levels));
            ClassTexture {
                hue: hue0 + h as f64 / l,
                stripe_angle: a as f64 * PI / l,
                blob_cycles: 1.0 + b as f64 * 3.0 / (l - 1.0),
            }
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render(tex: &ClassTexture, shape: ImageShape, rng: &mut impl Rng) -> Tensor3 {
    let (h, w) = (shape.height, shape.width);
    let hue = tex.hue + rng.random_range(-0.04..0.04);
    let angle = tex.stripe_angle + rng.random_range(-0.15..0.15);
    let cycles = rng.random_range(3.0..5.0);
    let blob_cycles = tex.blob_cycles * rng.random_range(0.9..1.1);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (shift_x, shift_y) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
    let sat = rng.random_range(0.5..0.7);
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let (ca, sa) = (angle.cos(), angle.sin());

    let mut t = Tensor3::zeros(shape.channels, h, w);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64 / w as f64, y as f64 / h as f64);
            let stripe = 0.5 + 0.5 * (2.0 * PI * cycles * (xf * ca + yf * sa) + phase).sin();
            let bx = (2.0 * PI * blob_cycles * (x as f64 + shift_x) / w as f64).sin();
            let by = (2.0 * PI * blob_cycles * (y as f64 + shift_y) / h as f64).sin();
            let blob = 0.5 + 0.5 * bx * by;
            let value = 0.3 + 0.35 * stripe + 0.3 * blob;
            if shape.channels == 3 {
                let rgb = hsv_to_rgb(hue, sat, value);
                for (c, v) in rgb.iter().enumerate() {
                    t.set(c, y, x, (v + noise.sample(rng)).clamp(0.0, 1.0));
                }
            } else {
                t.set(0, y, x, (value * (0.6 + 0.4 * hue) + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
    }
    t
}

/// Procedural dataset: each class is a texture family (hue, stripe
/// orientation, blob frequency); samples add factor jitter, random stripe
/// frequency, phase/shift and pixel noise. Bit-identical for a given seed.
pub fn generate_synthetic_dataset(params: &SyntheticParams) -> Result<Dataset> {
    let SyntheticParams {
        num_classes,
        samples_per_class,
        shape,
        seed,
    } = *params;
    if num_classes < 2 {
        return Err(RgfsError::Config(format!(
            "num_classes must be at least 2, got {num_classes}"
        )));
    }
    if samples_per_class < 2 {
        return Err(RgfsError::Config(format!(
            "samples_per_class must be at least 2, got {samples_per_class}"
        )));
    }
    if shape.height < 16 || shape.width < 16 {
        return Err(RgfsError::Config(format!(
            "synthetic images must be at least 16x16, got {}x{}",
            shape.height, shape.width
        )));
    }
    if shape.channels != 1 && shape.channels != 3 {
        return Err(RgfsError::Config(format!(
            "synthetic images need 1 or 3 channels, got {}",
            shape.channels
        )));
    }

    let mut samples = Vec::with_capacity(num_classes * samples_per_class);
    for (class, tex) in class_textures(seed, num_classes).iter().enumerate() {
        for i in 0..samples_per_class {
            let mut rng = derive_rng(seed, stream::SYNTH, &[class as u64, i as u64]);
            samples.push(ImageSample {
                pixels: render(tex, shape, &mut rng),
                class_id: class,
                source_id: format!("synthetic/class_{class:02}/{i:05}"),
            });
        }
    }
    let names = (0..num_classes).map(|c| format!("class_{c:02}")).collect();
    Dataset::from_samples(shape, names, samples)
}
