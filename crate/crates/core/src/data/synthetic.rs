//! Generated tasks with a known-useful augmentation. Nothing is stored;
//! everything is a function of the seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example, Input};
use crate::augment::Image;
use crate::error::Result;
use crate::rng::{self, StreamRng};

/// Glyph images whose validation split is rotated and whose training split
/// is not, so rotation augmentation closes the gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotationTask {
    pub n_train: usize,
    pub n_val: usize,
    pub size: usize,
    /// Validation angles are uniform on `[-max_angle, max_angle]` degrees.
    pub max_angle: f64,
    /// Std of the additive pixel noise.
    pub pixel_noise: f64,
    /// Max glyph center offset in pixels.
    pub jitter: f64,
}

impl Default for RotationTask {
    fn default() -> Self {
        Self {
            n_train: 256,
            n_val: 256,
            size: 16,
            max_angle: 30.0,
            pixel_noise: 12.0,
            jitter: 1.5,
        }
    }
}

/// Class 0: horizontal bar, 1: vertical bar, 2: plus, 3: hollow box.
pub const GLYPHS: usize = 4;

struct GlyphParams {
    class: usize,
    half_len: f64,
    half_thick: f64,
    dx: f64,
    dy: f64,
    angle: f64,
    intensity: f64,
}

fn inside(p: &GlyphParams, x: f64, y: f64) -> bool {
    let hbar = |x: f64, y: f64| x.abs() <= p.half_len && y.abs() <= p.half_thick;
    match p.class {
        0 => hbar(x, y),
        1 => hbar(y, x),
        2 => hbar(x, y) || hbar(y, x),
        _ => {
            let outer = x.abs().max(y.abs());
            let r = p.half_len * 0.8;
            outer <= r && outer >= r - 2.0 * p.half_thick
        }
    }
}

/// Antialiased by 4×4 supersampling.
fn render(p: &GlyphParams, size: usize, noise: f64, rng: &mut StreamRng) -> Image {
    let c = (size as f64 - 1.0) / 2.0;
    let (s, co) = p.angle.to_radians().sin_cos();
    let mut data = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let x = px as f64 + (sx as f64 + 0.5) / 4.0 - 0.5 - c - p.dx;
                    let y = py as f64 + (sy as f64 + 0.5) / 4.0 - 0.5 - c - p.dy;
                    // rotate the sample point back into the glyph frame
                    let (gx, gy) = (co * x + s * y, -s * x + co * y);
                    if inside(p, gx, gy) {
                        hits += 1;
                    }
                }
            }
            let v = 20.0 + p.intensity * f64::from(hits) / 16.0 + rng::normal(rng, 0.0, noise);
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Image::new(size, size, 1, data).expect("square single-channel image")
}

impl RotationTask {
    fn sample(&self, rng: &mut StreamRng, angle: f64) -> Example {
        let class = rng.random_range(0..GLYPHS);
        let scale = self.size as f64 / 16.0;
        let p = GlyphParams {
            class,
            half_len: scale * rng.random_range(4.5..6.5),
            half_thick: scale * rng.random_range(0.9..1.6),
            dx: rng.random_range(-self.jitter..=self.jitter),
            dy: rng.random_range(-self.jitter..=self.jitter),
            angle,
            intensity: rng.random_range(150.0..220.0),
        };
        Example {
            input: Input::Image(render(&p, self.size, self.pixel_noise, rng)),
            label: class,
        }
    }

    /// Returns the splits and the validation rotation angles.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset, Vec<f64>)> {
        let mut rng = rng::stream(seed, &[rng::tag::DATA, 0]);
        let train = (0..self.n_train).map(|_| self.sample(&mut rng, 0.0)).collect();
        let mut rng = rng::stream(seed, &[rng::tag::DATA, 1]);
        let mut angles = Vec::with_capacity(self.n_val);
        let mut val = Vec::with_capacity(self.n_val);
        for _ in 0..self.n_val {
            let a = rng.random_range(-self.max_angle..=self.max_angle);
            angles.push(a);
            val.push(self.sample(&mut rng, a));
        }
        Ok((Dataset::new(train, GLYPHS)?, Dataset::new(val, GLYPHS)?, angles))
    }
}

pub fn make_rotation_task(n_train: usize, n_val: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let (t, v, _) = make_rotation_task_with_angles(n_train, n_val, seed)?;
    Ok((t, v))
}

pub fn make_rotation_task_with_angles(n_train: usize, n_val: usize, seed: u64) -> Result<(Dataset, Dataset, Vec<f64>)> {
    RotationTask {
        n_train,
        n_val,
        ..RotationTask::default()
    }
    .generate(seed)
}

/// Binary classification on `x ~ N(0, I_d)` with noisy labels
/// `y = [w*·x + ν > 0]`. Validation inputs are observed through additive
/// noise of std `val_noise` while training inputs are clean, so training
/// with matching input noise calibrates the classifier and the validation
/// loss has an interior optimum in the noise scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseTask {
    pub dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Std of the label noise ν, relative to `|w*| = 1`.
    pub label_noise: f64,
    /// Std of the input noise on validation examples.
    pub val_noise: f64,
}

impl Default for NoiseTask {
    fn default() -> Self {
        Self {
            dim: 4,
            n_train: 1024,
            n_val: 2000,
            label_noise: 0.1,
            val_noise: 0.6,
        }
    }
}

impl NoiseTask {
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let mut rng = rng::stream(seed, &[rng::tag::DATA]);
        let mut w: Vec<f64> = (0..self.dim).map(|_| rng::standard_normal(&mut rng)).collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        w.iter_mut().for_each(|v| *v /= norm);
        let mut draw = |n: usize, obs: f64| -> Vec<Example> {
            (0..n)
                .map(|_| {
                    let x: Vec<f64> = (0..self.dim).map(|_| rng::standard_normal(&mut rng)).collect();
                    let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
                        + self.label_noise * rng::standard_normal(&mut rng);
                    let seen = x.iter().map(|v| v + obs * rng::standard_normal(&mut rng)).collect();
                    Example {
                        input: Input::Features(seen),
                        label: usize::from(z > 0.0),
                    }
                })
                .collect()
        };
        let train = draw(self.n_train, 0.0);
        let val = draw(self.n_val, self.val_noise);
        Ok((Dataset::new(train, 2)?, Dataset::new(val, 2)?))
    }
}

/// Noise task with `n` training examples and the default remaining knobs.
pub fn make_noise_task(n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    NoiseTask {
        n_train: n,
        ..NoiseTask::default()
    }
    .generate(seed)
}
