//! Datasets, splits, standardization and the non-learned baseline
//! augmentation.

mod baseline;
mod cifar;
mod synthetic;

pub use baseline::{Baseline, Order};
pub use cifar::{load_cifar10_binary, parse_cifar10, RECORD_BYTES};
pub use synthetic::{make_noise_task, make_rotation_task, make_rotation_task_with_angles, NoiseTask, RotationTask};

use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Input {
    Image(Image),
    Features(Vec<f64>),
}

impl Input {
    /// Shape of the model input for one example: `[C, H, W]` or `[d]`.
    pub fn shape(&self) -> Vec<usize> {
        match self {
            Input::Image(img) => vec![img.channels(), img.height(), img.width()],
            Input::Features(f) => vec![f.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: Input,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<Example>,
    classes: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, classes: usize) -> Result<Self> {
        let first = examples.first().ok_or(Error::Empty("dataset"))?;
        let shape = first.input.shape();
        for (i, ex) in examples.iter().enumerate() {
            if ex.label >= classes {
                return Err(Error::Label {
                    label: ex.label,
                    classes,
                });
            }
            if ex.input.shape() != shape {
                return Err(Error::Contract(format!(
                    "example {i} has shape {:?}, expected {shape:?}",
                    ex.input.shape()
                )));
            }
        }
        Ok(Self { examples, classes })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn get(&self, i: usize) -> &Example {
        &self.examples[i]
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.examples[0].input.shape()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let examples = indices.iter().map(|&i| self.examples[i].clone()).collect();
        Self::new(examples, self.classes)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

/// Seeded shuffle, then the last `round(len·val_fraction)` examples become
/// the validation split.
pub fn split(d: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n_val = (d.len() as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val == d.len() {
        return Err(Error::Config(format!(
            "fraction {val_fraction} of {} examples leaves an empty split",
            d.len()
        )));
    }
    let perm = rng::permutation(&mut rng::stream(seed, &[rng::tag::SPLIT]), d.len());
    let (train, val) = perm.split_at(d.len() - n_val);
    Ok((d.subset(train)?, d.subset(val)?))
}

/// Per-channel affine standardization fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Image data: channel statistics of `pixel / 255`. Feature data is
    /// generated already standardized and gets the identity.
    pub fn fit(d: &Dataset) -> Self {
        match &d.examples[0].input {
            Input::Features(f) => Self::identity(f.len()),
            Input::Image(first) => {
                let c = first.channels();
                let plane = first.height() * first.width();
                let mut sum = vec![0.0; c];
                let mut sq = vec![0.0; c];
                for ex in &d.examples {
                    let Input::Image(img) = &ex.input else { unreachable!() };
                    for (i, v) in img.to_chw().into_iter().enumerate() {
                        sum[i / plane] += v;
                        sq[i / plane] += v * v;
                    }
                }
                let count = (d.len() * plane) as f64;
                let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
                let std = sq
                    .iter()
                    .zip(&mean)
                    .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-8))
                    .collect();
                Self { mean, std }
            }
        }
    }

    fn apply_into(&self, input: &Input, out: &mut Vec<f64>) {
        match input {
            Input::Features(f) => out.extend_from_slice(f),
            Input::Image(img) => {
                let plane = img.height() * img.width();
                out.extend(img.to_chw().into_iter().enumerate().map(|(i, v)| {
                    let c = i / plane;
                    (v - self.mean[c]) / self.std[c]
                }));
            }
        }
    }

    /// Stacks inputs into a `[m, ...]` tensor.
    pub fn batch(&self, inputs: &[&Input]) -> Result<Tensor> {
        let first = inputs.first().ok_or(Error::Empty("batch"))?;
        let mut shape = vec![inputs.len()];
        shape.extend(first.shape());
        let mut data = Vec::with_capacity(shape.iter().product());
        for input in inputs {
            self.apply_into(input, &mut data);
        }
        Tensor::new(shape, data)
    }
}
