use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{kernels, Image};

/// Where the learned policy sits relative to flip/pad-crop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    /// policy, then flip/pad-crop, then cutout
    #[default]
    PolicyFirst,
    /// flip/pad-crop, then policy, then cutout
    BaselineFirst,
}

/// Non-learned augmentation applied to training images around the policy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Baseline {
    pub flip: bool,
    /// Pad-and-crop margin in pixels; 0 disables.
    pub pad: usize,
    /// Cutout side in pixels; 0 disables.
    pub cutout: usize,
    pub order: Order,
}

impl Baseline {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.pad == 0 && self.cutout == 0
    }

    pub fn flip_crop<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Image {
        let mut out = img.clone();
        if self.flip && rng.random::<bool>() {
            out = kernels::flip_horizontal(&out);
        }
        if self.pad > 0 {
            let dy = rng.random_range(0..=2 * self.pad);
            let dx = rng.random_range(0..=2 * self.pad);
            out = kernels::pad_crop(&out, self.pad, dy, dx);
        }
        out
    }

    pub fn cutout<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Image {
        if self.cutout == 0 {
            return img.clone();
        }
        let cy = rng.random_range(0..img.height());
        let cx = rng.random_range(0..img.width());
        kernels::cutout(img, self.cutout, cy, cx)
    }
}
