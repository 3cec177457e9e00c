use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit image, interleaved `HWC`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Contract("image extents must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Contract(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape("image", &[height, width, channels], &[data.len()]));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from channel-major planes.
    pub fn from_chw(channels: usize, height: usize, width: usize, chw: &[u8]) -> Result<Self> {
        if chw.len() != channels * height * width {
            return Err(Error::shape("image", &[channels, height, width], &[chw.len()]));
        }
        let mut data = vec![0; chw.len()];
        for c in 0..channels {
            for i in 0..height * width {
                data[i * channels + c] = chw[c * height * width + i];
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel-major reals in `[0, 1]`.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for (i, &v) in self.data.iter().enumerate() {
            let (p, c) = (i / self.channels, i % self.channels);
            out[c * plane + p] = f64::from(v) / 255.0;
        }
        out
    }
}

/// Rounds to nearest and clamps into the pixel range.
pub(crate) fn to_pixel(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}
