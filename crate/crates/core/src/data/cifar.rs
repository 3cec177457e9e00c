use std::path::Path;

use super::{Dataset, Example, Input};
use crate::augment::Image;
use crate::error::{Error, Result};

/// One label byte followed by 3×32×32 channel-major pixels.
pub const RECORD_BYTES: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR-10 binary records in file order.
pub fn parse_cifar10(bytes: &[u8], limit: Option<usize>) -> Result<Dataset> {
    let whole = bytes.len() / RECORD_BYTES * RECORD_BYTES;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            message: format!(
                "trailing partial record of {} bytes (records are {RECORD_BYTES} bytes)",
                bytes.len() - whole
            ),
        });
    }
    let take = limit.unwrap_or(usize::MAX);
    let mut examples = Vec::new();
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).take(take).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Format {
                offset: (i * RECORD_BYTES) as u64,
                message: format!("label byte {label} is not a CIFAR-10 class"),
            });
        }
        let img = Image::from_chw(3, 32, 32, &rec[1..])?;
        examples.push(Example {
            input: Input::Image(img),
            label,
        });
    }
    Dataset::new(examples, 10)
}

pub fn load_cifar10_binary(path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_cifar10(&bytes, limit)
}
