use super::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};

pub const PRESETS: [&str; 3] = ["tiny-cnn", "tiny-mlp", "linear-bn"];

/// Builds a named architecture for the given per-example input shape.
///
/// * `tiny-cnn`: two conv(3×3)/BN/ReLU/pool(2) blocks of 8 and 16 channels,
///   then a linear classifier. Needs `[C, H, W]` with `H, W` divisible by 4.
/// * `tiny-mlp`: two hidden layers of 32 units with BN and ReLU.
/// * `linear-bn`: a linear map to the logits followed by batch norm; the
///   smallest model with a BN layer to hang a hyper-layer on.
pub fn preset(name: &str, input: &[usize], classes: usize) -> Result<NetworkSpec> {
    let flat: usize = input.iter().product();
    let layers = match name {
        "tiny-cnn" => {
            let [c, h, w] = *input else {
                return Err(Error::Config(format!(
                    "tiny-cnn needs image input [C, H, W], got {input:?}"
                )));
            };
            let conv = |c_in, c_out| LayerSpec::Conv {
                c_in,
                c_out,
                k: 3,
                stride: 1,
                pad: 1,
                bias: false,
            };
            vec![
                conv(c, 8),
                LayerSpec::BatchNorm { c: 8 },
                LayerSpec::Relu,
                LayerSpec::AvgPool { k: 2 },
                conv(8, 16),
                LayerSpec::BatchNorm { c: 16 },
                LayerSpec::Relu,
                LayerSpec::AvgPool { k: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    input: 16 * (h / 4) * (w / 4),
                    output: classes,
                },
            ]
        }
        "tiny-mlp" => {
            let mut layers = Vec::new();
            if input.len() > 1 {
                layers.push(LayerSpec::Flatten);
            }
            layers.extend([
                LayerSpec::Linear {
                    input: flat,
                    output: 32,
                },
                LayerSpec::BatchNorm { c: 32 },
                LayerSpec::Relu,
                LayerSpec::Linear { input: 32, output: 32 },
                LayerSpec::BatchNorm { c: 32 },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    input: 32,
                    output: classes,
                },
            ]);
            layers
        }
        "linear-bn" => {
            let mut layers = Vec::new();
            if input.len() > 1 {
                layers.push(LayerSpec::Flatten);
            }
            layers.extend([
                LayerSpec::Linear {
                    input: flat,
                    output: classes,
                },
                LayerSpec::BatchNorm { c: classes },
            ]);
            layers
        }
        other => {
            return Err(Error::Config(format!(
                "unknown network preset `{other}`; valid presets: {}",
                PRESETS.join(", ")
            )))
        }
    };
    let spec = NetworkSpec {
        input: input.to_vec(),
        classes,
        layers,
    };
    spec.audit()?;
    Ok(spec)
}
