use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        c_in: usize,
        c_out: usize,
        k: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default)]
        bias: bool,
    },
    BatchNorm {
        c: usize,
    },
    Relu,
    AvgPool {
        k: usize,
    },
    Flatten,
    Linear {
        input: usize,
        output: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Linear,
    Stateless,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv { .. } => LayerKind::Conv,
            LayerSpec::BatchNorm { .. } => LayerKind::BatchNorm,
            LayerSpec::Linear { .. } => LayerKind::Linear,
            _ => LayerKind::Stateless,
        }
    }

    /// Per-example output shape, or a message explaining the mismatch.
    fn out_shape(&self, s: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv {
                c_in,
                c_out,
                k,
                stride,
                pad,
                ..
            } => {
                let [c, h, w] = *s else {
                    return Err(format!("conv expects [C, H, W] input, got {s:?}"));
                };
                if c != c_in {
                    return Err(format!("conv expects {c_in} input channels, got {c}"));
                }
                if stride == 0 || k == 0 || c_out == 0 {
                    return Err("conv needs positive stride, kernel and channels".into());
                }
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                if k > ph || k > pw || (ph - k) % stride != 0 || (pw - k) % stride != 0 {
                    return Err(format!("conv k={k} stride={stride} pad={pad} does not tile {h}x{w}"));
                }
                Ok(vec![c_out, (ph - k) / stride + 1, (pw - k) / stride + 1])
            }
            LayerSpec::BatchNorm { c } => match s.first() {
                Some(&got) if got == c && (s.len() == 1 || s.len() == 3) => Ok(s.to_vec()),
                _ => Err(format!("batch norm over {c} channels got {s:?}")),
            },
            LayerSpec::Relu => Ok(s.to_vec()),
            LayerSpec::AvgPool { k } => {
                let [c, h, w] = *s else {
                    return Err(format!("pool expects [C, H, W] input, got {s:?}"));
                };
                if k == 0 || h % k != 0 || w % k != 0 {
                    return Err(format!("pool window {k} does not tile {h}x{w}"));
                }
                Ok(vec![c, h / k, w / k])
            }
            LayerSpec::Flatten => Ok(vec![s.iter().product()]),
            LayerSpec::Linear { input, output } => {
                if s != [input] {
                    return Err(format!("linear expects [{input}] input, got {s:?}"));
                }
                if output == 0 {
                    return Err("linear needs a positive output width".into());
                }
                Ok(vec![output])
            }
        }
    }
}

/// A feed-forward model as an ordered layer list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Per-example input shape: `[C, H, W]` or `[d]`.
    pub input: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Checks that consecutive shapes compose and returns every layer's
    /// per-example output shape.
    pub fn audit(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::Empty("network"));
        }
        let mut shape = self.input.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            shape = layer
                .out_shape(&shape)
                .map_err(|message| Error::Layer { index, message })?;
            shapes.push(shape.clone());
        }
        if shape != [self.classes] {
            return Err(Error::Layer {
                index: self.layers.len() - 1,
                message: format!("network ends in {shape:?}, expected [{}] logits", self.classes),
            });
        }
        Ok(shapes)
    }

    pub fn first_index(&self, kind: LayerKind) -> Option<usize> {
        self.layers.iter().position(|l| l.kind() == kind)
    }

    pub fn has(&self, kind: LayerKind) -> bool {
        self.first_index(kind).is_some()
    }
}
