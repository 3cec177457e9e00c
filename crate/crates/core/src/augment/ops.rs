use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    AutoContrast,
    Invert,
    Equalize,
    Solarize,
    Posterize,
    Contrast,
    Color,
    Brightness,
    Sharpness,
    Cutout,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::ShearX,
        OpKind::ShearY,
        OpKind::TranslateX,
        OpKind::TranslateY,
        OpKind::Rotate,
        OpKind::AutoContrast,
        OpKind::Invert,
        OpKind::Equalize,
        OpKind::Solarize,
        OpKind::Posterize,
        OpKind::Contrast,
        OpKind::Color,
        OpKind::Brightness,
        OpKind::Sharpness,
        OpKind::Cutout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::ShearX => "ShearX",
            OpKind::ShearY => "ShearY",
            OpKind::TranslateX => "TranslateX",
            OpKind::TranslateY => "TranslateY",
            OpKind::Rotate => "Rotate",
            OpKind::AutoContrast => "AutoContrast",
            OpKind::Invert => "Invert",
            OpKind::Equalize => "Equalize",
            OpKind::Solarize => "Solarize",
            OpKind::Posterize => "Posterize",
            OpKind::Contrast => "Contrast",
            OpKind::Color => "Color",
            OpKind::Brightness => "Brightness",
            OpKind::Sharpness => "Sharpness",
            OpKind::Cutout => "Cutout",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }

    /// `[Mmin, Mmax]`, or `None` for the three magnitude-free ops.
    pub fn range(self) -> Option<(f64, f64)> {
        match self {
            OpKind::ShearX | OpKind::ShearY => Some((0.0, 0.3)),
            OpKind::TranslateX | OpKind::TranslateY => Some((0.0, 0.45)),
            OpKind::Rotate => Some((0.0, 30.0)),
            OpKind::Solarize => Some((0.0, 255.0)),
            OpKind::Posterize => Some((0.0, 8.0)),
            OpKind::Contrast | OpKind::Color | OpKind::Brightness | OpKind::Sharpness => Some((0.1, 1.9)),
            OpKind::Cutout => Some((0.0, 0.2)),
            OpKind::AutoContrast | OpKind::Invert | OpKind::Equalize => None,
        }
    }

    pub fn has_magnitude(self) -> bool {
        self.range().is_some()
    }

    /// Ops whose sampled magnitude is negated with probability one half.
    pub fn is_signed(self) -> bool {
        matches!(
            self,
            OpKind::ShearX | OpKind::ShearY | OpKind::TranslateX | OpKind::TranslateY | OpKind::Rotate
        )
    }

    /// Magnitude at which the op leaves every image unchanged.
    pub fn identity_magnitude(self) -> Option<f64> {
        match self {
            OpKind::ShearX
            | OpKind::ShearY
            | OpKind::TranslateX
            | OpKind::TranslateY
            | OpKind::Rotate
            | OpKind::Cutout
            | OpKind::Solarize => Some(0.0),
            OpKind::Posterize => Some(8.0),
            OpKind::Contrast | OpKind::Color | OpKind::Brightness | OpKind::Sharpness => Some(1.0),
            OpKind::AutoContrast | OpKind::Invert | OpKind::Equalize => None,
        }
    }

    pub fn check_magnitude(self, m: f64) -> Result<()> {
        let (lo, hi) = self.range().ok_or(Error::NoMagnitude(self.name()))?;
        if !(lo..=hi).contains(&m) {
            return Err(Error::Range {
                op: self.name(),
                value: m,
                min: lo,
                max: hi,
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`].
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn decode_prob(logit: f64) -> f64 {
    sigmoid(logit)
}

pub fn encode_prob(p: f64) -> f64 {
    logit(p)
}

pub fn decode_mag(logit: f64, kind: OpKind) -> Result<f64> {
    let (lo, hi) = kind.range().ok_or(Error::NoMagnitude(kind.name()))?;
    Ok(lo + sigmoid(logit) * (hi - lo))
}

pub fn encode_mag(m: f64, kind: OpKind) -> Result<f64> {
    let (lo, hi) = kind.range().ok_or(Error::NoMagnitude(kind.name()))?;
    Ok(logit((m - lo) / (hi - lo)))
}

/// Initial decoded value for a hyperparameter with range `[lo, hi]`.
pub fn initial_value(lo: f64, hi: f64) -> f64 {
    0.95 * lo + 0.05 * hi
}
