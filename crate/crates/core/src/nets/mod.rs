//! Architecture builders: the standard 18-layer residual feature extractor,
//! its color-only (pointwise) and shape-only (grayscale) variants, the
//! two-branch late-fusion network and the multi-head task container.

mod builders;
mod model;
pub mod spec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use builders::{
    build_color_fe, build_ds_network, build_h_network, build_multihead, build_resnet18_fe, build_shape_fe, Fusion,
    HeadKind, MultiHeadSpec,
};
pub use model::{BnUpdate, ForwardOut, Mode, Model, ParamGroup, Trainable, BN_EPS, BN_MOMENTUM};
pub use spec::{count_params, FeatShape, LayerKind, LayerSpec, NetworkSpec, Role, Src};

/// ITU-R BT.601 luma weights.
pub const LUMA_BT601: [f64; 3] = [0.299, 0.587, 0.114];

/// Total downsampling factor of the residual stride plan.
pub const STRIDE_PLAN: usize = 32;

pub const BASE_WIDTHS: [usize; 4] = [64, 128, 256, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    /// Standard single-branch network with per-task linear heads.
    Resnet18,
    /// Standard feature extractor with the two-branch network's task heads.
    Resnet18h,
    /// Pointwise (1×1) branch only.
    Color,
    /// Grayscale branch only.
    Shape,
    /// Color ∥ shape branches fused by channel concatenation.
    Ds,
}

impl ArchKind {
    pub const ALL: [ArchKind; 5] = [
        ArchKind::Resnet18,
        ArchKind::Resnet18h,
        ArchKind::Color,
        ArchKind::Shape,
        ArchKind::Ds,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::Resnet18 => "resnet18",
            ArchKind::Resnet18h => "resnet18h",
            ArchKind::Color => "color",
            ArchKind::Shape => "shape",
            ArchKind::Ds => "ds",
        }
    }
}

impl std::str::FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchKind::ALL
            .into_iter()
            .find(|a| a.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Pixels per image side.
    pub input_size: usize,
    /// Scales every channel count of the residual stages.
    pub width_mult: f64,
    /// Output width of the 1×1 conv in the fused-feature task heads.
    pub head_channels: usize,
    /// Drop every strided or windowed op from the color branch so it is
    /// exactly per-pixel; spatial reduction then happens by block averaging
    /// after the last residual stage.
    pub strict_color: bool,
    pub grayscale_coeffs: [f64; 3],
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_size: 32,
            width_mult: 1.0,
            head_channels: 512,
            strict_color: false,
            grayscale_coeffs: LUMA_BT601,
        }
    }
}

impl ArchConfig {
    pub fn new(input_size: usize, width_mult: f64) -> Self {
        ArchConfig {
            input_size,
            width_mult,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) {
            return Err(Error::Config(format!(
                "width_mult must be positive, got {}",
                self.width_mult
            )));
        }
        if BASE_WIDTHS.iter().any(|&w| (w as f64 * self.width_mult).round() < 1.0) {
            return Err(Error::Config(format!(
                "width_mult {} rounds a stage to zero channels",
                self.width_mult
            )));
        }
        if self.head_channels == 0 {
            return Err(Error::Config("head_channels must be positive".into()));
        }
        if self.input_size < STRIDE_PLAN {
            return Err(Error::Config(format!(
                "input_size {} is smaller than the stride plan ({STRIDE_PLAN})",
                self.input_size
            )));
        }
        if self.strict_color && !self.input_size.is_multiple_of(STRIDE_PLAN) {
            return Err(Error::Config(format!(
                "strict color mode needs input_size divisible by {STRIDE_PLAN}"
            )));
        }
        let c = self.grayscale_coeffs;
        if c.iter().any(|&v| !(v >= 0.0)) || (c.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "grayscale coefficients {c:?} must be nonnegative and sum to 1"
            )));
        }
        Ok(())
    }

    /// Channel counts of the four residual stages.
    pub fn widths(&self) -> [usize; 4] {
        BASE_WIDTHS.map(|w| ((w as f64 * self.width_mult).round() as usize).max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ArchConfig::default().validate().is_ok());
        assert!(ArchConfig::new(16, 1.0).validate().is_err());
        assert!(ArchConfig::new(32, 0.001).validate().is_err());
        assert!(ArchConfig {
            grayscale_coeffs: [0.5, 0.5, 0.5],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ArchConfig {
            strict_color: true,
            input_size: 40,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(ArchConfig::new(32, 0.25).widths(), [16, 32, 64, 128]);
    }

    #[test]
    fn arch_names_roundtrip() {
        for a in ArchKind::ALL {
            assert_eq!(a.as_str().parse::<ArchKind>().unwrap(), a);
        }
        assert!("vgg".parse::<ArchKind>().is_err());
    }
}
