use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial attention layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SaVariant {
    /// Single-pathway gates on all four skip connections.
    #[serde(rename = "s-AG")]
    SingleGate,
    /// Dual-pathway gates on all four skip connections.
    #[serde(rename = "t-AG")]
    DualGate,
    /// Non-local block at the bottleneck only.
    #[serde(rename = "n-Local")]
    NonLocal,
    /// Non-local bottleneck plus dual-pathway gates on the three deeper skips.
    #[serde(rename = "Js-A")]
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaPlacement {
    Enc,
    Dec,
    EncDec,
}

impl CaPlacement {
    pub fn encoder(self) -> bool {
        matches!(self, CaPlacement::Enc | CaPlacement::EncDec)
    }

    pub fn decoder(self) -> bool {
        matches!(self, CaPlacement::Dec | CaPlacement::EncDec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub enable_sa: bool,
    pub enable_ca: bool,
    pub enable_la: bool,
    pub sa_variant: SaVariant,
    pub ca_placement: CaPlacement,
    /// Decoder scales fused by scale attention, finest first; 5 adds the bottleneck.
    pub la_scales: usize,
    /// Emit one pixel-wise scale map shared by all scales instead of one per scale.
    pub single_gamma_star: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 2,
            base_channels: 16,
            enable_sa: true,
            enable_ca: true,
            enable_la: true,
            sa_variant: SaVariant::Joint,
            ca_placement: CaPlacement::Dec,
            la_scales: 4,
            single_gamma_star: false,
        }
    }
}

impl ModelConfig {
    /// Plain U-Net: every attention block disabled.
    pub fn baseline() -> Self {
        ModelConfig {
            enable_sa: false,
            enable_ca: false,
            enable_la: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be positive"));
        }
        if !(2..=256).contains(&self.num_classes) {
            return Err(Error::config(format!(
                "num_classes must be between 2 (background included) and 256, got {}",
                self.num_classes
            )));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::config(format!(
                "base_channels must be a positive even number, got {}",
                self.base_channels
            )));
        }
        if self.enable_la && !(2..=5).contains(&self.la_scales) {
            return Err(Error::config(format!(
                "la_scales must be between 2 and 5, got {}",
                self.la_scales
            )));
        }
        Ok(())
    }

    /// Channel width at encoder level `l` (1-based).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Whether the skip at `level` passes through an attention gate.
    pub fn gated(&self, level: usize) -> bool {
        self.enable_sa
            && match self.sa_variant {
                SaVariant::SingleGate | SaVariant::DualGate => (1..=4).contains(&level),
                SaVariant::Joint => (2..=4).contains(&level),
                SaVariant::NonLocal => false,
            }
    }

    pub fn nonlocal(&self) -> bool {
        self.enable_sa && matches!(self.sa_variant, SaVariant::NonLocal | SaVariant::Joint)
    }

    pub fn gate_pathways(&self) -> usize {
        if self.sa_variant == SaVariant::SingleGate {
            1
        } else {
            2
        }
    }
}
