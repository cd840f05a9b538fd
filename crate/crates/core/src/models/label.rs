use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The ten architectures compared in the study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelLabel {
    #[serde(rename = "R2UC")]
    R2uc,
    #[serde(rename = "R2U")]
    R2u,
    #[serde(rename = "UR50")]
    Ur50,
    #[serde(rename = "UNET")]
    Unet,
    #[serde(rename = "UAG")]
    Uag,
    #[serde(rename = "UC")]
    Uc,
    #[serde(rename = "UCG")]
    Ucg,
    #[serde(rename = "UPCG")]
    Upcg,
    #[serde(rename = "MCGU")]
    Mcgu,
    #[serde(rename = "DU")]
    Du,
}

impl ModelLabel {
    pub const ALL: [ModelLabel; 10] = [
        ModelLabel::R2uc,
        ModelLabel::R2u,
        ModelLabel::Ur50,
        ModelLabel::Unet,
        ModelLabel::Uag,
        ModelLabel::Uc,
        ModelLabel::Ucg,
        ModelLabel::Upcg,
        ModelLabel::Mcgu,
        ModelLabel::Du,
    ];

    /// Short identifier used in file names and on the command line.
    pub fn name(self) -> &'static str {
        match self {
            ModelLabel::R2uc => "R2UC",
            ModelLabel::R2u => "R2U",
            ModelLabel::Ur50 => "UR50",
            ModelLabel::Unet => "UNET",
            ModelLabel::Uag => "UAG",
            ModelLabel::Uc => "UC",
            ModelLabel::Ucg => "UCG",
            ModelLabel::Upcg => "UPCG",
            ModelLabel::Mcgu => "MCGU",
            ModelLabel::Du => "DU",
        }
    }

    /// Label as printed in result tables.
    pub fn table_name(self) -> &'static str {
        match self {
            ModelLabel::Unet => "U-Net",
            other => other.name(),
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ModelLabel::R2uc => "r2unet cbam",
            ModelLabel::R2u => "r2unet",
            ModelLabel::Ur50 => "unet res50",
            ModelLabel::Unet => "unet conv deconv",
            ModelLabel::Uag => "unet attention gate",
            ModelLabel::Uc => "unet cbam",
            ModelLabel::Ucg => "unet cbam gate",
            ModelLabel::Upcg => "unet pyramid cbam gate",
            ModelLabel::Mcgu => "mcg unet",
            ModelLabel::Du => "double unet",
        }
    }

    /// Reference parameter count in millions.
    pub fn reference_params_m(self) -> f64 {
        match self {
            ModelLabel::R2uc => 25.4,
            ModelLabel::R2u => 96.1,
            ModelLabel::Ur50 => 20.7,
            ModelLabel::Unet => 7.7,
            ModelLabel::Uag => 0.8,
            ModelLabel::Uc => 7.7,
            ModelLabel::Ucg => 0.9,
            ModelLabel::Upcg => 4.4,
            ModelLabel::Mcgu => 1.7,
            ModelLabel::Du => 29.3,
        }
    }

    /// Allowed relative deviation from the reference count.
    pub fn param_tolerance(self) -> f64 {
        match self {
            ModelLabel::Unet | ModelLabel::Ur50 | ModelLabel::R2u | ModelLabel::R2uc | ModelLabel::Du => 0.10,
            _ => 0.50,
        }
    }
}

impl fmt::Display for ModelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_uppercase();
        ModelLabel::ALL
            .into_iter()
            .find(|l| l.name() == key)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}
