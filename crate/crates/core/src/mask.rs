use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Whether a face is covered by a mask.
///
/// Images always carry `Masked` or `Unmasked`; `Unknown` only appears on
/// embeddings whose origin was not recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStatus {
    Masked,
    Unmasked,
    Unknown,
}

impl MaskStatus {
    /// Byte tag used by the binary embedding file.
    pub fn to_byte(self) -> u8 {
        match self {
            MaskStatus::Unknown => 0,
            MaskStatus::Masked => 1,
            MaskStatus::Unmasked => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(MaskStatus::Unknown),
            1 => Some(MaskStatus::Masked),
            2 => Some(MaskStatus::Unmasked),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskStatus::Masked => "masked",
            MaskStatus::Unmasked => "unmasked",
            MaskStatus::Unknown => "unknown",
        }
    }
}

impl fmt::Display for MaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "masked" | "with_mask" => Ok(MaskStatus::Masked),
            "unmasked" | "without_mask" => Ok(MaskStatus::Unmasked),
            "unknown" => Ok(MaskStatus::Unknown),
            other => Err(format!("unknown mask status '{other}'")),
        }
    }
}
