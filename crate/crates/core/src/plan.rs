use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation bit-width allocated to a patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BitCode(pub u8);

impl BitCode {
    /// Quantization bypass; the network runs in full precision.
    pub const FULL: BitCode = BitCode(32);

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn is_full_precision(self) -> bool {
        self.0 == 32
    }
}

impl fmt::Display for BitCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u8> for BitCode {
    fn from(b: u8) -> Self {
        BitCode(b)
    }
}

/// Parse a comma separated list such as `4,6,8`.
pub fn parse_bit_list(s: &str) -> Result<Vec<BitCode>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u8>()
                .map(BitCode)
                .map_err(|_| Error::contract(format!("bad bit-width {p:?} in {s:?}")))
        })
        .collect()
}

impl FromStr for BitCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .parse::<u8>()
            .map(BitCode)
            .map_err(|_| Error::contract(format!("bad bit-width {s:?}")))
    }
}

/// Per-patch allocation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub id: usize,
    /// (row, col) of the patch in the LR image.
    pub origin: (usize, usize),
    /// Luma entropy in nats.
    pub entropy: f64,
    pub gbc_bit: BitCode,
    pub final_bit: BitCode,
    /// Gating score of the chosen candidate.
    pub p: f64,
    /// Index of the chosen candidate.
    pub theta: usize,
}

impl PatchPlan {
    /// A plan whose bit was fixed without consulting the controller.
    pub fn forced(id: usize, origin: (usize, usize), entropy: f64, bit: BitCode) -> Self {
        PatchPlan {
            id,
            origin,
            entropy,
            gbc_bit: bit,
            final_bit: bit,
            p: 1.0,
            theta: 0,
        }
    }
}
