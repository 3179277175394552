//! Listener profiles: hearing aid (direct path plus early reflections kept)
//! and cochlear implant (direct path only).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scenario {
    #[default]
    #[serde(alias = "ha")]
    Ha,
    #[serde(alias = "ci")]
    Ci,
}

impl Scenario {
    /// Prediction delay in frames coupled to the profile.
    pub fn delay(self) -> usize {
        match self {
            Scenario::Ha => 5,
            Scenario::Ci => 3,
        }
    }

    /// Whether the target keeps the early reflections.
    pub fn keeps_early(self) -> bool {
        matches!(self, Scenario::Ha)
    }

    /// The early-to-late ratio is only defined against a direct+early target.
    pub fn reports_elr(self) -> bool {
        self.keeps_early()
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Ha => "HA",
            Scenario::Ci => "CI",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "HA" => Ok(Scenario::Ha),
            "CI" => Ok(Scenario::Ci),
            other => Err(Error::InvalidConfig(format!("unknown scenario {other:?}"))),
        }
    }
}
