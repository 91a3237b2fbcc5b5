use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The three training protocols compared by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// SplitFed: clients wait for cut-layer gradients from the server.
    Sfl,
    /// Clients update from a local loss at the cut layer.
    LocSplitFed,
    /// Three-way split with local aggregators.
    Csfl,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Sfl, Scheme::LocSplitFed, Scheme::Csfl];

    /// Lowercase name used in file names and on the command line.
    pub fn key(&self) -> &'static str {
        match self {
            Scheme::Sfl => "sfl",
            Scheme::LocSplitFed => "locsplitfed",
            Scheme::Csfl => "csfl",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Sfl => "SplitFed",
            Scheme::LocSplitFed => "LocSplitFed",
            Scheme::Csfl => "C-SFL",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "sfl" | "splitfed" => Ok(Scheme::Sfl),
            "locsplitfed" => Ok(Scheme::LocSplitFed),
            "csfl" => Ok(Scheme::Csfl),
            other => Err(Error::Config(format!("unknown scheme {other:?}"))),
        }
    }
}
