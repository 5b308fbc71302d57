use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Fixed registry of factor names used in labels, vectors and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Superiority,
    Relevance,
    Weekday,
    Jealousy,
}

impl Factor {
    pub const ALL: [Factor; 4] = [
        Factor::Superiority,
        Factor::Relevance,
        Factor::Weekday,
        Factor::Jealousy,
    ];

    /// Predictors of the jealousy judgment: the two antecedents plus the placebo.
    pub const PREDICTORS: [Factor; 3] = [Factor::Superiority, Factor::Relevance, Factor::Weekday];

    pub const ANTECEDENTS: [Factor; 2] = [Factor::Superiority, Factor::Relevance];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Superiority => "superiority",
            Factor::Relevance => "relevance",
            Factor::Weekday => "weekday",
            Factor::Jealousy => "jealousy",
        }
    }

    /// Confounder set used when purifying `self`: the other predictors. The
    /// jealousy vector is never a confounder.
    pub fn confounders(self) -> Vec<Factor> {
        Factor::PREDICTORS
            .into_iter()
            .filter(|&f| f != self)
            .collect()
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "superiority" | "sup" => Ok(Factor::Superiority),
            "relevance" | "rel" => Ok(Factor::Relevance),
            "weekday" | "wk" => Ok(Factor::Weekday),
            "jealousy" | "jea" => Ok(Factor::Jealousy),
            other => Err(Error::Metadata(format!("unknown factor {other:?}"))),
        }
    }
}
