use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Entailment,
    Neutral,
    Contradiction,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Entailment, Label::Neutral, Label::Contradiction];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Neutral => "neutral",
            Label::Contradiction => "contradiction",
        }
    }

    pub fn perspective(self) -> Perspective {
        match self {
            Label::Entailment => Perspective::En,
            Label::Neutral => Perspective::Ne,
            Label::Contradiction => Perspective::Con,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entailment" => Ok(Label::Entailment),
            "neutral" => Ok(Label::Neutral),
            "contradiction" => Ok(Label::Contradiction),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

/// A high-level capsule. The orphan capsule, when enabled, absorbs
/// tokens that fit no relation and never feeds prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Perspective {
    #[serde(rename = "EN")]
    En,
    #[serde(rename = "NE")]
    Ne,
    #[serde(rename = "CON")]
    Con,
    #[serde(rename = "ORPHAN")]
    Orphan,
}

impl Perspective {
    pub const RELATIONS: [Perspective; 3] = [Perspective::En, Perspective::Ne, Perspective::Con];

    /// Perspectives routed over, in capsule order.
    pub fn routed(orphan: bool) -> Vec<Perspective> {
        let mut v = Self::RELATIONS.to_vec();
        if orphan {
            v.push(Perspective::Orphan);
        }
        v
    }

    pub fn label(self) -> Option<Label> {
        match self {
            Perspective::En => Some(Label::Entailment),
            Perspective::Ne => Some(Label::Neutral),
            Perspective::Con => Some(Label::Contradiction),
            Perspective::Orphan => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Perspective::En => "EN",
            Perspective::Ne => "NE",
            Perspective::Con => "CON",
            Perspective::Orphan => "ORPHAN",
        }
    }
}

impl fmt::Display for Perspective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}
