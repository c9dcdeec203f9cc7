use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary class. The discriminant is the class index used by the
/// classifier and the losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Gender {
    Female = 0,
    Male = 1,
}

pub const NUM_CLASSES: usize = 2;

impl Gender {
    pub const ALL: [Gender; NUM_CLASSES] = [Gender::Female, Gender::Male];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Gender {
        match i {
            0 => Gender::Female,
            _ => Gender::Male,
        }
    }

    pub fn other(self) -> Gender {
        match self {
            Gender::Female => Gender::Male,
            Gender::Male => Gender::Female,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "FEMALE",
            Gender::Male => "MALE",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "FEMALE" | "F" => Ok(Gender::Female),
            "MALE" | "M" => Ok(Gender::Male),
            _ => Err(Error::InvalidArgument(format!("unknown gender {s:?}"))),
        }
    }
}

/// Where a label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LabelSource {
    True,
    Face,
    Propagated,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::True => "TRUE",
            LabelSource::Face => "FACE",
            LabelSource::Propagated => "PROPAGATED",
        }
    }
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TRUE" => Ok(LabelSource::True),
            "FACE" => Ok(LabelSource::Face),
            "PROPAGATED" => Ok(LabelSource::Propagated),
            _ => Err(Error::InvalidArgument(format!("unknown label source {s:?}"))),
        }
    }
}

/// A class assignment with a confidence score in [0, 1] and its provenance.
///
/// For face labels `score` is the aggregated probability of FEMALE; for
/// propagated labels it is the propagation confidence of `label`; true
/// labels carry 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub label: Gender,
    pub score: f64,
    pub source: LabelSource,
}

impl PseudoLabel {
    pub fn truth(label: Gender) -> Self {
        PseudoLabel {
            label,
            score: 1.0,
            source: LabelSource::True,
        }
    }

    pub fn new(label: Gender, score: f64, source: LabelSource) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!("label score {score} outside [0, 1]")));
        }
        Ok(PseudoLabel { label, score, source })
    }

    /// Confidence that `label` is correct.
    pub fn confidence(&self) -> f64 {
        match self.source {
            LabelSource::Face => match self.label {
                Gender::Female => self.score,
                Gender::Male => 1.0 - self.score,
            },
            _ => self.score,
        }
    }
}
