use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of severity grades.
pub const NUM_CLASSES: usize = 4;

/// GGO severity grade. The discriminant is the class id used by models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Mild = 0,
    Moderate = 1,
    Severe = 2,
    Critical = 3,
}

impl Severity {
    pub const ALL: [Severity; NUM_CLASSES] = [Severity::Mild, Severity::Moderate, Severity::Severe, Severity::Critical];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Severity> {
        Self::ALL.get(id).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
            Severity::Critical => "critical",
        }
    }

    /// Column title used in class-wise report tables.
    pub fn title(self) -> &'static str {
        match self {
            Severity::Mild => "Mild",
            Severity::Moderate => "Moderate",
            Severity::Severe => "Severe",
            Severity::Critical => "Critical",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown severity label {0:?}")]
pub struct UnknownSeverity(pub String);

impl FromStr for Severity {
    type Err = UnknownSeverity;

    /// Accepts the grade name (any case) or its numeric id.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let token = s.trim();
        match token.to_ascii_lowercase().as_str() {
            "mild" | "0" => Ok(Severity::Mild),
            "moderate" | "1" => Ok(Severity::Moderate),
            "severe" | "2" => Ok(Severity::Severe),
            "critical" | "3" => Ok(Severity::Critical),
            _ => Err(UnknownSeverity(token.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_words_and_ids() {
        assert_eq!("severe".parse::<Severity>().unwrap(), Severity::Severe);
        assert_eq!("SEVERE".parse::<Severity>().unwrap(), Severity::Severe);
        assert_eq!("2".parse::<Severity>().unwrap(), Severity::Severe);
        assert_eq!(" Mild ".parse::<Severity>().unwrap(), Severity::Mild);
        assert!("4".parse::<Severity>().is_err());
        assert!("grave".parse::<Severity>().is_err());
    }

    #[test]
    fn ids_roundtrip() {
        for s in Severity::ALL {
            assert_eq!(Severity::from_id(s.id()), Some(s));
        }
        assert_eq!(Severity::from_id(4), None);
    }
}
