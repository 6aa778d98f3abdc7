use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// One of the six adverse-event discrepancy classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    /// Concomitant medication inappropriate for the adverse event it treats.
    InappropriateConmed = 1,
    /// Concomitant medication timing does not align with the adverse event.
    ConmedTiming = 2,
    /// Severity grade inconsistent with the event description or labs.
    Severity = 3,
    /// Action taken with study drug does not match exposure records.
    DoseChange = 4,
    /// Causality assessment inconsistent with timing or known toxicity.
    Causality = 5,
    /// Lab-gradeable adverse event without supporting lab data.
    NoSupportingData = 6,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::InappropriateConmed,
        Category::ConmedTiming,
        Category::Severity,
        Category::DoseChange,
        Category::Causality,
        Category::NoSupportingData,
    ];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Option<Category> {
        Category::ALL.get(usize::from(n).checked_sub(1)?).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            Category::InappropriateConmed => "Inappropriate concomitant medication to treat an adverse event",
            Category::ConmedTiming => "Timing of concomitant medication and adverse event do not align",
            Category::Severity => "Incorrect severity grade for the described adverse event",
            Category::DoseChange => "Mismatched dosing change",
            Category::Causality => "Incorrect causality assessment of adverse event",
            Category::NoSupportingData => "No supporting data for adverse event",
        }
    }

    pub fn index(self) -> usize {
        self as usize - 1
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl Serialize for Category {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.number())
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let n = u8::deserialize(d)?;
        Category::from_number(n)
            .ok_or_else(|| serde::de::Error::custom(format!("category must be 1-6, got {n}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for c in Category::ALL {
            assert_eq!(Category::from_number(c.number()), Some(c));
        }
        assert_eq!(Category::from_number(0), None);
        assert_eq!(Category::from_number(7), None);
        assert!(serde_json::from_str::<Category>("9").is_err());
        assert_eq!(serde_json::to_string(&Category::Causality).unwrap(), "5");
    }
}
