use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// An annotator's three-way judgment of a prompt.
///
/// The declaration order doubles as the class index used by the classifier
/// (ethical = 0, unethical = 1, unclear = 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reaction {
    Ethical,
    Unethical,
    Unclear,
}

impl Reaction {
    pub const ALL: [Reaction; 3] = [Reaction::Ethical, Reaction::Unethical, Reaction::Unclear];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<Reaction> {
        Self::ALL.get(idx).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Reaction::Ethical => "ethical",
            Reaction::Unethical => "unethical",
            Reaction::Unclear => "unclear",
        }
    }

    /// The two other reactions, in cyclic order starting after `self`.
    pub fn others(self) -> [Reaction; 2] {
        match self {
            Reaction::Ethical => [Reaction::Unethical, Reaction::Unclear],
            Reaction::Unethical => [Reaction::Unclear, Reaction::Ethical],
            Reaction::Unclear => [Reaction::Ethical, Reaction::Unethical],
        }
    }

    /// Swaps ethical and unethical; unclear is its own opposite.
    pub fn opposite(self) -> Reaction {
        match self {
            Reaction::Ethical => Reaction::Unethical,
            Reaction::Unethical => Reaction::Ethical,
            Reaction::Unclear => Reaction::Unclear,
        }
    }
}

impl fmt::Display for Reaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Reaction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ethical" => Ok(Reaction::Ethical),
            "unethical" => Ok(Reaction::Unethical),
            "unclear" => Ok(Reaction::Unclear),
            other => Err(format!("unknown reaction {other:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serializes_lowercase() {
        assert_eq!(
            serde_json::to_string(&Reaction::Unethical).unwrap(),
            "\"unethical\""
        );
        let r: Reaction = serde_json::from_str("\"unclear\"").unwrap();
        assert_eq!(r, Reaction::Unclear);
    }

    #[test]
    fn others_excludes_self() {
        for r in Reaction::ALL {
            assert!(!r.others().contains(&r));
            assert_ne!(r.others()[0], r.others()[1]);
        }
    }
}
