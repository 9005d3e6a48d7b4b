use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Age class. Windows are inclusive day ranges centred on the nominal age
/// (30.44 days per month), ±2 weeks except ±6 weeks at 36 months.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cohort {
    #[serde(rename = "newborn")]
    Newborn,
    #[serde(rename = "3mo")]
    M3,
    #[serde(rename = "9mo")]
    M9,
    #[serde(rename = "12mo")]
    M12,
    #[serde(rename = "24mo")]
    M24,
    #[serde(rename = "36mo")]
    M36,
}

impl Cohort {
    pub const ALL: [Cohort; 6] = [
        Cohort::Newborn,
        Cohort::M3,
        Cohort::M9,
        Cohort::M12,
        Cohort::M24,
        Cohort::M36,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Cohort> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Cohort::Newborn => "newborn",
            Cohort::M3 => "3mo",
            Cohort::M9 => "9mo",
            Cohort::M12 => "12mo",
            Cohort::M24 => "24mo",
            Cohort::M36 => "36mo",
        }
    }

    /// Inclusive `(lo, hi)` in days.
    pub fn window(self) -> (u32, u32) {
        match self {
            Cohort::Newborn => (8, 35),
            Cohort::M3 => (77, 105),
            Cohort::M9 => (260, 288),
            Cohort::M12 => (351, 379),
            Cohort::M24 => (716, 744),
            Cohort::M36 => (1053, 1137),
        }
    }

    pub fn contains(self, age_days: u32) -> bool {
        let (lo, hi) = self.window();
        (lo..=hi).contains(&age_days)
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Cohort {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown cohort {s:?}")))
    }
}

pub fn class_names() -> Vec<String> {
    Cohort::ALL.iter().map(|c| c.name().to_string()).collect()
}

/// The cohort whose window contains `age_days`. The windows leave gaps.
pub fn cohort_from_age(age_days: u32) -> Result<Cohort> {
    Cohort::ALL
        .into_iter()
        .find(|c| c.contains(age_days))
        .ok_or(Error::OutOfCohortRange(age_days))
}

/// MRI contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sequence {
    T1w,
    T2w,
    PDw,
}

impl Sequence {
    pub const ALL: [Sequence; 3] = [Sequence::T1w, Sequence::T2w, Sequence::PDw];

    pub fn name(self) -> &'static str {
        match self {
            Sequence::T1w => "T1w",
            Sequence::T2w => "T2w",
            Sequence::PDw => "PDw",
        }
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|q| q.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown sequence {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lookup_examples() {
        assert_eq!(cohort_from_age(20).unwrap(), Cohort::Newborn);
        assert_eq!(cohort_from_age(8).unwrap(), Cohort::Newborn);
        assert_eq!(cohort_from_age(35).unwrap(), Cohort::Newborn);
        assert!(matches!(cohort_from_age(7), Err(Error::OutOfCohortRange(7))));
        assert_eq!(cohort_from_age(1100).unwrap(), Cohort::M36);
        assert!(cohort_from_age(200).is_err());
    }

    #[test]
    fn windows_follow_month_arithmetic() {
        for (c, months, half) in [
            (Cohort::M3, 3.0, 14.0),
            (Cohort::M9, 9.0, 14.0),
            (Cohort::M12, 12.0, 14.0),
            (Cohort::M24, 24.0, 14.0),
            (Cohort::M36, 36.0, 42.0),
        ] {
            let centre = months * 30.44f64;
            let (lo, hi) = c.window();
            // the table rounds some edges up and some down
            assert!((lo as f64 - (centre - half)).abs() < 1.0, "{c}");
            assert!((hi as f64 - (centre + half)).abs() < 1.0, "{c}");
        }
    }

    #[test]
    fn windows_are_disjoint() {
        for (i, a) in Cohort::ALL.iter().enumerate() {
            for b in &Cohort::ALL[i + 1..] {
                assert!(a.window().1 < b.window().0);
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for c in Cohort::ALL {
            assert_eq!(c.name().parse::<Cohort>().unwrap(), c);
            assert_eq!(Cohort::from_index(c.index()), Some(c));
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{}\"", c.name()));
        }
        assert_eq!("pdw".parse::<Sequence>().unwrap(), Sequence::PDw);
    }

    proptest! {
        #[test]
        fn lookup_agrees_with_brute_force(age in 0u32..1500) {
            let hits: Vec<Cohort> = Cohort::ALL.into_iter().filter(|c| c.contains(age)).collect();
            match cohort_from_age(age) {
                Ok(c) => prop_assert_eq!(hits, vec![c]),
                Err(_) => prop_assert!(hits.is_empty()),
            }
        }
    }
}
