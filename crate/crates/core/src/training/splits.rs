//! Seeded train/test partitions for the two case-study protocols.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::stream;

/// Which split protocol applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CaseStudy {
    /// Freeway A as source, freeway B as target.
    CrossCity,
    /// Early period as source, later period as target.
    CrossPeriod,
    Custom { source_test: f64, target_test: f64 },
}

pub const SOURCE_TEST_FRACTION: f64 = 1.0 / 3.0;
pub const TARGET_TEST_FRACTION: f64 = 0.5;

impl CaseStudy {
    pub fn source_test_fraction(self) -> f64 {
        match self {
            CaseStudy::CrossCity | CaseStudy::CrossPeriod => SOURCE_TEST_FRACTION,
            CaseStudy::Custom { source_test, .. } => source_test,
        }
    }

    pub fn target_test_fraction(self) -> f64 {
        match self {
            CaseStudy::CrossCity | CaseStudy::CrossPeriod => TARGET_TEST_FRACTION,
            CaseStudy::Custom { target_test, .. } => target_test,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cross_city" => Ok(CaseStudy::CrossCity),
            "cross_period" => Ok(CaseStudy::CrossPeriod),
            other => {
                // custom:<source fraction>:<target fraction>
                let parts: Vec<&str> = other.split(':').collect();
                if parts.len() == 3 && parts[0] == "custom" {
                    let source_test = parts[1].parse().map_err(|_| bad_study(other))?;
                    let target_test = parts[2].parse().map_err(|_| bad_study(other))?;
                    let study = CaseStudy::Custom { source_test, target_test };
                    study.validate()?;
                    Ok(study)
                } else {
                    Err(bad_study(other))
                }
            }
        }
    }

    pub fn validate(self) -> Result<()> {
        for f in [self.source_test_fraction(), self.target_test_fraction()] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!("test fraction {f} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for CaseStudy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CaseStudy::CrossCity => f.write_str("cross_city"),
            CaseStudy::CrossPeriod => f.write_str("cross_period"),
            CaseStudy::Custom { source_test, target_test } => write!(f, "custom:{source_test:?}:{target_test:?}"),
        }
    }
}

fn bad_study(s: &str) -> Error {
    Error::Config(format!(
        "unknown case study {s:?} (expected cross_city, cross_period or custom:<src>:<tgt>)"
    ))
}

/// `(train, test)` sizes for `total` items; the test count rounds down.
pub fn split_counts(total: usize, test_fraction: f64) -> (usize, usize) {
    let test = ((total as f64) * test_fraction).floor() as usize;
    (total - test, test.min(total))
}

/// Shuffles `0..total` with a stream derived from `seed` and `name`, then
/// returns sorted train and test index lists.
pub fn split_indices(total: usize, test_fraction: f64, seed: u64, name: &str) -> (Vec<usize>, Vec<usize>) {
    let (_, test) = split_counts(total, test_fraction);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut stream(seed, name));
    let mut test_idx = order[..test].to_vec();
    let mut train_idx = order[test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    (train_idx, test_idx)
}

/// Split of both domains under `study`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseStudySplits {
    pub source_train: Vec<usize>,
    pub source_test: Vec<usize>,
    pub target_train: Vec<usize>,
    pub target_test: Vec<usize>,
}

pub fn make_case_study_splits(study: CaseStudy, source_total: usize, target_total: usize, seed: u64) -> Result<CaseStudySplits> {
    study.validate()?;
    if source_total == 0 || target_total == 0 {
        return Err(Error::Config(format!(
            "case study {study} needs samples in both domains (source {source_total}, target {target_total})"
        )));
    }
    let (source_train, source_test) = split_indices(source_total, study.source_test_fraction(), seed, "split.source");
    let (target_train, target_test) = split_indices(target_total, study.target_test_fraction(), seed, "split.target");
    Ok(CaseStudySplits {
        source_train,
        source_test,
        target_train,
        target_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_round_test_down() {
        assert_eq!(split_counts(9, 1.0 / 3.0), (6, 3));
        assert_eq!(split_counts(10, 1.0 / 3.0), (7, 3));
        assert_eq!(split_counts(7, 0.5), (4, 3));
        assert_eq!(split_counts(0, 0.5), (0, 0));
    }

    #[test]
    fn same_seed_same_membership() {
        let a = make_case_study_splits(CaseStudy::CrossCity, 100, 50, 7).unwrap();
        let b = make_case_study_splits(CaseStudy::CrossCity, 100, 50, 7).unwrap();
        assert_eq!(a, b);
        let c = make_case_study_splits(CaseStudy::CrossCity, 100, 50, 8).unwrap();
        assert_ne!(a.source_test, c.source_test);
    }

    #[test]
    fn partitions_are_disjoint_and_complete() {
        let s = make_case_study_splits(CaseStudy::CrossPeriod, 31, 17, 3).unwrap();
        let mut all: Vec<usize> = s.source_train.iter().chain(&s.source_test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..31).collect::<Vec<_>>());
        assert!(s.target_test.iter().all(|i| !s.target_train.contains(i)));
    }

    #[test]
    fn empty_domain_is_config_error() {
        assert!(matches!(
            make_case_study_splits(CaseStudy::CrossCity, 10, 0, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn parse_round_trip() {
        for s in ["cross_city", "cross_period", "custom:0.25:0.5"] {
            assert_eq!(CaseStudy::parse(s).unwrap().to_string(), s);
        }
        assert!(CaseStudy::parse("custom:2:0.5").is_err());
        assert!(CaseStudy::parse("weekly").is_err());
    }
}
