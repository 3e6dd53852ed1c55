//! Cross-validation split construction.
//!
//! Both constructors are pure functions of their inputs: the same records,
//! `k`, and seed always produce the same assignment.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::types::{Fold, FoldAssignment, SplitKind, SubjectRecord};

fn check_unique_ids(records: &[SubjectRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.subject_id.as_str()) {
            return Err(Error::Domain(format!(
                "duplicate subject_id \"{}\" in records",
                r.subject_id
            )));
        }
    }
    Ok(())
}

/// Builds `k` folds stratified jointly by (site, diagnosis).
///
/// Within every stratum the members are shuffled and dealt round-robin, with
/// the fill position carried across strata so fold sizes stay even. Fold
/// counts per stratum differ by at most one.
pub fn make_kfold_splits(
    records: &[SubjectRecord],
    k: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    check_unique_ids(records)?;
    if k < 2 {
        return Err(Error::Config(format!("k must be >= 2, got {k}")));
    }
    if k > records.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds the number of records ({})",
            records.len()
        )));
    }

    let mut strata: BTreeMap<(usize, u8), Vec<&SubjectRecord>> = BTreeMap::new();
    for r in records {
        strata.entry((r.site, r.diagnosis)).or_default().push(r);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_sets: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut offset = 0usize;
    for members in strata.values() {
        let mut ids: Vec<&str> = members.iter().map(|r| r.subject_id.as_str()).collect();
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            test_sets[(offset + i) % k].push((*id).to_string());
        }
        offset = (offset + ids.len()) % k;
    }

    let folds = test_sets
        .into_iter()
        .map(|test_ids| {
            let test: BTreeSet<&str> = test_ids.iter().map(String::as_str).collect();
            let train_ids = records
                .iter()
                .map(|r| r.subject_id.clone())
                .filter(|id| !test.contains(id.as_str()))
                .collect();
            Fold {
                train_ids,
                test_ids,
                held_out_site: None,
            }
        })
        .collect();

    Ok(FoldAssignment {
        folds,
        kind: SplitKind::KFold,
        seed,
    })
}

/// Builds one fold per site; the test set is exactly that site's subjects.
pub fn make_loso_splits(records: &[SubjectRecord]) -> Result<FoldAssignment> {
    check_unique_ids(records)?;
    let mut by_site: BTreeMap<usize, Vec<&SubjectRecord>> = BTreeMap::new();
    for r in records {
        by_site.entry(r.site).or_default().push(r);
    }
    if by_site.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-site-out needs >= 2 distinct sites, got {}",
            by_site.len()
        )));
    }
    let folds = by_site
        .iter()
        .map(|(&site, members)| {
            let test_ids: Vec<String> = members.iter().map(|r| r.subject_id.clone()).collect();
            let train_ids = records
                .iter()
                .filter(|r| r.site != site)
                .map(|r| r.subject_id.clone())
                .collect();
            Fold {
                train_ids,
                test_ids,
                held_out_site: Some(site),
            }
        })
        .collect();
    Ok(FoldAssignment {
        folds,
        kind: SplitKind::LeaveOneSiteOut,
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(sites: usize, per_stratum: usize) -> Vec<SubjectRecord> {
        let mut out = Vec::new();
        for site in 0..sites {
            for diag in 0..2u8 {
                for i in 0..per_stratum {
                    let id = format!("s{site}d{diag}n{i}");
                    out.push(SubjectRecord::new(id, site, diag, "x.vts").unwrap());
                }
            }
        }
        out
    }

    fn stratum_of(records: &[SubjectRecord], id: &str) -> (usize, u8) {
        let r = records.iter().find(|r| r.subject_id == id).unwrap();
        (r.site, r.diagnosis)
    }

    #[test]
    fn stratified_kfold_balances_strata() {
        // 20 records: 2 sites x 2 classes x 5 each, k = 10.
        let recs = records(2, 5);
        let fa = make_kfold_splits(&recs, 10, 7).unwrap();
        assert_eq!(fa.folds.len(), 10);
        // Exhaustive stratum count per fold: every fold holds exactly 2 test
        // subjects drawn from 2 distinct strata.
        for fold in &fa.folds {
            assert_eq!(fold.test_ids.len(), 2);
            let strata: BTreeSet<(usize, u8)> = fold
                .test_ids
                .iter()
                .map(|id| stratum_of(&recs, id))
                .collect();
            assert_eq!(strata.len(), 2, "test pair drawn from one stratum");
        }
        // Per-stratum fold counts differ by at most 1.
        for stratum in [(0, 0u8), (0, 1), (1, 0), (1, 1)] {
            let counts: Vec<usize> = fa
                .folds
                .iter()
                .map(|f| {
                    f.test_ids
                        .iter()
                        .filter(|id| stratum_of(&recs, id) == stratum)
                        .count()
                })
                .collect();
            let max = counts.iter().max().unwrap();
            let min = counts.iter().min().unwrap();
            assert!(max - min <= 1);
        }
    }

    #[test]
    fn partition_property() {
        let recs = records(3, 4);
        let fa = make_kfold_splits(&recs, 7, 13).unwrap();
        let mut seen = BTreeSet::new();
        for fold in &fa.folds {
            for id in &fold.test_ids {
                assert!(seen.insert(id.clone()), "{id} in two test sets");
                assert!(!fold.train_ids.contains(id), "{id} in train and test");
            }
            assert_eq!(fold.train_ids.len() + fold.test_ids.len(), recs.len());
        }
        assert_eq!(seen.len(), recs.len());
    }

    #[test]
    fn k_equals_n_gives_leave_one_out() {
        let recs = records(1, 3); // 6 records
        let fa = make_kfold_splits(&recs, 6, 1).unwrap();
        assert!(fa.folds.iter().all(|f| f.test_ids.len() == 1));
    }

    #[test]
    fn deterministic_given_seed() {
        let recs = records(2, 5);
        let a = make_kfold_splits(&recs, 5, 42).unwrap();
        let b = make_kfold_splits(&recs, 5, 42).unwrap();
        assert_eq!(a, b);
        let c = make_kfold_splits(&recs, 5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn k_exceeding_records_is_error() {
        let recs = records(1, 2);
        assert!(make_kfold_splits(&recs, 5, 0).is_err());
    }

    #[test]
    fn loso_one_fold_per_site() {
        let recs = records(4, 2);
        let fa = make_loso_splits(&recs).unwrap();
        assert_eq!(fa.folds.len(), 4);
        for fold in &fa.folds {
            let site = fold.held_out_site.unwrap();
            let expected: BTreeSet<&str> = recs
                .iter()
                .filter(|r| r.site == site)
                .map(|r| r.subject_id.as_str())
                .collect();
            let got: BTreeSet<&str> = fold.test_ids.iter().map(String::as_str).collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn loso_uneven_sites() {
        let mut recs = Vec::new();
        for i in 0..3 {
            recs.push(SubjectRecord::new(format!("a{i}"), 0, (i % 2) as u8, "x").unwrap());
        }
        for i in 0..2 {
            recs.push(SubjectRecord::new(format!("b{i}"), 1, (i % 2) as u8, "x").unwrap());
        }
        let fa = make_loso_splits(&recs).unwrap();
        let sizes: Vec<usize> = fa.folds.iter().map(|f| f.test_ids.len()).collect();
        assert_eq!(sizes, vec![3, 2]);
    }

    #[test]
    fn loso_single_site_is_error() {
        let recs = records(1, 2);
        assert!(make_loso_splits(&recs).is_err());
    }
}
