//! Stratified train/validation/test splitting.
//!
//! Strata are diagnosis × sex × age-tercile (terciles computed on the full
//! cohort; strata with fewer than 5 subjects merge into the nearest age bin
//! of the same diagnosis/sex group). Each "fold" is an independently seeded
//! stratified 65/15/20 resampling — the 65/15/20 geometry is incompatible
//! with disjoint 5-fold testing, so the 5 splits are resamplings, not a
//! partition.

use super::{Diagnosis, Sex, SubjectRecord};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const TRAIN_FRACTION: f64 = 0.65;
pub const VAL_FRACTION: f64 = 0.15;
pub const TEST_FRACTION: f64 = 0.20;

const MIN_STRATUM: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitPlan {
    pub fold: usize,
    pub seed: u64,
    pub stratify_key: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitPlan {
    pub fn all_ids(&self) -> Vec<&String> {
        self.train.iter().chain(&self.val).chain(&self.test).collect()
    }
}

fn tercile_cuts(records: &[SubjectRecord]) -> (f32, f32) {
    let mut ages: Vec<f32> = records.iter().map(|r| r.age).collect();
    ages.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = ages.len();
    (ages[n / 3], ages[2 * n / 3])
}

fn stratum_key(diag: Diagnosis, sex: Sex, bin: usize) -> (u8, u8, u8) {
    (diag as u8, sex as u8, bin as u8)
}

/// Group subject indices into strata, merging undersized age bins.
fn build_strata(records: &[SubjectRecord]) -> BTreeMap<(u8, u8, u8), Vec<usize>> {
    let (t1, t2) = tercile_cuts(records);
    let mut strata: BTreeMap<(u8, u8, u8), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let bin = if r.age < t1 {
            0
        } else if r.age < t2 {
            1
        } else {
            2
        };
        strata.entry(stratum_key(r.diagnosis, r.sex, bin)).or_default().push(i);
    }
    // merge undersized age bins into the nearest nonempty bin of the same
    // diagnosis/sex group
    let keys: Vec<_> = strata.keys().cloned().collect();
    for key in keys {
        let members = match strata.get(&key) {
            Some(m) if m.len() < MIN_STRATUM => m.clone(),
            _ => continue,
        };
        let (d, s, bin) = key;
        let target = [1i8, -1, 2, -2]
            .iter()
            .map(|&off| bin as i8 + off)
            .find(|&b| (0..3).contains(&b) && strata.contains_key(&(d, s, b as u8)) && (d, s, b as u8) != key);
        if let Some(tb) = target {
            strata.remove(&key);
            strata.get_mut(&(d, s, tb as u8)).unwrap().extend(members);
        }
    }
    strata
}

/// Produce `fold_count` independently seeded stratified 65/15/20 splits.
pub fn stratified_split(records: &[SubjectRecord], seed: u64, fold_count: usize) -> Result<Vec<SplitPlan>> {
    if records.is_empty() {
        return Err(Error::data("cannot split an empty record list".to_string()));
    }
    let mut ids: Vec<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != records.len() {
        return Err(Error::data("duplicate subject ids in record list".to_string()));
    }
    let strata = build_strata(records);
    let mut plans = Vec::with_capacity(fold_count);
    for fold in 0..fold_count {
        let fold_seed = derive_seed(seed, &format!("split/fold{fold}"));
        let mut rng = ChaCha8Rng::seed_from_u64(fold_seed);
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for members in strata.values() {
            let mut m = members.clone();
            m.shuffle(&mut rng);
            let n = m.len();
            let n_test = (TEST_FRACTION * n as f64).round() as usize;
            let n_val = (VAL_FRACTION * n as f64).round() as usize;
            for (j, &idx) in m.iter().enumerate() {
                let id = records[idx].subject_id.clone();
                if j < n_test {
                    test.push(id);
                } else if j < n_test + n_val {
                    val.push(id);
                } else {
                    train.push(id);
                }
            }
        }
        train.sort();
        val.sort();
        test.sort();
        plans.push(SplitPlan {
            fold,
            seed: fold_seed,
            stratify_key: "diagnosis x sex x age-tercile".to_string(),
            train,
            val,
            test,
        });
    }
    Ok(plans)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cohort(n: usize) -> Vec<SubjectRecord> {
        (0..n)
            .map(|i| SubjectRecord {
                subject_id: format!("s{i:04}"),
                diagnosis: if i % 2 == 0 { Diagnosis::Cn } else { Diagnosis::Ad },
                sex: if i % 3 == 0 { Sex::F } else { Sex::M },
                age: 60.0 + (i % 30) as f32,
                pet_path: String::new(),
                mri_path: String::new(),
            })
            .collect()
    }

    #[test]
    fn single_stratum_hits_65_15_20() {
        let records: Vec<SubjectRecord> = (0..100)
            .map(|i| SubjectRecord {
                subject_id: format!("s{i:04}"),
                diagnosis: Diagnosis::Cn,
                sex: Sex::F,
                age: 70.0,
                pet_path: String::new(),
                mri_path: String::new(),
            })
            .collect();
        let plans = stratified_split(&records, 1, 1).unwrap();
        assert_eq!(plans[0].test.len(), 20);
        assert_eq!(plans[0].val.len(), 15);
        assert_eq!(plans[0].train.len(), 65);
    }

    #[test]
    fn folds_partition_all_subjects() {
        let records = cohort(137);
        for plan in stratified_split(&records, 7, 5).unwrap() {
            let mut ids: Vec<_> = plan.all_ids().into_iter().cloned().collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), records.len(), "fold {} not a partition", plan.fold);
        }
    }

    #[test]
    fn same_seed_same_plan() {
        let records = cohort(80);
        let a = stratified_split(&records, 42, 5).unwrap();
        let b = stratified_split(&records, 42, 5).unwrap();
        assert_eq!(a, b);
        let c = stratified_split(&records, 43, 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn class_proportions_stay_within_5_percent() {
        let records = cohort(240);
        let global_cn = records.iter().filter(|r| r.diagnosis == Diagnosis::Cn).count() as f64
            / records.len() as f64;
        let by_id: std::collections::BTreeMap<&str, Diagnosis> =
            records.iter().map(|r| (r.subject_id.as_str(), r.diagnosis)).collect();
        for seed in 0..10 {
            for plan in stratified_split(&records, seed, 5).unwrap() {
                for set in [&plan.train, &plan.val, &plan.test] {
                    let cn = set.iter().filter(|id| by_id[id.as_str()] == Diagnosis::Cn).count() as f64
                        / set.len() as f64;
                    assert!((cn - global_cn).abs() <= 0.05, "cn fraction {cn} vs {global_cn}");
                }
            }
        }
    }

    #[test]
    fn empty_records_rejected() {
        assert!(stratified_split(&[], 0, 5).is_err());
    }
}
