//! Volume I/O, preprocessing, augmentation, subject manifests, stratified
//! splitting, and the synthetic paired-volume generator.

pub mod manifest;
pub mod preprocess;
pub mod split;
pub mod synthetic;
pub mod volume;

pub use manifest::{read_manifest, write_manifest};
pub use preprocess::{augment, minmax_scale, transform};
pub use split::{stratified_split, SplitPlan};
pub use synthetic::{generate_synthetic, RegionSpec, SyntheticConfig, SyntheticDataset};
pub use volume::{read_nifti, read_vol1, read_volume, write_vol1, Volume};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Diagnosis {
    Cn = 0,
    Mci = 1,
    Ad = 2,
}

impl Diagnosis {
    /// Class index for a task; MCI has no label in the 2-class task.
    pub fn label(self, num_classes: usize) -> Option<usize> {
        match (num_classes, self) {
            (2, Diagnosis::Cn) => Some(0),
            (2, Diagnosis::Ad) => Some(1),
            (2, Diagnosis::Mci) => None,
            (3, d) => Some(d as usize),
            _ => None,
        }
    }
}

impl std::fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Diagnosis::Cn => "CN",
            Diagnosis::Mci => "MCI",
            Diagnosis::Ad => "AD",
        })
    }
}

impl std::str::FromStr for Diagnosis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CN" => Ok(Diagnosis::Cn),
            "MCI" => Ok(Diagnosis::Mci),
            "AD" => Ok(Diagnosis::Ad),
            other => Err(Error::data(format!("unknown diagnosis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    F = 0,
    M = 1,
}

impl std::fmt::Display for Sex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sex::F => "F",
            Sex::M => "M",
        })
    }
}

impl std::str::FromStr for Sex {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F" => Ok(Sex::F),
            "M" => Ok(Sex::M),
            other => Err(Error::data(format!("unknown sex '{other}'"))),
        }
    }
}

/// One subject of the cohort, with per-modality volume locators.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub diagnosis: Diagnosis,
    pub sex: Sex,
    pub age: f32,
    pub pet_path: String,
    pub mri_path: String,
}

/// A manifest with all volumes loaded into memory and min-max scaled.
pub struct LoadedDataset {
    pub records: Vec<SubjectRecord>,
    pub pet: Vec<Volume>,
    pub mri: Vec<Volume>,
}

impl LoadedDataset {
    pub fn from_manifest(manifest_path: &Path) -> Result<Self> {
        let records = read_manifest(manifest_path)?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let mut missing = Vec::new();
        for r in &records {
            for p in [&r.pet_path, &r.mri_path] {
                if !base.join(p).exists() {
                    missing.push(p.clone());
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::data(format!(
                "{} volume file(s) missing, e.g. {}",
                missing.len(),
                missing[0]
            )));
        }
        let mut pet = Vec::with_capacity(records.len());
        let mut mri = Vec::with_capacity(records.len());
        for r in &records {
            pet.push(minmax_scale(&read_volume(&base.join(&r.pet_path))?));
            mri.push(minmax_scale(&read_volume(&base.join(&r.mri_path))?));
        }
        Ok(LoadedDataset { records, pet, mri })
    }

    pub fn from_synthetic(ds: SyntheticDataset) -> Self {
        LoadedDataset {
            records: ds.records,
            pet: ds.pet.iter().map(minmax_scale).collect(),
            mri: ds.mri.iter().map(minmax_scale).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index_by_id(&self) -> BTreeMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.subject_id.as_str(), i))
            .collect()
    }

    /// Keep only subjects whose diagnosis has a label in the task.
    pub fn filter_for_task(&self, num_classes: usize) -> LoadedDataset {
        let mut records = Vec::new();
        let mut pet = Vec::new();
        let mut mri = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.diagnosis.label(num_classes).is_some() {
                records.push(r.clone());
                pet.push(self.pet[i].clone());
                mri.push(self.mri[i].clone());
            }
        }
        LoadedDataset { records, pet, mri }
    }
}
