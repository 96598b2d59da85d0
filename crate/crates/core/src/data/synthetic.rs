//! Synthetic paired-volume generator: a shared smooth "anatomy" base per
//! subject, with a class-dependent intensity deflection planted in a
//! per-modality spherical region, plus voxel noise. Signal strengths of zero
//! yield class-indistinguishable data (chance-level null).

use super::volume::Volume;
use super::{Diagnosis, Sex, SubjectRecord};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    /// Sphere center in voxel coordinates.
    pub center: [f64; 3],
    /// Sphere radius in voxels.
    pub radius: f64,
}

fn default_shape() -> [usize; 3] {
    [32, 32, 32]
}
fn default_spacing() -> [f32; 3] {
    [1.5, 1.5, 1.5]
}
fn default_noise_sigma() -> f64 {
    0.05
}
fn default_smooth_sigma() -> f64 {
    2.0
}
fn default_num_classes() -> usize {
    2
}
fn default_pet_region() -> RegionSpec {
    RegionSpec { center: [16.0, 16.0, 11.0], radius: 5.0 }
}
fn default_mri_region() -> RegionSpec {
    RegionSpec { center: [16.0, 16.0, 21.0], radius: 5.0 }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub subjects: usize,
    #[serde(default = "default_shape")]
    pub shape: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing: [f32; 3],
    pub s_pet: f64,
    pub s_mri: f64,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_pet_region")]
    pub pet_region: RegionSpec,
    #[serde(default = "default_mri_region")]
    pub mri_region: RegionSpec,
    #[serde(default = "default_smooth_sigma")]
    pub smooth_sigma: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 {
            return Err(Error::config("subject count must be positive".to_string()));
        }
        if self.num_classes != 2 && self.num_classes != 3 {
            return Err(Error::config("num_classes must be 2 or 3".to_string()));
        }
        if self.noise_sigma <= 0.0 {
            return Err(Error::config("noise_sigma must be > 0".to_string()));
        }
        if self.s_pet < 0.0 || self.s_mri < 0.0 {
            return Err(Error::config("signal strengths must be >= 0".to_string()));
        }
        for (name, region) in [("pet_region", &self.pet_region), ("mri_region", &self.mri_region)] {
            for ax in 0..3 {
                let lo = region.center[ax] - region.radius;
                let hi = region.center[ax] + region.radius;
                if lo < 0.0 || hi > self.shape[ax] as f64 {
                    return Err(Error::config(format!(
                        "{name} extends outside the volume on axis {ax} ([{lo:.1}, {hi:.1}] vs 0..{})",
                        self.shape[ax]
                    )));
                }
            }
        }
        Ok(())
    }
}

pub struct SyntheticDataset {
    pub records: Vec<SubjectRecord>,
    pub pet: Vec<Volume>,
    pub mri: Vec<Volume>,
}

// Cohort statistics the demographics are sampled from (age mean/std and
// female fraction per diagnosis).
const AGE_STATS: [(f64, f64); 3] = [(73.46, 5.93), (72.31, 7.30), (74.41, 7.89)];
const FEMALE_FRAC: [f64; 3] = [193.0 / 379.0, 253.0 / 611.0, 104.0 / 257.0];

fn sphere_mask(shape: [usize; 3], region: &RegionSpec) -> Vec<bool> {
    let [nx, ny, nz] = shape;
    let mut mask = vec![false; nx * ny * nz];
    let r2 = region.radius * region.radius;
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let d2 = (x as f64 - region.center[0]).powi(2)
                    + (y as f64 - region.center[1]).powi(2)
                    + (z as f64 - region.center[2]).powi(2);
                if d2 <= r2 {
                    mask[(x * ny + y) * nz + z] = true;
                }
            }
        }
    }
    mask
}

/// Separable Gaussian smoothing along each axis.
fn gaussian_smooth(data: &mut Vec<f64>, shape: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut ksum = 0.0;
    for k in -radius..=radius {
        let w = (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        ksum += w;
    }
    for w in &mut kernel {
        *w /= ksum;
    }
    let [nx, ny, nz] = shape;
    let strides = [ny * nz, nz, 1];
    let dims = [nx, ny, nz];
    let mut tmp = vec![0.0f64; data.len()];
    for ax in 0..3 {
        let stride = strides[ax];
        let dim = dims[ax] as isize;
        for i in 0..data.len() {
            // coordinate along this axis
            let coord = (i / stride) % dims[ax];
            let mut acc = 0.0;
            for (ki, k) in (-radius..=radius).enumerate() {
                let c = coord as isize + k;
                if c < 0 || c >= dim {
                    continue; // zero boundary
                }
                let j = (i as isize + k * stride as isize) as usize;
                acc += kernel[ki] * data[j];
            }
            tmp[i] = acc;
        }
        std::mem::swap(data, &mut tmp);
    }
}

fn normalize01(data: &mut [f64]) {
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in data.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    }
}

pub(crate) struct RawSubject {
    pub record: SubjectRecord,
    pub pet_raw: Vec<f64>,
    pub mri_raw: Vec<f64>,
}

fn generate_subject(cfg: &SyntheticConfig, index: usize, masks: (&[bool], &[bool]), rng: &mut ChaCha8Rng) -> RawSubject {
    let class_cycle: &[Diagnosis] = if cfg.num_classes == 2 {
        &[Diagnosis::Cn, Diagnosis::Ad]
    } else {
        &[Diagnosis::Cn, Diagnosis::Mci, Diagnosis::Ad]
    };
    let diagnosis = class_cycle[index % class_cycle.len()];
    let stats_idx = diagnosis as usize;
    let sex = if rng.random::<f64>() < FEMALE_FRAC[stats_idx] { Sex::F } else { Sex::M };
    let (mu, sd) = AGE_STATS[stats_idx];
    let age = Normal::new(mu, sd).unwrap().sample(rng).clamp(50.0, 95.0) as f32;

    let deflect = match diagnosis {
        Diagnosis::Ad => 1.0,
        Diagnosis::Mci => 0.5,
        Diagnosis::Cn => 0.0,
    };

    let n: usize = cfg.shape.iter().product();
    let mut base: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    gaussian_smooth(&mut base, cfg.shape, cfg.smooth_sigma);
    normalize01(&mut base);

    let mut modality = |s: f64, mask: &[bool]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let noise: f64 = Normal::new(0.0, cfg.noise_sigma).unwrap().sample(rng);
                base[i] - s * deflect * (mask[i] as u8 as f64) + noise
            })
            .collect()
    };
    let pet_raw = modality(cfg.s_pet, masks.0);
    let mri_raw = modality(cfg.s_mri, masks.1);

    RawSubject {
        record: SubjectRecord {
            subject_id: format!("s{index:05}"),
            diagnosis,
            sex,
            age,
            pet_path: String::new(),
            mri_path: String::new(),
        },
        pet_raw,
        mri_raw,
    }
}

pub(crate) fn generate_raw(cfg: &SyntheticConfig) -> Result<Vec<RawSubject>> {
    cfg.validate()?;
    let pet_mask = sphere_mask(cfg.shape, &cfg.pet_region);
    let mri_mask = sphere_mask(cfg.shape, &cfg.mri_region);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.subjects)
        .map(|i| generate_subject(cfg, i, (&pet_mask, &mri_mask), &mut rng))
        .collect())
}

/// Generate the full dataset: records plus clamped-[0,1] PET and MRI volumes.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    let raw = generate_raw(cfg)?;
    let clamp = |v: &[f64]| -> Vec<f32> { v.iter().map(|&x| x.clamp(0.0, 1.0) as f32).collect() };
    let mut records = Vec::with_capacity(raw.len());
    let mut pet = Vec::with_capacity(raw.len());
    let mut mri = Vec::with_capacity(raw.len());
    for s in raw {
        pet.push(Volume::new(cfg.shape, cfg.spacing, clamp(&s.pet_raw))?);
        mri.push(Volume::new(cfg.shape, cfg.spacing, clamp(&s.mri_raw))?);
        records.push(s.record);
    }
    Ok(SyntheticDataset { records, pet, mri })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            subjects: 20,
            shape: [16, 16, 16],
            spacing: [1.5; 3],
            s_pet: 0.5,
            s_mri: 0.0,
            noise_sigma: 0.05,
            num_classes: 2,
            pet_region: RegionSpec { center: [8.0, 8.0, 6.0], radius: 3.0 },
            mri_region: RegionSpec { center: [8.0, 8.0, 10.0], radius: 3.0 },
            smooth_sigma: 1.5,
            seed: 11,
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let cfg = small_cfg();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        for i in 0..a.pet.len() {
            assert_eq!(a.pet[i].data, b.pet[i].data);
            assert_eq!(a.mri[i].data, b.mri[i].data);
        }
    }

    #[test]
    fn region_outside_volume_rejected() {
        let mut cfg = small_cfg();
        cfg.pet_region.center = [15.0, 8.0, 8.0];
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn volumes_clamped_to_unit_range() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        for v in ds.pet.iter().chain(&ds.mri) {
            assert!(v.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn planted_pet_deflection_before_clamping_matches_signal_strength() {
        let mut cfg = small_cfg();
        cfg.subjects = 40;
        let mask = sphere_mask(cfg.shape, &cfg.pet_region);
        let raw = generate_raw(&cfg).unwrap();
        let mean_in_region = |s: &RawSubject| {
            let (mut acc, mut cnt) = (0.0, 0usize);
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    acc += s.pet_raw[i];
                    cnt += 1;
                }
            }
            acc / cnt as f64
        };
        let ad: Vec<f64> = raw.iter().filter(|s| s.record.diagnosis == Diagnosis::Ad).map(mean_in_region).collect();
        let cn: Vec<f64> = raw.iter().filter(|s| s.record.diagnosis == Diagnosis::Cn).map(mean_in_region).collect();
        let diff = cn.iter().sum::<f64>() / cn.len() as f64 - ad.iter().sum::<f64>() / ad.len() as f64;
        assert!((diff - cfg.s_pet).abs() < 0.1, "mean region deflection {diff} vs s_pet {}", cfg.s_pet);
    }

    #[test]
    fn zero_signal_keeps_class_distributions_identical_in_mean() {
        let mut cfg = small_cfg();
        cfg.s_pet = 0.0;
        cfg.subjects = 60;
        let ds = generate_synthetic(&cfg).unwrap();
        let mean = |v: &Volume| v.data.iter().sum::<f32>() / v.data.len() as f32;
        let ad: Vec<f32> = ds
            .records
            .iter()
            .zip(&ds.pet)
            .filter(|(r, _)| r.diagnosis == Diagnosis::Ad)
            .map(|(_, v)| mean(v))
            .collect();
        let cn: Vec<f32> = ds
            .records
            .iter()
            .zip(&ds.pet)
            .filter(|(r, _)| r.diagnosis == Diagnosis::Cn)
            .map(|(_, v)| mean(v))
            .collect();
        let (ma, mc) = (
            ad.iter().sum::<f32>() / ad.len() as f32,
            cn.iter().sum::<f32>() / cn.len() as f32,
        );
        assert!((ma - mc).abs() < 0.05, "no-signal means differ: {ma} vs {mc}");
    }
}
