//! Integrated-gradients attribution over both modality inputs.
//!
//! The attributed function is the model's log-probability of a target class.
//! The path integral from an all-zero baseline to the input is approximated
//! with a midpoint Riemann sum; steps are batched so one forward/backward
//! pass covers several interpolation points.

use crate::data::Volume;
use crate::error::{Error, Result};
use crate::fusion::MultiModalModel;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// Attribution maps for one subject, one per modality, same shape as the
/// input volumes.
#[derive(Debug, Clone)]
pub struct AttributionResult {
    pub target_class: usize,
    pub steps: usize,
    pub pet_map: Vec<f32>,
    pub mri_map: Vec<f32>,
    pub shape: [usize; 3],
    /// F(input) − F(baseline), the value the map should sum to.
    pub delta_f: f64,
    /// |Σ map − ΔF|.
    pub residual: f64,
}

impl AttributionResult {
    pub fn sum(&self) -> f64 {
        self.pet_map.iter().map(|&v| v as f64).sum::<f64>()
            + self.mri_map.iter().map(|&v| v as f64).sum::<f64>()
    }

    /// Residual as a fraction of |ΔF|.
    pub fn relative_residual(&self) -> f64 {
        if self.delta_f.abs() < 1e-12 {
            return if self.residual < 1e-12 { 0.0 } else { f64::INFINITY };
        }
        self.residual / self.delta_f.abs()
    }
}

fn single_input(v: &Volume) -> Result<Tensor<f32>> {
    Tensor::from_vec(&[1, 1, v.shape[0], v.shape[1], v.shape[2]], v.data.clone())
}

/// Log-probability of `class` for one subject at inference.
fn class_logp(model: &mut MultiModalModel, pet: &Tensor<f32>, mri: &Tensor<f32>, class: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = model.run(pet.clone(), mri.clone(), false, &mut rng)?;
    let lp = pass.tape.value(pass.output.logp);
    Ok(lp.data()[class] as f64)
}

/// Integrated gradients for one subject with a black (all-zero) baseline.
///
/// `steps` is the number of midpoint interpolation points; `chunk` bounds how
/// many of them share one forward/backward pass.
pub fn integrated_gradients(
    model: &mut MultiModalModel,
    pet: &Volume,
    mri: &Volume,
    target_class: usize,
    steps: usize,
    chunk: usize,
) -> Result<AttributionResult> {
    if steps == 0 || chunk == 0 {
        return Err(Error::config("steps and chunk must be positive".to_string()));
    }
    if target_class >= model.num_classes() {
        return Err(Error::config(format!(
            "target class {target_class} out of range for {} classes",
            model.num_classes()
        )));
    }
    if pet.shape != mri.shape {
        return Err(Error::shape("PET and MRI shapes differ".to_string()));
    }
    let shape = pet.shape;
    let n = pet.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut grad_pet = vec![0.0f64; n];
    let mut grad_mri = vec![0.0f64; n];
    let mut k = 0usize;
    while k < steps {
        let b = chunk.min(steps - k);
        let mut pet_batch = Vec::with_capacity(b * n);
        let mut mri_batch = Vec::with_capacity(b * n);
        for j in 0..b {
            let alpha = ((k + j) as f32 + 0.5) / steps as f32;
            pet_batch.extend(pet.data.iter().map(|&v| alpha * v));
            mri_batch.extend(mri.data.iter().map(|&v| alpha * v));
        }
        let mut tape = Tape::new();
        let pet_var = tape.leaf(Tensor::from_vec(&[b, 1, shape[0], shape[1], shape[2]], pet_batch)?);
        let mri_var = tape.leaf(Tensor::from_vec(&[b, 1, shape[0], shape[1], shape[2]], mri_batch)?);
        let out = model.forward(&mut tape, pet_var, mri_var, false, &mut rng)?;
        let target = tape.gather_class_sum(out.logp, &vec![target_class; b])?;
        let (grads, _) = tape.backward(target)?;
        let gp = grads.wrt(pet_var, &tape);
        let gm = grads.wrt(mri_var, &tape);
        for j in 0..b {
            for i in 0..n {
                grad_pet[i] += gp.data()[j * n + i] as f64;
                grad_mri[i] += gm.data()[j * n + i] as f64;
            }
        }
        k += b;
    }

    let pet_map: Vec<f32> = (0..n)
        .map(|i| (pet.data[i] as f64 * grad_pet[i] / steps as f64) as f32)
        .collect();
    let mri_map: Vec<f32> = (0..n)
        .map(|i| (mri.data[i] as f64 * grad_mri[i] / steps as f64) as f32)
        .collect();

    let pet_in = single_input(pet)?;
    let mri_in = single_input(mri)?;
    let black = Tensor::zeros(pet_in.shape());
    let f_input = class_logp(model, &pet_in, &mri_in, target_class)?;
    let f_base = class_logp(model, &black, &black, target_class)?;
    let delta_f = f_input - f_base;
    let total: f64 = pet_map.iter().map(|&v| v as f64).sum::<f64>()
        + mri_map.iter().map(|&v| v as f64).sum::<f64>();

    Ok(AttributionResult {
        target_class,
        steps,
        pet_map,
        mri_map,
        shape,
        delta_f,
        residual: (total - delta_f).abs(),
    })
}

/// Per-modality attribution mass for one subject.
#[derive(Debug, Clone)]
pub struct ModalityContribution {
    pub sum_abs_pet: f64,
    pub sum_abs_mri: f64,
    pub signed_pet: f64,
    pub signed_mri: f64,
    /// dominant / non-dominant absolute mass; infinite when one side is zero.
    pub ratio: f64,
}

pub fn modality_contribution(result: &AttributionResult) -> ModalityContribution {
    let sum_abs = |m: &[f32]| m.iter().map(|&v| (v as f64).abs()).sum::<f64>();
    let signed = |m: &[f32]| m.iter().map(|&v| v as f64).sum::<f64>();
    let (sa, sb) = (sum_abs(&result.pet_map), sum_abs(&result.mri_map));
    let (hi, lo) = if sa >= sb { (sa, sb) } else { (sb, sa) };
    let ratio = if lo == 0.0 {
        if hi == 0.0 { 1.0 } else { f64::INFINITY }
    } else {
        hi / lo
    };
    ModalityContribution {
        sum_abs_pet: sa,
        sum_abs_mri: sb,
        signed_pet: signed(&result.pet_map),
        signed_mri: signed(&result.mri_map),
        ratio,
    }
}

/// Voxelwise mean of |map| over a selection of results, per modality.
pub fn mean_abs_maps(results: &[&AttributionResult]) -> Result<(Vec<f32>, Vec<f32>, [usize; 3])> {
    if results.is_empty() {
        return Err(Error::data(
            "mean attribution map over an empty selection (0 subjects matched)".to_string(),
        ));
    }
    let shape = results[0].shape;
    let n: usize = shape.iter().product();
    let mut pet = vec![0.0f64; n];
    let mut mri = vec![0.0f64; n];
    for r in results {
        if r.shape != shape {
            return Err(Error::shape("attribution maps have mixed shapes".to_string()));
        }
        for i in 0..n {
            pet[i] += (r.pet_map[i] as f64).abs();
            mri[i] += (r.mri_map[i] as f64).abs();
        }
    }
    let k = results.len() as f64;
    Ok((
        pet.iter().map(|&v| (v / k) as f32).collect(),
        mri.iter().map(|&v| (v / k) as f32).collect(),
        shape,
    ))
}

/// Write the central axial slice (z = D/2 plane, index `shape[2]/2`) of a map
/// as a binary PGM with min-max display scaling.
pub fn export_axial_slice(path: &Path, map: &[f32], shape: [usize; 3]) -> Result<()> {
    let [nx, ny, nz] = shape;
    if map.len() != nx * ny * nz {
        return Err(Error::shape("map length does not match shape".to_string()));
    }
    let z = nz / 2;
    let mut slice = Vec::with_capacity(nx * ny);
    for y in 0..ny {
        for x in 0..nx {
            slice.push(map[(x * ny + y) * nz + z]);
        }
    }
    let lo = slice.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = slice.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P5\n{nx} {ny}\n255\n")?;
    let bytes: Vec<u8> = slice.iter().map(|&v| ((v - lo) * scale).round() as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// One row of the attribution summary CSV.
#[derive(Debug, Clone)]
pub struct AttributionRow {
    pub subject_id: String,
    pub class: usize,
    pub correct: bool,
    pub contribution: ModalityContribution,
    pub residual: f64,
}

pub fn write_attribution_csv(path: &Path, rows: &[AttributionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "subject_id",
        "class",
        "correct",
        "sum_abs_pet",
        "sum_abs_mri",
        "signed_pet",
        "signed_mri",
        "residual",
    ])?;
    for r in rows {
        w.write_record([
            r.subject_id.as_str(),
            &r.class.to_string(),
            &r.correct.to_string(),
            &format!("{:.9e}", r.contribution.sum_abs_pet),
            &format!("{:.9e}", r.contribution.sum_abs_mri),
            &format!("{:.9e}", r.contribution.signed_pet),
            &format!("{:.9e}", r.contribution.signed_mri),
            &format!("{:.9e}", r.residual),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::fusion::{build_model, FusionStrategy};

    fn tiny_model(strategy: FusionStrategy) -> MultiModalModel {
        let cfg = BackboneConfig { block_channels: [2, 2, 4, 4], head_hidden: 8, dropout: 0.0, ..Default::default() };
        build_model(strategy, &cfg, None, 99).unwrap()
    }

    fn vol(seed: u64) -> Volume {
        let data: Vec<f32> = (0..512).map(|i| (((i as u64 * 2654435761 + seed) % 97) as f32) / 97.0).collect();
        Volume::new([8, 8, 8], [1.5; 3], data).unwrap()
    }

    #[test]
    fn completeness_improves_with_steps() {
        let mut model = tiny_model(FusionStrategy::Late);
        let (pet, mri) = (vol(1), vol(2));
        let coarse = integrated_gradients(&mut model, &pet, &mri, 0, 4, 4).unwrap();
        let fine = integrated_gradients(&mut model, &pet, &mri, 0, 128, 16).unwrap();
        assert!(fine.relative_residual() <= coarse.relative_residual() + 1e-9);
        assert!(fine.relative_residual() < 0.05, "residual {}", fine.relative_residual());
    }

    #[test]
    fn chunking_does_not_change_the_map() {
        let mut model = tiny_model(FusionStrategy::Late);
        let (pet, mri) = (vol(3), vol(4));
        let a = integrated_gradients(&mut model, &pet, &mri, 1, 12, 12).unwrap();
        let b = integrated_gradients(&mut model, &pet, &mri, 1, 12, 5).unwrap();
        for (x, y) in a.pet_map.iter().zip(&b.pet_map) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn unused_modality_gets_zero_attribution() {
        let mut model = tiny_model(FusionStrategy::SinglePet);
        let (pet, mri) = (vol(5), vol(6));
        let r = integrated_gradients(&mut model, &pet, &mri, 0, 8, 8).unwrap();
        assert!(r.mri_map.iter().all(|&v| v == 0.0));
        let c = modality_contribution(&r);
        assert_eq!(c.sum_abs_mri, 0.0);
        assert!(c.ratio.is_infinite() || c.sum_abs_pet == 0.0);
    }

    #[test]
    fn mean_abs_maps_rejects_empty_selection() {
        let err = mean_abs_maps(&[]).unwrap_err();
        assert!(err.to_string().contains("0 subjects"));
    }

    #[test]
    fn pgm_slice_has_correct_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let map: Vec<f32> = (0..4 * 3 * 2).map(|i| i as f32).collect();
        export_axial_slice(&p, &map, [4, 3, 2]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = b"P5\n4 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 12);
    }

    #[test]
    fn invalid_target_class_rejected() {
        let mut model = tiny_model(FusionStrategy::Late);
        assert!(integrated_gradients(&mut model, &vol(1), &vol(2), 5, 4, 4).is_err());
    }
}
