//! Python bindings: volume I/O, the synthetic generator, model building and
//! inference, checkpoints, balanced accuracy, and integrated gradients.

use mmfusion::attribution;
use mmfusion::checkpoint;
use mmfusion::data::synthetic::{generate_synthetic, SyntheticConfig};
use mmfusion::data::{minmax_scale, read_volume, write_vol1, Volume};
use mmfusion::eval::balanced_accuracy;
use mmfusion::fusion::{self, FusionModelConfig, MultiModalModel};
use mmfusion::seed::derive_seed;
use mmfusion::tensor::Tensor;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

fn err(e: mmfusion::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A dense 3-D volume with voxel spacing in millimetres.
#[pyclass(name = "Volume", from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    fn new(shape: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> PyResult<Self> {
        Ok(PyVolume { inner: Volume::new(shape, spacing, data).map_err(err)? })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyVolume { inner: read_volume(&path).map_err(err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_vol1(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn shape(&self) -> [usize; 3] {
        self.inner.shape
    }

    #[getter]
    fn spacing(&self) -> [f32; 3] {
        self.inner.spacing
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data.clone()
    }

    fn minmax_scaled(&self) -> Self {
        PyVolume { inner: minmax_scale(&self.inner) }
    }

    fn __repr__(&self) -> String {
        format!("Volume(shape={:?}, spacing={:?})", self.inner.shape, self.inner.spacing)
    }
}

/// Elementwise product fusion of two equally shaped volumes.
#[pyfunction]
fn early_fuse(a: &PyVolume, b: &PyVolume) -> PyResult<PyVolume> {
    Ok(PyVolume { inner: fusion::early_fuse(&a.inner, &b.inner).map_err(err)? })
}

/// A classifier (single-modality or fused) over paired PET/MRI volumes.
#[pyclass(name = "Model")]
struct PyModel {
    inner: MultiModalModel,
}

#[pymethods]
impl PyModel {
    /// Build a fresh model from a JSON model configuration
    /// (`{"strategy": ..., "backbone": {...}, "exchange": {...}}`).
    #[staticmethod]
    fn build(config_json: &str, seed: u64) -> PyResult<Self> {
        let cfg: FusionModelConfig =
            serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyModel { inner: fusion::build_model_from_config(&cfg, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: checkpoint::load_checkpoint(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_checkpoint(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn strategy(&self) -> String {
        format!("{:?}", self.inner.strategy())
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Per-class log-probabilities for one subject.
    fn log_probabilities(&mut self, pet: &PyVolume, mri: &PyVolume) -> PyResult<Vec<f32>> {
        let to_tensor = |v: &Volume| {
            Tensor::from_vec(&[1, 1, v.shape[0], v.shape[1], v.shape[2]], v.data.clone()).map_err(err)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self
            .inner
            .run(to_tensor(&pet.inner)?, to_tensor(&mri.inner)?, false, &mut rng)
            .map_err(err)?;
        Ok(pass.tape.value(pass.output.logp).data().to_vec())
    }

    /// Argmax class for one subject.
    fn predict(&mut self, pet: &PyVolume, mri: &PyVolume) -> PyResult<usize> {
        let lp = self.log_probabilities(pet, mri)?;
        Ok((0..lp.len()).max_by(|&a, &b| lp[a].total_cmp(&lp[b])).unwrap_or(0))
    }

    /// Integrated-gradients attribution; returns a dict with per-modality
    /// maps, the completeness residual, and per-modality absolute mass.
    fn integrated_gradients<'py>(
        &mut self,
        py: Python<'py>,
        pet: &PyVolume,
        mri: &PyVolume,
        target_class: usize,
        steps: usize,
        chunk: usize,
    ) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let r = attribution::integrated_gradients(&mut self.inner, &pet.inner, &mri.inner, target_class, steps, chunk)
            .map_err(err)?;
        let c = attribution::modality_contribution(&r);
        let d = pyo3::types::PyDict::new(py);
        d.set_item("pet_map", r.pet_map.clone())?;
        d.set_item("mri_map", r.mri_map.clone())?;
        d.set_item("shape", r.shape)?;
        d.set_item("delta_f", r.delta_f)?;
        d.set_item("residual", r.residual)?;
        d.set_item("relative_residual", r.relative_residual())?;
        d.set_item("sum_abs_pet", c.sum_abs_pet)?;
        d.set_item("sum_abs_mri", c.sum_abs_mri)?;
        Ok(d)
    }
}

/// Generate a synthetic paired cohort from a JSON configuration; returns
/// `(records, pet_volumes, mri_volumes)` where each record is
/// `(subject_id, diagnosis, sex, age)`.
#[pyfunction]
fn generate_synthetic_dataset(
    config_json: &str,
) -> PyResult<(Vec<(String, String, String, f32)>, Vec<PyVolume>, Vec<PyVolume>)> {
    let cfg: SyntheticConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let ds = generate_synthetic(&cfg).map_err(err)?;
    let records = ds
        .records
        .iter()
        .map(|r| (r.subject_id.clone(), r.diagnosis.to_string(), r.sex.to_string(), r.age))
        .collect();
    let wrap = |v: Vec<Volume>| v.into_iter().map(|inner| PyVolume { inner }).collect();
    Ok((records, wrap(ds.pet), wrap(ds.mri)))
}

/// Mean of per-class recalls.
#[pyfunction(name = "balanced_accuracy")]
fn py_balanced_accuracy(labels: Vec<usize>, preds: Vec<usize>, num_classes: usize) -> PyResult<f64> {
    balanced_accuracy(&labels, &preds, num_classes).map_err(err)
}

/// Deterministic per-component seed derivation from a master seed.
#[pyfunction(name = "derive_seed")]
fn py_derive_seed(master: u64, component: &str) -> u64 {
    derive_seed(master, component)
}

#[pymodule]
fn mmfusion_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(early_fuse, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(py_balanced_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(py_derive_seed, m)?)?;
    Ok(())
}
