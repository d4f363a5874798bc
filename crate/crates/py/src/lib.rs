//! Python bindings: tensors, the spectral transforms, the model, training,
//! metrics and checkpoints.

use std::path::PathBuf;

use fusion_core::checkpoint::{load_checkpoint, save_checkpoint};
use fusion_core::gradcheck::{finite_diff_check, GradCheckOptions};
use fusion_core::metrics::{self, Psnr};
use fusion_core::training::{self as core_training, AdamConfig, DegradationParams, TrainConfig};
use fusion_core::{spectral, AblationConfig, FusionError, ModelConfig};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(fusion_py, NumericalError, PyException, "Training or inference produced non-finite values.");
create_exception!(fusion_py, CheckpointError, PyException, "A checkpoint could not be read.");

fn to_py(e: FusionError) -> PyErr {
    match e {
        FusionError::Shape(_) | FusionError::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        FusionError::Io(_) => PyIOError::new_err(e.to_string()),
        FusionError::Checkpoint(_) | FusionError::CrcMismatch { .. } => CheckpointError::new_err(e.to_string()),
        _ => NumericalError::new_err(e.to_string()),
    }
}

fn db(p: Psnr) -> f64 {
    match p {
        Psnr::Finite(v) => v,
        Psnr::Infinite => f64::INFINITY,
    }
}

/// Dense row-major `float64` array, usually `[C, H, W]`.
#[pyclass(module = "fusion_py", name = "Tensor", from_py_object)]
#[derive(Clone)]
struct PyTensor(fusion_core::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Self> {
        fusion_core::Tensor::new(&shape, data).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self(fusion_core::Tensor::zeros(&shape))
    }

    #[staticmethod]
    fn full(shape: Vec<usize>, value: f64) -> Self {
        Self(fusion_core::Tensor::full(&shape, value))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.data().len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// Magnitude and phase of a per-channel 2-D spectrum.
#[pyfunction]
fn fft2(x: &PyTensor) -> PyResult<(PyTensor, PyTensor)> {
    let s = spectral::fft2(&x.0).map_err(to_py)?;
    Ok((PyTensor(s.magnitude), PyTensor(s.phase)))
}

/// Real inverse of a magnitude/phase pair.
#[pyfunction]
fn ifft2(magnitude: &PyTensor, phase: &PyTensor) -> PyResult<PyTensor> {
    let pair = spectral::recombine(&magnitude.0, &phase.0).map_err(to_py)?;
    spectral::ifft2(&pair).map(PyTensor).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn psnr(a: &PyTensor, b: &PyTensor, peak: f64) -> PyResult<f64> {
    metrics::psnr(&a.0, &b.0, peak).map(db).map_err(to_py)
}

#[pyfunction]
fn ssim(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    metrics::ssim(&a.0, &b.0).map_err(to_py)
}

/// `{"uicm", "uism", "uiconm", "uiqm"}` for an RGB image in `[0,1]`.
#[pyfunction]
fn uiqm<'py>(py: Python<'py>, img: &PyTensor) -> PyResult<Bound<'py, PyDict>> {
    let s = metrics::uiqm(&img.0).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("uicm", s.uicm)?;
    d.set_item("uism", s.uism)?;
    d.set_item("uiconm", s.uiconm)?;
    d.set_item("uiqm", s.uiqm)?;
    Ok(d)
}

/// Underwater look: per-channel attenuation plus veiling light.
#[pyfunction]
#[pyo3(signature = (clean, depth, beta = (0.8, 0.3, 0.1), backscatter = (0.0, 0.1, 0.15), floor = 0.05))]
fn degrade(
    clean: &PyTensor,
    depth: f64,
    beta: (f64, f64, f64),
    backscatter: (f64, f64, f64),
    floor: f64,
) -> PyResult<PyTensor> {
    let p = DegradationParams {
        beta: [beta.0, beta.1, beta.2],
        depth,
        backscatter: [backscatter.0, backscatter.1, backscatter.2],
        floor,
    };
    p.validate().map_err(to_py)?;
    core_training::degrade(&clean.0, &p).map(PyTensor).map_err(to_py)
}

/// Seeded list of `(degraded, clean)` pairs.
#[pyfunction]
#[pyo3(signature = (count, size = 64, seed = 0))]
fn synthetic_pairs(count: usize, size: usize, seed: u64) -> PyResult<Vec<(PyTensor, PyTensor)>> {
    let data = core_training::synthetic_dataset(count, size, seed).map_err(to_py)?;
    Ok(data
        .pairs
        .into_iter()
        .map(|p| (PyTensor(p.degraded), PyTensor(p.clean)))
        .collect())
}

#[pyclass(module = "fusion_py", name = "FusionModel")]
struct PyModel(fusion_core::FusionModel);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (preset = "tiny", ablation = "full", seed = 0))]
    fn new(preset: &str, ablation: &str, seed: u64) -> PyResult<Self> {
        let width = fusion_core::model::width_preset(preset).map_err(to_py)?;
        let ab = AblationConfig::preset(ablation).map_err(to_py)?;
        let cfg = ModelConfig::new(width, ab).map_err(to_py)?;
        fusion_core::FusionModel::new(cfg, seed).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(&path).map(|(m, _)| Self(m)).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.0, None).map_err(to_py)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.num_parameters()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.config().width
    }

    fn parameter_names(&self) -> Vec<String> {
        self.0.params().iter().map(|p| p.name.clone()).collect()
    }

    /// Enhances one `[3, H, W]` image with values in `[0,1]`.
    fn forward(&self, py: Python<'_>, x: &PyTensor) -> PyResult<PyTensor> {
        let x = x.0.clone();
        py.detach(|| self.0.forward(&x)).map(PyTensor).map_err(to_py)
    }

    /// Trains in place on `(degraded, clean)` pairs and returns the
    /// per-epoch history as dicts. The model ends on its best epoch.
    #[pyo3(signature = (pairs, val_pairs = Vec::new(), epochs = 10, batch_size = 4, lr = 2e-4, patience = 10, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        pairs: Vec<(PyTensor, PyTensor)>,
        val_pairs: Vec<(PyTensor, PyTensor)>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        patience: usize,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let dataset = |v: Vec<(PyTensor, PyTensor)>| {
            core_training::Dataset::new(
                v.into_iter()
                    .enumerate()
                    .map(|(i, (d, c))| core_training::Pair {
                        name: format!("pair{i}"),
                        degraded: d.0,
                        clean: c.0,
                    })
                    .collect(),
            )
        };
        let (train_set, val) = (dataset(pairs), dataset(val_pairs));
        let cfg = TrainConfig {
            epochs,
            batch_size,
            adam: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            patience,
            seed,
            checkpoint: None,
        };
        let model = &mut self.0;
        let report = py
            .detach(|| core_training::train(model, &train_set, &val, &cfg))
            .map_err(to_py)?;
        report
            .history
            .epochs
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("train_loss", r.train_loss)?;
                d.set_item("val_l1", r.val_l1)?;
                d.set_item("val_psnr", db(r.val_psnr))?;
                Ok(d)
            })
            .collect()
    }

    /// Largest finite-difference relative error per parameter tensor for an
    /// L1 loss against `target`.
    fn gradcheck(&mut self, x: &PyTensor, target: &PyTensor) -> PyResult<Vec<(String, f64, bool)>> {
        let target = target.0.clone();
        let report = finite_diff_check(
            &mut self.0,
            &x.0,
            move |tape, out| {
                let t = tape.constant(target.clone());
                let d = tape.sub(out, t)?;
                let a = tape.abs(d)?;
                tape.mean(a)
            },
            &GradCheckOptions::default(),
        )
        .map_err(to_py)?;
        Ok(report
            .entries
            .into_iter()
            .map(|e| (e.name, e.max_rel_error, e.passed))
            .collect())
    }

    fn __repr__(&self) -> String {
        let c = self.0.config();
        format!("FusionModel(width={}, parameters={})", c.width, self.0.num_parameters())
    }
}

#[pymodule]
fn fusion_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(fft2, m)?)?;
    m.add_function(wrap_pyfunction!(ifft2, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(uiqm, m)?)?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_pairs, m)?)?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add("CheckpointError", m.py().get_type::<CheckpointError>())?;
    m.add("ABLATIONS", AblationConfig::PRESETS.to_vec())?;
    Ok(())
}
