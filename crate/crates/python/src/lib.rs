//! Python bindings. Cubes cross the boundary as flat band-major lists plus a
//! `(bands, height, width)` shape, so numpy users can `reshape` directly.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use specfuse::config::RunConfig;
use specfuse::cube::{read_cube, write_cube, ImageCube};
use specfuse::metrics::evaluate as evaluate_metrics;
use specfuse::observation::{
    blur_bands, downsample, simulate_scenario, snr_to_variance, spectral_degrade, BlurKernel, NoiseSpec,
    ObservationModel, SnrConvention, SpectralResponse, SyntheticSpec,
};
use specfuse::pipeline::{fuse_prepared, prepare, LearningParams};
use specfuse::solver::SolverParams;
use specfuse::subspace::{learn_pca as learn_basis, SubspaceBasis};
use specfuse::workflow::{run, RunOptions};
use specfuse::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Config(_)
        | Error::Format(_)
        | Error::Corruption(_)
        | Error::Shape(_)
        | Error::InvalidArgument(_)
        | Error::Degenerate(_)
        | Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// A `bands x height x width` image.
#[pyclass(name = "Cube", module = "pyspecfuse")]
pub struct PyCube {
    inner: ImageCube,
}

#[pymethods]
impl PyCube {
    #[new]
    fn new(bands: usize, height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        ImageCube::new(bands, height, width, data).map(|inner| PyCube { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        read_cube(path).map(|inner| PyCube { inner }).map_err(to_py)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_cube(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.n_bands(), self.inner.height(), self.inner.width())
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn band(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.n_bands() {
            return Err(PyValueError::new_err(format!("band {i} out of range")));
        }
        Ok(self.inner.band(i).to_vec())
    }

    fn __repr__(&self) -> String {
        let (b, h, w) = self.shape();
        format!("Cube(bands={b}, height={h}, width={w})")
    }
}

/// Blur, decimation, spectral response and noise variances.
#[pyclass(name = "ObservationModel", module = "pyspecfuse")]
pub struct PyModel {
    inner: ObservationModel,
}

#[pymethods]
impl PyModel {
    /// Exponential blur kernel and equal-width box responses; variances
    /// follow from the SNRs (in dB, mean signal power) on the clean
    /// observations of `reference`.
    #[staticmethod]
    #[pyo3(signature = (reference, d=4, kernel_size=5, kernel_scale=1.0, ms_bands=4, hs_snr_db=35.0, ms_snr_db=30.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn for_reference(
        reference: &PyCube,
        d: usize,
        kernel_size: usize,
        kernel_scale: f64,
        ms_bands: usize,
        hs_snr_db: f64,
        ms_snr_db: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let x = &reference.inner;
        let blur = BlurKernel::exponential(kernel_size, kernel_scale).map_err(to_py)?;
        let response = SpectralResponse::box_filters(x.n_bands(), ms_bands).map_err(to_py)?;
        let clean_h = downsample(&blur_bands(x, &blur).map_err(to_py)?, d, (0, 0)).map_err(to_py)?;
        let clean_m = spectral_degrade(x, &response).map_err(to_py)?;
        let hs = snr_to_variance(&clean_h, &vec![hs_snr_db; x.n_bands()], SnrConvention::MeanPower).map_err(to_py)?;
        let ms = snr_to_variance(&clean_m, &vec![ms_snr_db; ms_bands], SnrConvention::MeanPower).map_err(to_py)?;
        Ok(PyModel {
            inner: ObservationModel {
                blur,
                d,
                phase: (0, 0),
                response,
                noise: NoiseSpec {
                    hs_variances: hs,
                    ms_variances: ms,
                    rng_seed: seed,
                },
            },
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text)
            .map(|inner| PyModel { inner })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("model serialises")
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn hs_variances(&self) -> Vec<f64> {
        self.inner.noise.hs_variances.clone()
    }

    #[getter]
    fn ms_variances(&self) -> Vec<f64> {
        self.inner.noise.ms_variances.clone()
    }
}

#[pyclass(name = "SubspaceBasis", module = "pyspecfuse")]
pub struct PyBasis {
    inner: SubspaceBasis,
}

#[pymethods]
impl PyBasis {
    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn energy_fraction(&self) -> f64 {
        self.inner.energy_fraction()
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues().to_vec()
    }

    fn project(&self, cube: &PyCube) -> PyResult<PyCube> {
        self.inner.project(&cube.inner).map(|inner| PyCube { inner }).map_err(to_py)
    }

    fn reconstruct(&self, u: &PyCube) -> PyResult<PyCube> {
        self.inner.reconstruct(&u.inner).map(|inner| PyCube { inner }).map_err(to_py)
    }
}

#[pyfunction]
#[pyo3(signature = (width, height, bands, endmembers=5, regions=12, seed=0, scale=50.0))]
#[allow(clippy::too_many_arguments)]
fn synthetic_reference(
    width: usize,
    height: usize,
    bands: usize,
    endmembers: usize,
    regions: usize,
    seed: u64,
    scale: f64,
) -> PyResult<PyCube> {
    let spec = SyntheticSpec {
        width,
        height,
        bands,
        endmembers,
        regions,
        seed,
        scale,
    };
    specfuse::observation::synthetic_reference(&spec).map(|inner| PyCube { inner }).map_err(to_py)
}

/// Returns `(y_h, y_m, hs_noise_norm)`.
#[pyfunction]
fn simulate(reference: &PyCube, model: &PyModel) -> PyResult<(PyCube, PyCube, f64)> {
    let sim = simulate_scenario(&reference.inner, &model.inner).map_err(to_py)?;
    Ok((PyCube { inner: sim.y_h }, PyCube { inner: sim.y_m }, sim.hs_noise_norm))
}

#[pyfunction]
#[pyo3(signature = (cube, dim, center=true))]
fn learn_pca(cube: &PyCube, dim: usize, center: bool) -> PyResult<PyBasis> {
    learn_basis(&cube.inner, dim, center).map(|inner| PyBasis { inner }).map_err(to_py)
}

/// Metric report as a dict with the same keys as the JSON report.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, reference: &PyCube, fused: &PyCube, m_over_n: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = evaluate_metrics(&reference.inner, &fused.inner, m_over_n).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("rmse_paper", r.rmse_paper)?;
    d.set_item("rmse_sqrt", r.rmse_sqrt)?;
    d.set_item("sam_deg", r.sam_deg)?;
    d.set_item("uiqi", r.uiqi)?;
    d.set_item("ergas", r.ergas)?;
    d.set_item("dd", r.dd)?;
    d.set_item("per_band_rmse", r.per_band_rmse)?;
    d.set_item("sam_skipped_pixels", r.sam_skipped_pixels)?;
    Ok(d)
}

/// Full pipeline. Returns `(x_hat, x_rough, objective_trace, converged)`;
/// `mu` defaults to `0.05 / hs_noise_norm` when that norm is given.
#[pyfunction]
#[pyo3(signature = (y_h, y_m, model, lam=5.0, mu=None, hs_noise_norm=None, dim=5, patch_side=6, stride=2, n_atoms=256, sparsity=4, epochs=20, seed=0, inner_iters=40, max_outer=50))]
#[allow(clippy::too_many_arguments)]
fn fuse(
    py: Python<'_>,
    y_h: &PyCube,
    y_m: &PyCube,
    model: &PyModel,
    lam: f64,
    mu: Option<f64>,
    hs_noise_norm: Option<f64>,
    dim: usize,
    patch_side: usize,
    stride: usize,
    n_atoms: usize,
    sparsity: usize,
    epochs: usize,
    seed: u64,
    inner_iters: usize,
    max_outer: usize,
) -> PyResult<(PyCube, PyCube, Vec<f64>, bool)> {
    let mu = match (mu, hs_noise_norm) {
        (Some(m), _) => m,
        (None, Some(n)) if n > 0.0 => 0.05 / n,
        _ => return Err(PyValueError::new_err("pass mu or a positive hs_noise_norm")),
    };
    let mut learning = LearningParams {
        dim,
        patch_side,
        stride,
        sparsity,
        ..LearningParams::default()
    };
    learning.odl.n_atoms = n_atoms;
    learning.odl.epochs = epochs;
    learning.odl.seed = seed;
    let solver = SolverParams {
        mu,
        inner_iters,
        max_outer,
        ..SolverParams::default()
    };
    let (yh, ym, m) = (&y_h.inner, &y_m.inner, &model.inner);
    let (prepared, result) = py
        .detach(|| {
            let prepared = prepare(yh, ym, m, &learning)?;
            let result = fuse_prepared(yh, ym, m, &prepared, lam, &solver, None)?;
            Ok::<_, Error>((prepared, result))
        })
        .map_err(to_py)?;
    Ok((
        PyCube { inner: result.x_hat },
        PyCube { inner: prepared.x_rough },
        result.trace.iter().map(|t| t.objective).collect(),
        result.converged,
    ))
}

/// Runs the workflow named in a JSON config file.
#[pyfunction]
#[pyo3(signature = (config, out=None, seed=None))]
fn run_config(py: Python<'_>, config: PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<()> {
    let cfg = RunConfig::load(&config).map_err(to_py)?;
    let opts = RunOptions {
        out_dir: out,
        seed,
        ..RunOptions::default()
    };
    py.detach(|| run(&cfg, &opts)).map_err(to_py)
}

#[pymodule]
fn pyspecfuse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCube>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyBasis>()?;
    m.add_function(wrap_pyfunction!(synthetic_reference, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(learn_pca, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
