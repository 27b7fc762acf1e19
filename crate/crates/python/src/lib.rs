//! Python bindings: tensors, filtering, masks, metrics, models and training.
//!
//! Tensors cross the boundary as flat row-major lists plus a 4-D shape.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use misf::config::RunConfig;
use misf::data::{self, Bucket, Dataset, MaskSpec};
use misf::filter::{self, Boundary, FilterConfig, Normalize};
use misf::metrics;
use misf::train::{self as training, Trainer as CoreTrainer};
use misf::{ForwardOptions, MisfModel, ModelConfig, Preset, Variant};

type CoreTensor = misf::Tensor<f64>;

fn err(e: misf::Error) -> PyErr {
    match e {
        misf::Error::Io { .. } | misf::Error::Format { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<V: std::str::FromStr<Err = misf::Error>>(s: &str) -> PyResult<V> {
    s.parse().map_err(err)
}

/// Dense `[B, C, H, W]` float64 tensor.
#[pyclass(name = "Tensor", module = "pymisf", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: CoreTensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: [usize; 4], data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: CoreTensor::from_vec(shape, data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: [usize; 4]) -> Self {
        Self {
            inner: CoreTensor::zeros(shape),
        }
    }

    #[getter]
    fn shape(&self) -> [usize; 4] {
        self.inner.shape()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn at(&self, b: usize, c: usize, y: usize, x: usize) -> PyResult<f64> {
        let [nb, nc, h, w] = self.inner.shape();
        if b >= nb || c >= nc || y >= h || x >= w {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.at(b, c, y, x))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let [b, c, h, w] = self.inner.shape();
        format!("Tensor(shape=[{b}, {c}, {h}, {w}])")
    }
}

fn wrap(inner: CoreTensor) -> PyTensor {
    PyTensor { inner }
}

/// Normalize raw kernels and filter `x` with them.
#[pyfunction]
#[pyo3(signature = (x, kernels, size=3, groups=None, normalize="softmax", boundary="replicate"))]
fn pixel_filter(
    x: &PyTensor,
    kernels: &PyTensor,
    size: usize,
    groups: Option<usize>,
    normalize: &str,
    boundary: &str,
) -> PyResult<PyTensor> {
    let groups = groups.unwrap_or(x.inner.channels());
    let cfg = FilterConfig::new(
        size,
        groups,
        parse::<Normalize>(normalize)?,
        parse::<Boundary>(boundary)?,
    )
    .map_err(err)?;
    let field = filter::normalize_kernels(&kernels.inner, cfg).map_err(err)?;
    filter::pixel_filter(&x.inner, &field).map(wrap).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (index, size=64, seed=0))]
fn fixture_image(index: usize, size: usize, seed: u64) -> PyTensor {
    wrap(data::fixture_image(index, size, seed))
}

/// Binary hole mask `[1, 1, H, W]` for bucket "0-20", "20-40" or "40-60".
#[pyfunction]
#[pyo3(signature = (bucket, seed, height=256, width=256))]
fn generate_mask(bucket: &str, seed: u64, height: usize, width: usize) -> PyResult<PyTensor> {
    let b: Bucket = parse(bucket)?;
    data::generate_mask(&MaskSpec::new(b, seed), height, width)
        .map(wrap)
        .map_err(err)
}

#[pyfunction]
fn hole_ratio(mask: &PyTensor) -> f64 {
    data::hole_ratio(&mask.inner)
}

#[pyfunction]
fn corrupt(clean: &PyTensor, mask: &PyTensor) -> PyResult<PyTensor> {
    data::corrupt(&clean.inner, &mask.inner).map(wrap).map_err(err)
}

#[pyfunction]
fn load_image(path: PathBuf) -> PyResult<PyTensor> {
    data::load_image(path).map(wrap).map_err(err)
}

#[pyfunction]
fn save_image(t: &PyTensor, path: PathBuf) -> PyResult<()> {
    data::save_image(&t.inner, 0, path).map_err(err)
}

#[pyfunction]
fn read_mtf(path: PathBuf) -> PyResult<PyTensor> {
    misf::mtf::read_as(path).map(wrap).map_err(err)
}

#[pyfunction]
fn write_mtf(path: PathBuf, t: &PyTensor) -> PyResult<()> {
    misf::mtf::write(path, &t.inner).map_err(err)
}

#[pyfunction]
fn psnr(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn ssim(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    metrics::ssim(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn l1_pct(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    metrics::l1_pct(&a.inner, &b.inner).map_err(err)
}

#[pyclass(name = "Model", module = "pymisf")]
pub struct PyModel {
    inner: MisfModel<f64>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (variant="misf", preset="misf-tiny", seed=0))]
    fn new(variant: &str, preset: &str, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::new(parse::<Preset>(preset)?, parse::<Variant>(variant)?).with_seed(seed);
        Ok(Self {
            inner: MisfModel::new(cfg).map_err(err)?,
        })
    }

    /// Load a checkpoint directory written by training.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: training::load_model(path).map_err(err)?,
        })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant().as_str()
    }

    /// Parameter count, optionally of one group ("sifb", "kpb", "disc").
    #[pyo3(signature = (group=None))]
    fn param_count(&self, group: Option<&str>) -> PyResult<usize> {
        let g = match group {
            Some(s) => Some(
                misf::param::ParamGroup::parse(s)
                    .ok_or_else(|| PyValueError::new_err(format!("unknown group `{s}`")))?,
            ),
            None => None,
        };
        Ok(self.inner.param_count(g))
    }

    /// `(prediction, composite)` for a corrupted image and its mask.
    fn inpaint(&self, image: &PyTensor, mask: &PyTensor) -> PyResult<(PyTensor, PyTensor)> {
        let (p, c) = self
            .inner
            .infer(&image.inner, &mask.inner, &ForwardOptions::default())
            .map_err(err)?;
        Ok((wrap(p), wrap(c)))
    }

    /// Feature cross-correlation at site "pre" or "post".
    fn feature_similarity(&self, corrupted: &PyTensor, clean: &PyTensor, mask: &PyTensor, site: &str) -> PyResult<f64> {
        let site: metrics::FeatureSite = parse(site)?;
        metrics::feature_similarity(&self.inner, &corrupted.inner, &clean.inner, &mask.inner, site).map_err(err)
    }
}

#[pyclass(name = "Trainer", module = "pymisf")]
pub struct PyTrainer {
    inner: CoreTrainer<f64>,
}

#[pymethods]
impl PyTrainer {
    /// `config` holds `key = value` lines; training uses fixture images.
    #[new]
    #[pyo3(signature = (config=""))]
    fn new(config: &str) -> PyResult<Self> {
        let c = RunConfig::parse(config, None).map_err(err)?;
        let size = match c.preset {
            Preset::MisfTiny => 64,
            Preset::Full256 => 256,
        };
        let data = Dataset::fixtures(0..c.fixture_count, size, c.bucket, c.seed).map_err(err)?;
        Ok(Self {
            inner: CoreTrainer::new(c, data).map_err(err)?,
        })
    }

    #[getter]
    fn step_count(&self) -> usize {
        self.inner.step
    }

    /// One optimizer step; returns the logged losses.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let m = self.inner.train_step().map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("iter", m.iter)?;
        d.set_item("l1", m.losses.l1)?;
        d.set_item("gan", m.losses.gan)?;
        d.set_item("perc", m.losses.perceptual)?;
        d.set_item("style", m.losses.style)?;
        d.set_item("total", m.losses.total)?;
        d.set_item("disc", m.disc)?;
        d.set_item("psnr_train", m.psnr_train)?;
        Ok(d)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(path).map_err(err)
    }
}

#[pymodule]
fn pymisf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(pixel_filter, m)?)?;
    m.add_function(wrap_pyfunction!(fixture_image, m)?)?;
    m.add_function(wrap_pyfunction!(generate_mask, m)?)?;
    m.add_function(wrap_pyfunction!(hole_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt, m)?)?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(save_image, m)?)?;
    m.add_function(wrap_pyfunction!(read_mtf, m)?)?;
    m.add_function(wrap_pyfunction!(write_mtf, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(l1_pct, m)?)?;
    Ok(())
}
