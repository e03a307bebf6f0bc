#![allow(clippy::useless_conversion)]

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use warpdiff_core::attention::{self, AttentionParams};
use warpdiff_core::automask::{self, GtConfig};
use warpdiff_core::data_synth::{self, DataConfig, TryOnSample};
use warpdiff_core::diffusion::make_schedule;
use warpdiff_core::evaluation;
use warpdiff_core::harness::{self, Command, Invocation, RunConfig};
use warpdiff_core::image::Image;
use warpdiff_core::nn::ParamStore;
use warpdiff_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Version { .. } | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Dataset { .. } | Error::Format(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn candle_err(e: candle_core::Error) -> PyErr {
    py_err(Error::from(e))
}

/// An `H×W×C` float image in `[0, 1]`, stored row-major.
#[pyclass(name = "Image", module = "warpdiff")]
#[derive(Clone)]
struct PyImage {
    inner: Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> PyResult<Self> {
        let inner = Image::from_vec(height, width, channels, data).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.dims()
    }

    fn data(&self) -> Vec<f32> {
        self.inner.data.clone()
    }

    fn get(&self, y: usize, x: usize, c: usize) -> PyResult<f32> {
        let (h, w, ch) = self.inner.dims();
        if y >= h || x >= w || c >= ch {
            return Err(PyValueError::new_err(format!("({y}, {x}, {c}) is outside {:?}", self.inner.dims())));
        }
        Ok(self.inner.get(y, x, c))
    }

    fn mean(&self) -> f32 {
        self.inner.mean()
    }

    fn count_nonzero(&self) -> usize {
        self.inner.count_nonzero()
    }

    fn __repr__(&self) -> String {
        let (h, w, c) = self.inner.dims();
        format!("Image({h}x{w}x{c})")
    }
}

fn wrap(img: &Image) -> PyImage {
    PyImage { inner: img.clone() }
}

/// One synthetic try-on example.
#[pyclass(name = "Sample", module = "warpdiff")]
struct PySample {
    inner: TryOnSample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[staticmethod]
    fn fields() -> Vec<&'static str> {
        TryOnSample::FIELDS.to_vec()
    }

    fn field(&self, name: &str) -> PyResult<PyImage> {
        self.inner
            .field(name)
            .map(wrap)
            .ok_or_else(|| PyValueError::new_err(format!("unknown field {name:?}")))
    }

    /// Laplacian ground-truth mask of the warped garment at latent resolution.
    fn laplacian_gt(&self) -> PyResult<PyImage> {
        let gt = automask::laplacian_gt(&self.inner.warped_garment, &self.inner.warped_mask, &GtConfig::default()).map_err(py_err)?;
        Ok(PyImage { inner: gt })
    }

    fn paste_baseline(&self) -> PyResult<PyImage> {
        let s = &self.inner;
        let out = evaluation::paste_baseline(&s.agnostic_image, &s.warped_garment, &s.warped_mask).map_err(py_err)?;
        Ok(PyImage { inner: out })
    }
}

#[pyfunction]
#[pyo3(signature = (seed, height = 64, width = 48, warp_strength = 1.0))]
fn gen_sample(seed: u64, height: usize, width: usize, warp_strength: f64) -> PyResult<PySample> {
    let cfg = DataConfig {
        height,
        width,
        warp_strength,
        ..DataConfig::default()
    };
    let inner = data_synth::gen_sample(seed, &cfg).map_err(py_err)?;
    Ok(PySample { inner })
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    evaluation::ssim(&a.inner, &b.inner).map_err(py_err)
}

#[pyfunction]
fn masked_ssim(a: &PyImage, b: &PyImage, mask: &PyImage) -> PyResult<f64> {
    evaluation::masked_ssim(&a.inner, &b.inner, &mask.inner).map_err(py_err)
}

#[pyfunction]
fn masked_l1(a: &PyImage, b: &PyImage, mask: &PyImage) -> PyResult<f64> {
    evaluation::masked_l1(&a.inner, &b.inner, &mask.inner).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, threshold = 0.5))]
fn mask_iou(a: &PyImage, b: &PyImage, threshold: f32) -> PyResult<f64> {
    evaluation::mask_iou(&a.inner, &b.inner, threshold).map_err(py_err)
}

#[pyfunction]
fn toy_fid(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    evaluation::toy_fid(&a, &b).map_err(py_err)
}

#[pyfunction]
fn mac_count(hl: usize, wl: usize, c: usize, w: usize) -> u64 {
    attention::mac_count(hl, wl, c, w)
}

#[pyfunction]
fn mac_count_full(hl: usize, wl: usize, c: usize) -> u64 {
    attention::mac_count_full(hl, wl, c)
}

/// Cumulative products `ᾱ_t` of the linear beta schedule.
#[pyfunction]
#[pyo3(signature = (t, beta_1 = 1e-4, beta_t = 0.02))]
fn alpha_bars(t: usize, beta_1: f64, beta_t: f64) -> PyResult<Vec<f64>> {
    Ok(make_schedule(t, beta_1, beta_t).map_err(py_err)?.alpha_bars)
}

/// Windowed cross attention of `x` (`H×W×C`) over garment tokens `g`, with
/// projection weights drawn from `seed`. Returns the flat `H×W×C` output.
#[pyfunction]
#[pyo3(signature = (x, g, mask, height, width, channels, window, n_heads = 4, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn local_cross_attention(
    x: Vec<f32>,
    g: Vec<f32>,
    mask: Vec<f32>,
    height: usize,
    width: usize,
    channels: usize,
    window: usize,
    n_heads: usize,
    seed: u64,
) -> PyResult<Vec<f32>> {
    let dev = Device::Cpu;
    let x = Tensor::from_vec(x, (height, width, channels), &dev).map_err(candle_err)?;
    let g = Tensor::from_vec(g, (height, width, channels), &dev).map_err(candle_err)?;
    let mask = Tensor::from_vec(mask, (height, width), &dev).map_err(candle_err)?;
    let store = ParamStore::new(seed, DType::F32, dev);
    let params = AttentionParams::new(&store.root().pp("attn"), channels, n_heads, channels).map_err(py_err)?;
    let out = attention::local_cross_attention(&x, &g, &mask, window, &params).map_err(py_err)?;
    out.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(candle_err)
}

/// A resolved run configuration.
#[pyclass(name = "RunConfig", module = "warpdiff")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (path = None, overrides = Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        let inner = RunConfig::load(path.as_deref(), &overrides).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(py_err)
    }

    #[getter]
    fn run_dir(&self) -> PathBuf {
        self.inner.paths.run_dir.clone()
    }
}

fn command(name: &str) -> PyResult<Command> {
    Ok(match name {
        "make-data" => Command::MakeData,
        "train-codec" => Command::TrainCodec,
        "train" => Command::Train,
        "sample" => Command::Sample,
        "eval" => Command::Eval,
        "bench-attn" => Command::BenchAttn,
        "viz-mask" => Command::VizMask,
        other => return Err(PyValueError::new_err(format!("unknown command {other:?}"))),
    })
}

/// Runs one pipeline stage, as the `warpdiff` command line does.
#[pyfunction]
#[pyo3(signature = (name, out, config = None, overrides = Vec::new(), force = false))]
fn run(py: Python<'_>, name: &str, out: PathBuf, config: Option<PathBuf>, overrides: Vec<String>, force: bool) -> PyResult<()> {
    let cmd = command(name)?;
    let inv = Invocation {
        config,
        overrides,
        out: Some(out),
        force,
    };
    py.allow_threads(|| harness::run(cmd, &inv)).map_err(py_err)
}

#[pymodule]
fn warpdiff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(gen_sample, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(masked_ssim, m)?)?;
    m.add_function(wrap_pyfunction!(masked_l1, m)?)?;
    m.add_function(wrap_pyfunction!(mask_iou, m)?)?;
    m.add_function(wrap_pyfunction!(toy_fid, m)?)?;
    m.add_function(wrap_pyfunction!(mac_count, m)?)?;
    m.add_function(wrap_pyfunction!(mac_count_full, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_bars, m)?)?;
    m.add_function(wrap_pyfunction!(local_cross_attention, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
