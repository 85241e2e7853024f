//! Python bindings: phantoms, metrics, exact attention and model inference.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tavit_core::data::{generate_dataset as core_generate, GenConfig, PhantomConfig};
use tavit_core::metrics;
use tavit_core::models::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig};
use tavit_core::nn::Conditioning;
use tavit_core::tensor::attention::{attention_naive, attention_tiled};
use tavit_core::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::ShapeMismatch { .. }
        | Error::InvalidShape { .. }
        | Error::InvalidArgument(_)
        | Error::UndefinedCorrelation(_)
        | Error::ZeroExtent(_)
        | Error::Config(_)
        | Error::CheckpointMismatch(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// One synthetic patient; volumes are flat `[depth, size, size]` lists.
#[pyclass(get_all, frozen)]
pub struct Phantom {
    extents: (usize, usize, usize),
    t1w: Vec<f32>,
    flair: Vec<f32>,
    t1c: Vec<f32>,
    labels: Vec<u8>,
    has_tumor: bool,
}

#[pyfunction]
#[pyo3(signature = (seed, size = 64, depth = 32, tumor_probability = 0.9))]
fn phantom(seed: u64, size: usize, depth: usize, tumor_probability: f64) -> PyResult<Phantom> {
    let p = tavit_core::data::generate_phantom(
        seed,
        &PhantomConfig {
            size,
            depth,
            tumor_probability,
        },
    )
    .map_err(py_err)?;
    let [d, h, w] = p.extents;
    Ok(Phantom {
        extents: (d, h, w),
        t1w: p.t1w,
        flair: p.flair,
        t1c: p.t1c,
        labels: p.labels,
        has_tumor: p.has_tumor,
    })
}

/// Writes a phantom dataset and returns its content hash as hex.
#[pyfunction]
#[pyo3(signature = (dir, patients = 64, image_size = 64, depth = 32, seed = 0))]
fn generate_dataset(dir: PathBuf, patients: usize, image_size: usize, depth: usize, seed: u64) -> PyResult<String> {
    let cfg = GenConfig {
        patients,
        image_size,
        depth,
        seed,
        ..GenConfig::default()
    };
    core_generate(&dir, &cfg).map(|h| format!("{h:016x}")).map_err(py_err)
}

#[pyfunction]
fn dsc(gt: Vec<bool>, pred: Vec<bool>) -> PyResult<f64> {
    metrics::dsc(&gt, &pred).map_err(py_err)
}

#[pyfunction]
fn jaccard(gt: Vec<bool>, pred: Vec<bool>) -> PyResult<f64> {
    metrics::jaccard(&gt, &pred).map_err(py_err)
}

#[pyfunction]
fn rmsd(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::rmsd(&x, &y).map_err(py_err)
}

#[pyfunction]
fn nmse(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::nmse(&x, &y).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (x, y, max_i = 1.0))]
fn psnr(x: Vec<f64>, y: Vec<f64>, max_i: f64) -> PyResult<f64> {
    metrics::psnr(&x, &y, max_i).map_err(py_err)
}

#[pyfunction]
fn ncc(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::ncc(&x, &y).map_err(py_err)
}

#[pyfunction]
fn ssim(x: Vec<f64>, y: Vec<f64>, extents: (usize, usize, usize)) -> PyResult<f64> {
    metrics::ssim(&x, &y, [extents.0, extents.1, extents.2]).map_err(py_err)
}

/// Two-sided paired t-test; returns `(t, p)`.
#[pyfunction]
fn paired_ttest(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64)> {
    metrics::paired_ttest(&a, &b).map(|t| (t.t, t.p)).map_err(py_err)
}

/// Softmax attention over flat `[batch, heads, tokens, dim]` inputs. With
/// a `tile` the online-softmax kernel is used, otherwise the dense one.
#[pyfunction]
#[pyo3(signature = (q, k, v, shape, tile = None))]
fn attention(q: Vec<f64>, k: Vec<f64>, v: Vec<f64>, shape: Vec<usize>, tile: Option<usize>) -> PyResult<Vec<f64>> {
    let t = |d: Vec<f64>| Tensor::from_vec(&shape, d).map_err(py_err);
    let (q, k, v) = (t(q)?, t(k)?, t(v)?);
    let out = match tile {
        Some(tile) => attention_tiled(&q, &k, &v, tile),
        None => attention_naive(&q, &k, &v),
    };
    out.map(Tensor::into_data).map_err(py_err)
}

/// A segmenter, latent encoder or synthesis network in inference mode.
#[pyclass(unsendable)]
pub struct Model {
    inner: tavit_core::models::Model<f32>,
}

#[pymethods]
impl Model {
    /// Fresh desk-size network; `conditioned` builds a TA-ViT.
    #[new]
    #[pyo3(signature = (in_channels = 2, image_size = 64, conditioned = false, seed = 0))]
    fn new(in_channels: usize, image_size: usize, conditioned: bool, seed: u64) -> PyResult<Self> {
        let conditioning = if conditioned {
            Conditioning::AdalnZero
        } else {
            Conditioning::None
        };
        let cfg = ModelConfig {
            image_size,
            ..ModelConfig::desk(in_channels, conditioning)
        };
        let inner = tavit_core::models::Model::build(&cfg, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_checkpoint(&path).and_then(|c| c.to_model()).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&Checkpoint::from_model(&self.inner, 0, None, ""), &path).map_err(py_err)
    }

    #[getter]
    fn in_channels(&self) -> usize {
        self.inner.config().in_channels
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.config().image_size
    }

    #[getter]
    fn conditioned(&self) -> bool {
        self.inner.is_conditioned()
    }

    /// `(channels, side, side)` of one latent slice.
    #[getter]
    fn latent_shape(&self) -> (usize, usize, usize) {
        let c = self.inner.config();
        (c.latent_channels, c.bottleneck_size(), c.bottleneck_size())
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().num_trainable()
    }

    /// Maps a flat `[batch, in_channels, size, size]` input in `[-1, 1]` to
    /// a flat `[batch, 1, size, size]` output.
    #[pyo3(signature = (x, batch, latent = None))]
    fn predict(&mut self, x: Vec<f32>, batch: usize, latent: Option<Vec<f32>>) -> PyResult<Vec<f32>> {
        let s = self.image_size();
        let x = Tensor::from_vec(&[batch, self.in_channels(), s, s], x).map_err(py_err)?;
        let (c, h, w) = self.latent_shape();
        let lat = latent
            .map(|l| Tensor::from_vec(&[batch, c, h, w], l))
            .transpose()
            .map_err(py_err)?;
        self.inner
            .predict(&x, lat.as_ref())
            .map(Tensor::into_data)
            .map_err(py_err)
    }

    /// Bottleneck features of a flat `[batch, 1, size, size]` input.
    fn extract_latent(&mut self, x: Vec<f32>, batch: usize) -> PyResult<Vec<f32>> {
        let s = self.image_size();
        let x = Tensor::from_vec(&[batch, 1, s, s], x).map_err(py_err)?;
        self.inner.extract_latent(&x).map(Tensor::into_data).map_err(py_err)
    }
}

#[pymodule]
fn tavit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Phantom>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(rmsd, m)?)?;
    m.add_function(wrap_pyfunction!(nmse, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ncc, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(paired_ttest, m)?)?;
    m.add_function(wrap_pyfunction!(attention, m)?)?;
    Ok(())
}
