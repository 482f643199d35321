//! Python bindings: clouds, file I/O, synthetic data, metrics, and the
//! compress / truncate / decompress round trip with a trained checkpoint.

use std::borrow::Cow;
use std::path::PathBuf;

use progcloud::density::DropBounds;
use progcloud::entropy::{truncate, ProgressiveBitstream};
use progcloud::geometry::estimate_normals;
use progcloud::harness::checkpoint::Checkpoint;
use progcloud::io::{load_pointcloud, write_pointcloud, Format};
use progcloud::metrics::{self, PeakMode, PsnrMode, RdPoint};
use progcloud::pipeline;
use progcloud::synth::{self, Shape};
use progcloud::train::DropStrategy;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "PointCloud", module = "pyprogcloud")]
struct PyPointCloud {
    inner: progcloud::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    #[pyo3(signature = (points, source_id = "python"))]
    fn new(points: Vec<[f64; 3]>, source_id: &str) -> PyResult<Self> {
        let inner = progcloud::PointCloud::new(points, source_id).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Coordinates as a list of `[x, y, z]`.
    fn points(&self) -> Vec<[f64; 3]> {
        self.inner.coords().to_vec()
    }

    #[getter]
    fn source_id(&self) -> String {
        self.inner.source_id.clone()
    }

    /// Copy with PCA normals from `k` neighbours.
    #[pyo3(signature = (k = 16))]
    fn with_normals(&self, k: usize) -> PyResult<Self> {
        let (inner, _) = estimate_normals(&self.inner, k).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud(n={}, source_id={:?})", self.inner.len(), self.inner.source_id)
    }
}

fn format_for(path: &PathBuf, format: Option<&str>) -> PyResult<Format> {
    match format {
        Some(f) => f.parse().map_err(value_err),
        None => Format::from_path(path)
            .ok_or_else(|| PyValueError::new_err(format!("cannot infer format of {}", path.display()))),
    }
}

#[pyfunction]
#[pyo3(signature = (path, format = None))]
fn load(path: PathBuf, format: Option<&str>) -> PyResult<PyPointCloud> {
    let fmt = format_for(&path, format)?;
    let inner = load_pointcloud(&path, fmt).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(PyPointCloud { inner })
}

#[pyfunction]
#[pyo3(signature = (path, cloud, format = None))]
fn save(path: PathBuf, cloud: &PyPointCloud, format: Option<&str>) -> PyResult<()> {
    let fmt = format_for(&path, format)?;
    write_pointcloud(&path, &cloud.inner, fmt).map_err(|e| PyIOError::new_err(e.to_string()))
}

/// Seeded cloud in the unit cube; `shape` is one of `sphere`, `plane`,
/// `clusters`, and `contrast` (>= 1) skews the point density.
#[pyfunction]
#[pyo3(signature = (shape, n, contrast = 1.0, seed = 0))]
fn generate_synthetic(shape: &str, n: usize, contrast: f64, seed: u64) -> PyResult<PyPointCloud> {
    let shape: Shape = shape.parse().map_err(value_err)?;
    let inner = synth::generate_synthetic(shape, n, contrast, seed).map_err(value_err)?;
    Ok(PyPointCloud { inner })
}

#[pyfunction]
fn chamfer_distance(a: &PyPointCloud, b: &PyPointCloud) -> f64 {
    metrics::chamfer_distance(&a.inner, &b.inner)
}

/// D1 or D2 PSNR; D2 needs normals on `original`.
#[pyfunction]
#[pyo3(signature = (original, reconstruction, mode = "d1"))]
fn psnr(original: &PyPointCloud, reconstruction: &PyPointCloud, mode: &str) -> PyResult<f64> {
    let mode = match mode {
        "d1" => PsnrMode::D1,
        "d2" => PsnrMode::D2,
        other => return Err(PyValueError::new_err(format!("unknown PSNR mode '{other}'"))),
    };
    metrics::psnr_d(&original.inner, &reconstruction.inner, mode, PeakMode::Literal).map_err(value_err)
}

/// BD-rate in percent between two lists of `(bpp, psnr)` points.
#[pyfunction]
fn bd_rate(anchor: Vec<(f64, f64)>, test: Vec<(f64, f64)>) -> PyResult<f64> {
    let pts = |v: Vec<(f64, f64)>| v.into_iter().map(|(r, q)| RdPoint::new(r, q, "")).collect::<Vec<_>>();
    metrics::bd_rate(&pts(anchor), &pts(test)).map_err(value_err)
}

/// Drop ratio for a composite density score in `[0, 1]`.
#[pyfunction]
fn drop_ratio(delta: f64) -> f64 {
    DropBounds::default().rho(delta)
}

#[pyfunction]
fn truncate_stream(stream: &[u8], alpha: f64) -> PyResult<Cow<'static, [u8]>> {
    let bs = ProgressiveBitstream::from_bytes(stream).map_err(value_err)?;
    let cut = truncate(&bs, alpha).map_err(value_err)?;
    Ok(Cow::Owned(cut.to_bytes()))
}

#[pyclass(name = "Codec", module = "pyprogcloud")]
struct PyCodec {
    codec: progcloud::codec::Codec,
    strategy: DropStrategy,
    beta: f64,
}

#[pymethods]
impl PyCodec {
    /// Loads a checkpoint written by `progcloud train`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let codec = ck.codec().map_err(value_err)?;
        Ok(Self {
            codec,
            strategy: ck.run.drop.strategy,
            beta: ck.run.drop.beta,
        })
    }

    #[getter]
    fn channels(&self) -> (usize, usize) {
        (self.codec.cfg.c, self.codec.cfg.c_xyz)
    }

    #[getter]
    fn strategy(&self) -> &'static str {
        self.strategy.as_str()
    }

    /// Full progressive stream for a cloud already in the unit cube.
    fn compress(&self, cloud: &PyPointCloud) -> PyResult<Cow<'static, [u8]>> {
        let c = pipeline::compress(&self.codec, &cloud.inner, self.strategy.layout(), self.beta).map_err(value_err)?;
        Ok(Cow::Owned(c.bitstream.to_bytes()))
    }

    /// Decodes a full or truncated stream.
    fn decompress(&self, stream: &[u8]) -> PyResult<PyPointCloud> {
        let bs = ProgressiveBitstream::from_bytes(stream).map_err(value_err)?;
        let inner = pipeline::decompress(&self.codec, &bs).map_err(value_err)?;
        Ok(PyPointCloud { inner })
    }
}

#[pymodule]
fn pyprogcloud(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyCodec>()?;
    m.add_function(wrap_pyfunction!(load, m)?)?;
    m.add_function(wrap_pyfunction!(save, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_distance, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(bd_rate, m)?)?;
    m.add_function(wrap_pyfunction!(drop_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(truncate_stream, m)?)?;
    Ok(())
}
