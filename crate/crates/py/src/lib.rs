//! Python bindings: volumes, NIfTI I/O, normalization, phantoms, metrics,
//! patch planning, and U-Net inference.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use regionseg::metrics;
use regionseg::nifti;
use regionseg::phantom::{self, PhantomSpec};
use regionseg::preprocess;
use regionseg::regions::RegionConfig;
use regionseg::tiling;
use regionseg::train;
use regionseg::unet::{UNetConfig, UNetModel};
use std::path::PathBuf;

fn to_py_err(e: regionseg::Error) -> PyErr {
    match e {
        regionseg::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense 3-D scalar volume (x-fastest voxel order).
#[pyclass(name = "Volume", skip_from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: regionseg::Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (shape, values, spacing = (1.0, 1.0, 1.0), origin = (0.0, 0.0, 0.0)))]
    fn new(
        shape: (usize, usize, usize),
        values: Vec<f64>,
        spacing: (f64, f64, f64),
        origin: (f64, f64, f64),
    ) -> PyResult<Self> {
        regionseg::Volume::new(
            [shape.0, shape.1, shape.2],
            [spacing.0, spacing.1, spacing.2],
            [origin.0, origin.1, origin.2],
            values,
        )
        .map(|inner| Self { inner })
        .map_err(to_py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let [x, y, z] = self.inner.shape();
        (x, y, z)
    }

    #[getter]
    fn spacing(&self) -> (f64, f64, f64) {
        let [x, y, z] = self.inner.spacing();
        (x, y, z)
    }

    #[getter]
    fn origin(&self) -> (f64, f64, f64) {
        let [x, y, z] = self.inner.origin();
        (x, y, z)
    }

    fn values(&self) -> Vec<f64> {
        self.inner.voxels().to_vec()
    }

    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.inner.at(x, y, z)
    }

    fn __repr__(&self) -> String {
        let [x, y, z] = self.inner.shape();
        format!("Volume(shape=({x}, {y}, {z}))")
    }
}

/// Dense 3-D integer label map (background 0).
#[pyclass(name = "LabelMap", skip_from_py_object)]
#[derive(Clone)]
struct PyLabelMap {
    inner: regionseg::LabelMap,
}

#[pymethods]
impl PyLabelMap {
    #[new]
    #[pyo3(signature = (shape, labels, spacing = (1.0, 1.0, 1.0), origin = (0.0, 0.0, 0.0)))]
    fn new(
        shape: (usize, usize, usize),
        labels: Vec<u8>,
        spacing: (f64, f64, f64),
        origin: (f64, f64, f64),
    ) -> PyResult<Self> {
        regionseg::LabelMap::new(
            [shape.0, shape.1, shape.2],
            [spacing.0, spacing.1, spacing.2],
            [origin.0, origin.1, origin.2],
            labels,
        )
        .map(|inner| Self { inner })
        .map_err(to_py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let [x, y, z] = self.inner.shape();
        (x, y, z)
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.labels().to_vec()
    }

    fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.inner.at(x, y, z)
    }

    /// Voxel count for one label.
    fn count(&self, label: u8) -> usize {
        self.inner.count(label)
    }

    fn __repr__(&self) -> String {
        let [x, y, z] = self.inner.shape();
        format!("LabelMap(shape=({x}, {y}, {z}))")
    }
}

/// Read a single-file NIfTI-1 volume.
#[pyfunction]
fn read_volume(path: PathBuf) -> PyResult<PyVolume> {
    nifti::read_volume(&path)
        .map(|inner| PyVolume { inner })
        .map_err(to_py_err)
}

/// Write a volume as little-endian float32 NIfTI-1.
#[pyfunction]
fn write_volume(volume: &PyVolume, path: PathBuf) -> PyResult<()> {
    nifti::write_volume(&volume.inner, nifti::Datatype::Float32, &path).map_err(to_py_err)
}

#[pyfunction]
fn read_label_map(path: PathBuf) -> PyResult<PyLabelMap> {
    nifti::read_label_map(&path)
        .map(|inner| PyLabelMap { inner })
        .map_err(to_py_err)
}

/// Write a label map as uint8 NIfTI-1.
#[pyfunction]
fn write_label_map(labels: &PyLabelMap, path: PathBuf) -> PyResult<()> {
    nifti::write_label_map(&labels.inner, &path).map_err(to_py_err)
}

/// Fuzzy c-means intensity normalization: scales the volume so the brightest
/// masked tissue mode maps to 1.0. Returns (volume, centroids, scale).
#[pyfunction]
#[pyo3(signature = (volume, mask, clusters = 3))]
fn normalize_wm(
    volume: &PyVolume,
    mask: &PyLabelMap,
    clusters: usize,
) -> PyResult<(PyVolume, Vec<f64>, f64)> {
    let (out, summary) =
        preprocess::normalize_wm_detailed(&volume.inner, &mask.inner, clusters)
            .map_err(to_py_err)?;
    Ok((PyVolume { inner: out }, summary.centroids, summary.scale))
}

/// Generate a synthetic phantom. Returns (image, labels, brain_mask).
#[pyfunction]
#[pyo3(signature = (seed = 0, scale = "desk"))]
fn generate_phantom(seed: u64, scale: &str) -> PyResult<(PyVolume, PyLabelMap, PyLabelMap)> {
    let spec = match scale {
        "desk" => PhantomSpec::desk_scale(seed),
        "full" => PhantomSpec::full_scale(seed),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown scale '{other}' (expected 'desk' or 'full')"
            )))
        }
    };
    let (image, labels, mask) = phantom::generate_with_mask(&spec).map_err(to_py_err)?;
    Ok((
        PyVolume { inner: image },
        PyLabelMap { inner: labels },
        PyLabelMap { inner: mask },
    ))
}

/// Dice similarity coefficient for one label.
#[pyfunction]
fn dsc(a: &PyLabelMap, b: &PyLabelMap, label: u8) -> PyResult<f64> {
    metrics::dsc(&a.inner, &b.inner, label).map_err(to_py_err)
}

/// 95th-percentile Hausdorff distance (mm, pooled-union convention).
#[pyfunction]
fn hd95(a: &PyLabelMap, b: &PyLabelMap, label: u8) -> PyResult<f64> {
    metrics::hd95(&a.inner, &b.inner, label, b.inner.spacing()).map_err(to_py_err)
}

/// Two-sided Wilcoxon signed-rank test. Returns (w, p, exact).
#[pyfunction]
fn wilcoxon(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64, bool)> {
    metrics::wilcoxon_signed_rank(&x, &y)
        .map(|r| (r.w, r.p, r.exact))
        .map_err(to_py_err)
}

/// Plan an overlapping patch grid. Returns (num_patches, padded_shape).
#[pyfunction]
fn plan_patches(
    shape: (usize, usize, usize),
    patch_shape: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> PyResult<(usize, (usize, usize, usize))> {
    let plan = tiling::plan_patches(
        [shape.0, shape.1, shape.2],
        [patch_shape.0, patch_shape.1, patch_shape.2],
        [stride.0, stride.1, stride.2],
    )
    .map_err(to_py_err)?;
    let [px, py, pz] = plan.padded_shape;
    Ok((plan.num_patches(), (px, py, pz)))
}

/// The desk-scale region layout as JSON (boxes, labels, priorities).
#[pyfunction]
#[pyo3(signature = (scale = "desk"))]
fn region_layout_json(scale: &str) -> PyResult<String> {
    let cfg = match scale {
        "desk" => RegionConfig::desk_scale(),
        "full" => RegionConfig::full_scale(),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown scale '{other}' (expected 'desk' or 'full')"
            )))
        }
    };
    cfg.to_json_string().map_err(to_py_err)
}

/// A U-Net segmentation model.
#[pyclass(name = "UNet")]
struct PyUNet {
    inner: UNetModel,
}

#[pymethods]
impl PyUNet {
    /// Build a fresh model with He-uniform initialization.
    #[new]
    #[pyo3(signature = (channels, num_classes, seed = 0))]
    fn new(channels: Vec<usize>, num_classes: usize, seed: u64) -> PyResult<Self> {
        UNetModel::build(UNetConfig {
            resolution_steps: channels.len(),
            channels,
            num_classes,
            input_channels: 1,
            seed,
        })
        .map(|inner| Self { inner })
        .map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        UNetModel::load(&path)
            .map(|inner| Self { inner })
            .map_err(to_py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config.num_classes
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Segment one volume (inference mode, argmax over class probabilities).
    fn predict(&self, volume: &PyVolume) -> PyResult<PyLabelMap> {
        train::predict_sample(&self.inner, &volume.inner)
            .map(|inner| PyLabelMap { inner })
            .map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "UNet(steps={}, channels={:?}, classes={})",
            self.inner.config.resolution_steps,
            self.inner.config.channels,
            self.inner.config.num_classes
        )
    }
}

#[pymodule]
fn regionseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyLabelMap>()?;
    m.add_class::<PyUNet>()?;
    m.add_function(wrap_pyfunction!(read_volume, m)?)?;
    m.add_function(wrap_pyfunction!(write_volume, m)?)?;
    m.add_function(wrap_pyfunction!(read_label_map, m)?)?;
    m.add_function(wrap_pyfunction!(write_label_map, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_wm, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(plan_patches, m)?)?;
    m.add_function(wrap_pyfunction!(region_layout_json, m)?)?;
    Ok(())
}
