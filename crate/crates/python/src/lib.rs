//! Python module `embryoseg_py`: volumes, phantoms, networks and the
//! inference, pose and metric operations.

use std::path::PathBuf;

use embryoseg::classify;
use embryoseg::inference::{self, BlendMode};
use embryoseg::metrics::{self, ConfusionMatrix, Phenotype};
use embryoseg::nets::{self, NetworkKind, NetworkSpec};
use embryoseg::phantom::{self, PhantomConfig};
use embryoseg::pose;
use embryoseg::volio::{self, Dtype};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_kind(kind: &str) -> PyResult<NetworkKind> {
    match kind {
        "localizer" => Ok(NetworkKind::Localizer),
        "fcn_segmenter" => Ok(NetworkKind::FcnSegmenter),
        "classifier" => Ok(NetworkKind::Classifier),
        other => Err(PyValueError::new_err(format!(
            "kind must be localizer, fcn_segmenter or classifier, got {other:?}"
        ))),
    }
}

/// A 3D volume; `dims` are `(x, y, z)` with x varying fastest in `values`.
#[pyclass(name = "Volume", module = "embryoseg_py", skip_from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: volio::Volume,
}

#[pymethods]
impl PyVolume {
    /// Scalar volume from flat values, or a 0/1 mask when `mask` is true.
    #[new]
    #[pyo3(signature = (dims, values, mask = false))]
    fn new(dims: [usize; 3], values: Vec<f32>, mask: bool) -> PyResult<Self> {
        let inner = if mask {
            volio::Volume::label(dims, values.iter().map(|&v| (v != 0.0) as u8).collect())
        } else {
            volio::Volume::scalar(dims, values)
        }
        .map_err(value_err)?;
        Ok(PyVolume { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let inner = volio::read_volume(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(PyVolume { inner })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        volio::write_volume(&self.inner, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn spacing(&self) -> [f32; 3] {
        self.inner.spacing()
    }

    #[getter]
    fn is_mask(&self) -> bool {
        self.inner.dtype() == Dtype::Label8
    }

    fn values(&self) -> Vec<f32> {
        self.inner.to_f32()
    }

    fn count_nonzero(&self) -> usize {
        self.inner.count_nonzero()
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        self.inner.to_bytes().map_err(value_err)
    }

    #[staticmethod]
    fn from_bytes(bytes: Vec<u8>) -> PyResult<Self> {
        Ok(PyVolume {
            inner: volio::Volume::from_bytes(&bytes).map_err(value_err)?,
        })
    }

    /// Per-volume z-scored copy.
    fn normalized(&self) -> PyResult<Self> {
        Ok(PyVolume {
            inner: volio::normalize_intensity(&self.inner).map_err(value_err)?,
        })
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "Volume(dims={:?}, dtype={:?})",
            self.inner.dims(),
            self.inner.dtype()
        )
    }
}

/// A network with its parameters.
#[pyclass(name = "Network", module = "embryoseg_py")]
struct PyNetwork {
    inner: nets::Network,
}

#[pymethods]
impl PyNetwork {
    /// Freshly initialized network of `kind` with base width `width`.
    #[new]
    #[pyo3(signature = (kind, width, dims, seed = 0))]
    fn new(kind: &str, width: usize, dims: [usize; 3], seed: u64) -> PyResult<Self> {
        let spec = NetworkSpec::new(parse_kind(kind)?, width, dims);
        Ok(PyNetwork {
            inner: nets::build(&spec, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = nets::load_checkpoint(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(PyNetwork { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        nets::save_checkpoint(&self.inner, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner.spec().kind {
            NetworkKind::Localizer => "localizer",
            NetworkKind::FcnSegmenter => "fcn_segmenter",
            NetworkKind::Classifier => "classifier",
        }
    }

    #[getter]
    fn input_dims(&self) -> [usize; 3] {
        self.inner.spec().input_dims
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn weight_layer_count(&self) -> usize {
        self.inner.weight_layer_count()
    }
}

/// Generates one phantom; returns a dict with `image`, `body_mask`,
/// `bv_mask`, `mid_lobe_mask` and `label`.
#[pyfunction]
#[pyo3(signature = (seed, mutant, vol_dims = [64, 64, 64], noise_level = 0.15))]
fn generate_phantom<'py>(
    py: Python<'py>,
    seed: u64,
    mutant: bool,
    vol_dims: [usize; 3],
    noise_level: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = PhantomConfig {
        vol_dims,
        noise_level,
        seed,
        ..PhantomConfig::default()
    };
    let s = phantom::generate_phantom(&cfg, Phenotype::from_mutant(mutant)).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item(
        "mid_lobe_mask",
        PyVolume {
            inner: s.lobe_mask(phantom::LOBE_MID),
        },
    )?;
    d.set_item("image", PyVolume { inner: s.image })?;
    d.set_item("body_mask", PyVolume { inner: s.body_mask })?;
    d.set_item("bv_mask", PyVolume { inner: s.bv_mask })?;
    d.set_item("label", s.label.as_str())?;
    Ok(d)
}

#[pyfunction]
fn dice(a: &PyVolume, b: &PyVolume) -> PyResult<f64> {
    metrics::dice(&a.inner, &b.inner).map_err(value_err)
}

/// Accuracy, sensitivity and specificity of a confusion matrix; `None`
/// where undefined.
#[pyfunction]
fn summarize(tp: u64, fn_: u64, fp: u64, tn: u64) -> (Option<f64>, Option<f64>, Option<f64>) {
    let s = metrics::summarize(&ConfusionMatrix::new(tp, fn_, fp, tn));
    (s.accuracy, s.sensitivity, s.specificity)
}

#[pyfunction]
fn canonicalize(mask: &PyVolume, out_dims: [usize; 3]) -> PyResult<PyVolume> {
    Ok(PyVolume {
        inner: pose::canonicalize(&mask.inner, out_dims).map_err(value_err)?,
    })
}

/// Mutant probability and label for a canonical mask.
#[pyfunction]
fn predict(mask: &PyVolume, classifier: &PyNetwork) -> PyResult<(String, f32)> {
    let p = classify::predict(&mask.inner, &classifier.inner).map_err(value_err)?;
    Ok((p.label.as_str().to_string(), p.prob_mutant))
}

/// Thresholded gradient saliency map of the predicted class.
#[pyfunction]
fn saliency(mask: &PyVolume, classifier: &PyNetwork) -> PyResult<PyVolume> {
    let s = classify::saliency(&mask.inner, &classifier.inner).map_err(value_err)?;
    Ok(PyVolume { inner: s.map })
}

/// Sliding-window body segmentation of a normalized volume.
#[pyfunction]
#[pyo3(signature = (volume, fcn, stride, blend = "weighted"))]
fn segment_body(
    volume: &PyVolume,
    fcn: &PyNetwork,
    stride: [usize; 3],
    blend: &str,
) -> PyResult<PyVolume> {
    let mode =
        BlendMode::parse(blend).ok_or_else(|| value_err("blend must be weighted or uniform"))?;
    Ok(PyVolume {
        inner: inference::segment_body(&volume.inner, &fcn.inner, stride, mode)
            .map_err(value_err)?,
    })
}

/// Localizes and segments the ventricle of a normalized volume; returns the
/// mask and the detected center.
#[pyfunction]
#[pyo3(signature = (volume, localizer, fcn, stride, keep_largest_component = true))]
fn segment_bv(
    volume: &PyVolume,
    localizer: &PyNetwork,
    fcn: &PyNetwork,
    stride: [usize; 3],
    keep_largest_component: bool,
) -> PyResult<(PyVolume, [usize; 3])> {
    let (mask, loc) = inference::segment_bv(
        &volume.inner,
        &localizer.inner,
        &fcn.inner,
        stride,
        keep_largest_component,
    )
    .map_err(value_err)?;
    Ok((PyVolume { inner: mask }, loc.center))
}

#[pymodule]
fn embryoseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(canonicalize, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(saliency, m)?)?;
    m.add_function(wrap_pyfunction!(segment_body, m)?)?;
    m.add_function(wrap_pyfunction!(segment_bv, m)?)?;
    Ok(())
}
