//! Python bindings: tensors, spectra, FEM, the segmentation model, data and
//! metrics, and the gradient and invariant harnesses.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use freqseg::data::{generate_scene as gen_scene, Mask, SceneConfig};
use freqseg::fem::{fem_enhance as fem_enhance_var, FemConfig, FemInput};
use freqseg::gradcheck::{grad_check as run_grad_check, Component};
use freqseg::metrics::{boundary_f_score as bf_score, ConfusionMatrix};
use freqseg::model::{Model as CoreModel, ModelConfig};
use freqseg::numerics::{Graph, Tensor as CoreTensor};
use freqseg::spectral::{self, BandMode, ComplexTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: freqseg::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<V: std::str::FromStr<Err = freqseg::Error>>(s: &str) -> PyResult<V> {
    s.parse().map_err(err)
}

/// Dense row-major `f64` tensor.
#[pyclass(module = "pyfreqseg", from_py_object)]
#[derive(Clone)]
pub struct Tensor {
    inner: CoreTensor<f64>,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Tensor {
            inner: CoreTensor::new(shape, data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Tensor {
            inner: CoreTensor::zeros(shape),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (shape, std=1.0, seed=0))]
    fn randn(shape: Vec<usize>, std: f64, seed: u64) -> Self {
        Tensor {
            inner: CoreTensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Centered, orthonormal spectrum of an `[h, w, c]` map.
#[pyclass(module = "pyfreqseg", from_py_object)]
#[derive(Clone)]
pub struct Spectrum {
    inner: spectral::Spectrum<f64>,
}

#[pymethods]
impl Spectrum {
    #[getter]
    fn re(&self) -> Tensor {
        Tensor {
            inner: self.inner.bands.re.clone(),
        }
    }

    #[getter]
    fn im(&self) -> Tensor {
        Tensor {
            inner: self.inner.bands.im.clone(),
        }
    }

    fn energy(&self) -> f64 {
        self.inner.bands.energy()
    }

    fn __repr__(&self) -> String {
        format!("Spectrum(shape={:?})", self.inner.bands.shape())
    }
}

#[pyfunction]
fn dfft2(x: &Tensor) -> PyResult<Spectrum> {
    Ok(Spectrum {
        inner: spectral::dfft2(&x.inner).map_err(err)?,
    })
}

#[pyfunction]
fn idfft2(s: &Spectrum) -> PyResult<Tensor> {
    Ok(Tensor {
        inner: spectral::idfft2(&s.inner).map_err(err)?,
    })
}

/// `(high, low)` spectra for threshold `tau` in `radial` or `magnitude` mode.
#[pyfunction]
#[pyo3(signature = (s, tau=0.5, mode="radial"))]
fn split_bands(s: &Spectrum, tau: f64, mode: &str) -> PyResult<(Spectrum, Spectrum)> {
    let b = spectral::split_bands(&s.inner, tau, parse(mode)?).map_err(err)?;
    let wrap = |bands: ComplexTensor<f64>| Spectrum {
        inner: spectral::Spectrum {
            bands,
            src_h: s.inner.src_h,
            src_w: s.inner.src_w,
        },
    };
    Ok((wrap(b.hi), wrap(b.lo)))
}

/// Enhanced pair `[F_1i, F_i1]` of two same-grid `[h, w, d]` maps, `[h, w, 2d]`.
#[pyfunction]
#[pyo3(signature = (e1, ei, tau=0.5, mode="radial", stage=2))]
fn fem_enhance(e1: &Tensor, ei: &Tensor, tau: f64, mode: &str, stage: usize) -> PyResult<Tensor> {
    let mode: BandMode = parse(mode)?;
    let mut g = Graph::new();
    let a = g.constant(e1.inner.clone()).map_err(err)?;
    let b = g.constant(ei.inner.clone()).map_err(err)?;
    let inp = FemInput::new(&g, a, b, stage).map_err(err)?;
    let out = fem_enhance_var(&mut g, &inp, FemConfig { tau, mode }).map_err(err)?;
    Ok(Tensor {
        inner: g.value(out).clone(),
    })
}

/// Segmentation model at `f64`.
#[pyclass(module = "pyfreqseg")]
pub struct Model {
    inner: CoreModel<f64>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (attention="maca", fem=true, width=64, heads=2, agents=16, classes=4, seed=0, fem_tau=0.5, fem_mode="radial"))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        attention: &str,
        fem: bool,
        width: usize,
        heads: usize,
        agents: usize,
        classes: usize,
        seed: u64,
        fem_tau: f64,
        fem_mode: &str,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            attention: parse(attention)?,
            fem_enabled: fem,
            d: width,
            heads,
            n_agent: agents,
            num_classes: classes,
            seed,
            fem: FemConfig {
                tau: fem_tau,
                mode: parse(fem_mode)?,
            },
            ..Default::default()
        };
        Ok(Model {
            inner: CoreModel::new(cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: CoreModel::load(&dir).map_err(err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(err)
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.names().to_vec()
    }

    /// Logits `[H, W, K]` for an `[H, W, 3]` image.
    fn forward(&self, image: &Tensor) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.inner.forward(&image.inner).map_err(err)?.logits,
        })
    }

    /// Per-pixel argmax class ids, row-major.
    fn predict(&self, image: &Tensor) -> PyResult<Vec<usize>> {
        Ok(self.inner.forward(&image.inner).map_err(err)?.argmax())
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.cfg;
        format!(
            "Model(attention={}, fem={}, width={}, params={})",
            c.attention,
            c.fem_enabled,
            c.d,
            self.inner.num_params()
        )
    }
}

/// `(image [H, W, 3], mask labels)` of scene `index`.
#[pyfunction]
#[pyo3(signature = (index, seed=0, h=64, w=64))]
fn generate_scene(index: u64, seed: u64, h: usize, w: usize) -> PyResult<(Tensor, Vec<usize>)> {
    let cfg = SceneConfig {
        h,
        w,
        seed,
        ..Default::default()
    };
    let s = gen_scene(&cfg, index).map_err(err)?;
    Ok((Tensor { inner: s.image.cast() }, s.mask.labels))
}

fn mask(labels: Vec<usize>, h: usize, w: usize) -> PyResult<Mask> {
    if labels.len() != h * w {
        return Err(PyValueError::new_err(format!("{} labels for a {h}x{w} mask", labels.len())));
    }
    Ok(Mask { h, w, labels })
}

#[pyfunction]
fn miou(pred: Vec<usize>, gt: Vec<usize>, classes: usize) -> PyResult<f64> {
    let n = pred.len();
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(&mask(pred, 1, n)?, &mask(gt, 1, n)?).map_err(err)?;
    cm.miou().map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, h, w, radius=2))]
fn boundary_f_score(pred: Vec<usize>, gt: Vec<usize>, h: usize, w: usize, radius: usize) -> PyResult<f64> {
    bf_score(&mask(pred, h, w)?, &mask(gt, h, w)?, radius).map_err(err)
}

/// `(max relative error, worst parameter path)` for one component.
#[pyfunction]
#[pyo3(signature = (component, trials=20, eps=1e-4, seed=0))]
fn grad_check(component: &str, trials: usize, eps: f64, seed: u64) -> PyResult<(f64, String)> {
    let c: Component = parse(component)?;
    let r = run_grad_check(c, trials, eps, seed).map_err(err)?;
    Ok((r.max_rel_err, r.worst))
}

/// Report lines of one invariant suite.
#[pyfunction]
fn verify(suite: &str) -> PyResult<Vec<(bool, String)>> {
    let checks = freqseg::verify::run_suite(suite).ok_or_else(|| {
        PyValueError::new_err(format!(
            "unknown suite `{suite}`; expected one of {}",
            freqseg::verify::SUITES.join(", ")
        ))
    })?;
    Ok(checks.into_iter().map(|c| (c.passed, c.to_string())).collect())
}

#[pymodule]
fn pyfreqseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Spectrum>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(dfft2, m)?)?;
    m.add_function(wrap_pyfunction!(idfft2, m)?)?;
    m.add_function(wrap_pyfunction!(split_bands, m)?)?;
    m.add_function(wrap_pyfunction!(fem_enhance, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_f_score, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
