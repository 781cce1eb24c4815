//! Python bindings. Signals cross the boundary as lists of floats and
//! configurations as dicts; both go through the same serde types as the
//! Rust API, so unknown configuration keys are rejected here too.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

use sagrnn::checkpoint::Checkpoint;
use sagrnn::cue::{sep_metrics, CueAnalyzer as CoreAnalyzer};
use sagrnn::loss::{Objective, PitScope, DEFAULT_EPSILON};
use sagrnn::model::{ModelConfig, SagrnnParams};
use sagrnn::optim::OptimState;
use sagrnn::sim::{Binaural, DatasetConfig, Example, SourceCues, Split, DEFAULT_SAMPLE_RATE};
use sagrnn::train::{TrainConfig, Trainer as CoreTrainer};
use sagrnn::Tensor;

fn py_err(e: sagrnn::Error) -> PyErr {
    if e.is_usage() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Python object → serde type, via `json.dumps`.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj
        .py()
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(json_err)
}

fn from_py_or_default<T: DeserializeOwned + Default>(
    obj: Option<&Bound<'_, PyAny>>,
) -> PyResult<T> {
    match obj {
        Some(o) if !o.is_none() => from_py(o),
        _ => Ok(T::default()),
    }
}

/// serde type → Python object, via `json.loads`.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(json_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_name<T: DeserializeOwned>(name: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.into())).map_err(json_err)
}

fn binaural(left: Vec<f64>, right: Vec<f64>) -> PyResult<Binaural> {
    if left.len() != right.len() {
        return Err(PyValueError::new_err(format!(
            "left has {} samples, right {}",
            left.len(),
            right.len()
        )));
    }
    Ok(Binaural { left, right })
}

/// `[C][E][T]` nested lists → tensor.
fn tensor3(rows: Vec<Vec<Vec<f64>>>) -> PyResult<Tensor> {
    let c = rows.len();
    let e = rows.first().map_or(0, |r| r.len());
    let t = rows.first().and_then(|r| r.first()).map_or(0, |x| x.len());
    let mut data = Vec::with_capacity(c * e * t);
    for r in &rows {
        if r.len() != e || r.iter().any(|x| x.len() != t) {
            return Err(PyValueError::new_err(
                "ragged [speakers][ears][samples] array",
            ));
        }
        r.iter().for_each(|x| data.extend_from_slice(x));
    }
    Tensor::new(vec![c, e, t], data).map_err(py_err)
}

fn nested3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let [c, e, n] = t.shape()[..] else {
        unreachable!("rank-3 tensor expected")
    };
    (0..c)
        .map(|i| {
            (0..e)
                .map(|j| t.data()[(i * e + j) * n..(i * e + j + 1) * n].to_vec())
                .collect()
        })
        .collect()
}

fn example_dict<'py>(py: Python<'py>, ex: &Example) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("id", &ex.id)?;
    d.set_item("left", &ex.left)?;
    d.set_item("right", &ex.right)?;
    d.set_item("reference", nested3(&ex.reference))?;
    d.set_item(
        "azimuths_deg",
        ex.speaker_cues
            .iter()
            .map(|c| c.azimuth_deg)
            .collect::<Vec<_>>(),
    )?;
    Ok(d)
}

fn example_from(obj: &Bound<'_, PyAny>, index: usize) -> PyResult<Example> {
    let get = |k: &str| obj.get_item(k);
    let left: Vec<f64> = get("left")?.extract()?;
    let right: Vec<f64> = get("right")?.extract()?;
    let reference = tensor3(get("reference")?.extract()?)?;
    let id = match get("id") {
        Ok(v) => v.extract()?,
        Err(_) => format!("example-{index}"),
    };
    let speaker_cues = match get("azimuths_deg") {
        Ok(v) => v
            .extract::<Vec<f64>>()?
            .into_iter()
            .map(SourceCues::at)
            .collect(),
        Err(_) => Vec::new(),
    };
    if left.len() != right.len() || reference.shape()[2] != left.len() || reference.shape()[1] != 2
    {
        return Err(PyValueError::new_err(format!(
            "example {index}: mixture and references disagree in shape"
        )));
    }
    Ok(Example {
        id,
        left,
        right,
        reference,
        speaker_cues,
    })
}

fn split_named(name: &str) -> PyResult<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown split `{name}`")))
}

/// A separation model: configuration plus parameters.
#[pyclass(module = "sagrnn_py")]
pub struct Model {
    config: ModelConfig,
    params: SagrnnParams<Tensor>,
}

#[pymethods]
impl Model {
    /// Fresh parameters for `config` (a dict of model fields; defaults to
    /// the tiny configuration).
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&Bound<'_, PyAny>>, seed: u64) -> PyResult<Self> {
        let config: ModelConfig = match config {
            Some(c) if !c.is_none() => from_py(c)?,
            _ => ModelConfig::tiny(),
        };
        config.validate().map_err(py_err)?;
        let params = SagrnnParams::init_seeded(&config, seed).map_err(py_err)?;
        Ok(Model { config, params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(Model {
            config: ck.config,
            params: ck.params,
        })
    }

    /// Writes a checkpoint with a fresh optimizer state.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let state = OptimState::new(&self.params);
        Checkpoint::new(self.config, self.params.clone(), state)
            .save(&path)
            .map_err(py_err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.config)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        sagrnn::params::count(&self.params)
    }

    /// Last-block estimates as `[speaker][ear][sample]`.
    fn separate(
        &self,
        py: Python<'_>,
        left: Vec<f64>,
        right: Vec<f64>,
    ) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let sig = binaural(left, right)?;
        let est = py
            .detach(|| sagrnn::model::separate(&self.params, &self.config, &sig.left, &sig.right))
            .map_err(py_err)?;
        Ok(nested3(&est))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({:?}, {} parameters)",
            self.config,
            sagrnn::params::count(&self.params)
        )
    }
}

/// Minibatch trainer; see `TrainConfig` for the accepted dict keys.
#[pyclass(module = "sagrnn_py")]
pub struct Trainer {
    inner: CoreTrainer,
}

#[pymethods]
impl Trainer {
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let config: TrainConfig = from_py_or_default(config)?;
        Ok(Trainer {
            inner: CoreTrainer::new(config).map_err(py_err)?,
        })
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.inner.state.step
    }

    /// One optimizer step on a list of example dicts (as returned by
    /// `synthesize`). Returns the step record.
    fn step<'py>(
        &mut self,
        py: Python<'py>,
        batch: Vec<Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let examples = batch
            .iter()
            .enumerate()
            .map(|(i, b)| example_from(b, i))
            .collect::<PyResult<Vec<_>>>()?;
        let refs: Vec<&Example> = examples.iter().collect();
        let inner = &mut self.inner;
        let rec = py.detach(|| inner.step(&refs)).map_err(py_err)?;
        to_py(py, &rec)
    }

    /// Mean ΔSNR of the current parameters on a list of example dicts.
    fn delta_snr_db(&self, py: Python<'_>, examples: Vec<Bound<'_, PyAny>>) -> PyResult<f64> {
        let examples = examples
            .iter()
            .enumerate()
            .map(|(i, b)| example_from(b, i))
            .collect::<PyResult<Vec<_>>>()?;
        let t = &self.inner;
        py.detach(|| {
            sagrnn::train::evaluate_delta_snr(
                &t.params,
                &t.config.model,
                &examples,
                t.config.loss.epsilon,
            )
        })
        .map_err(py_err)
    }

    /// Snapshot of the current parameters.
    fn model(&self) -> Model {
        Model {
            config: self.inner.config.model,
            params: self.inner.params.clone(),
        }
    }
}

/// Interaural cue analysis for one sample rate.
#[pyclass(module = "sagrnn_py")]
pub struct CueAnalyzer {
    inner: CoreAnalyzer,
}

#[pymethods]
impl CueAnalyzer {
    #[new]
    #[pyo3(signature = (sample_rate=DEFAULT_SAMPLE_RATE as f64))]
    fn new(sample_rate: f64) -> PyResult<Self> {
        Ok(CueAnalyzer {
            inner: CoreAnalyzer::new(sample_rate).map_err(py_err)?,
        })
    }

    /// Center frequencies of the filterbank, Hz.
    #[getter]
    fn centers(&self) -> Vec<f64> {
        self.inner.bank().centers().to_vec()
    }

    /// Utterance ITD (µs), ILD at the three ILD channels (dB) and the
    /// per-frame azimuth track (`None` for frames without cues).
    fn cues<'py>(
        &self,
        py: Python<'py>,
        left: Vec<f64>,
        right: Vec<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let c = self.inner.cues(&binaural(left, right)?).map_err(py_err)?;
        to_py(py, &c)
    }

    fn cue_errors<'py>(
        &self,
        py: Python<'py>,
        est_left: Vec<f64>,
        est_right: Vec<f64>,
        ref_left: Vec<f64>,
        ref_right: Vec<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let e = self.inner.cue_errors(
            &binaural(est_left, est_right)?,
            &binaural(ref_left, ref_right)?,
        );
        to_py(py, &e.map_err(py_err)?)
    }
}

/// Renders a mono signal at `azimuth_deg` (positive = left) through the
/// spherical-head model. Returns `(left, right)`.
#[pyfunction]
#[pyo3(signature = (mono, azimuth_deg, sample_rate=DEFAULT_SAMPLE_RATE as f64))]
fn spatialize(mono: Vec<f64>, azimuth_deg: f64, sample_rate: f64) -> (Vec<f64>, Vec<f64>) {
    let b = sagrnn::sim::spatialize(&mono, azimuth_deg, sample_rate);
    (b.left, b.right)
}

/// Head-model ITD in microseconds.
#[pyfunction]
fn woodworth_itd_us(azimuth_deg: f64) -> f64 {
    sagrnn::sim::woodworth_itd(azimuth_deg) * 1e6
}

#[pyfunction]
fn model_ild_db(azimuth_deg: f64) -> f64 {
    sagrnn::sim::model_ild_db(azimuth_deg)
}

#[pyfunction]
#[pyo3(signature = (est, reference, eps=DEFAULT_EPSILON))]
fn snr_db(est: Vec<f64>, reference: Vec<f64>, eps: f64) -> PyResult<f64> {
    sagrnn::loss::snr_db(&est, &reference, eps).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (est, reference, eps=DEFAULT_EPSILON))]
fn si_snr_db(est: Vec<f64>, reference: Vec<f64>, eps: f64) -> PyResult<f64> {
    sagrnn::loss::si_snr_db(&est, &reference, eps).map_err(py_err)
}

/// Best assignment of estimates to references, both
/// `[speaker][ear][sample]`. Returns `(perms, loss)` with `perms[ear][ref]`
/// the estimate index.
#[pyfunction]
#[pyo3(signature = (est, reference, objective="snr", scope="joint_ears", eps=DEFAULT_EPSILON))]
fn pit_assign(
    est: Vec<Vec<Vec<f64>>>,
    reference: Vec<Vec<Vec<f64>>>,
    objective: &str,
    scope: &str,
    eps: f64,
) -> PyResult<(Vec<Vec<usize>>, f64)> {
    let (objective, scope): (Objective, PitScope) = (parse_name(objective)?, parse_name(scope)?);
    let a = sagrnn::loss::pit_assign(&tensor3(est)?, &tensor3(reference)?, objective, scope, eps)
        .map_err(py_err)?;
    Ok((a.perms, a.loss))
}

/// ΔSNR and ΔSI-SNR of a binaural estimate over the mixture.
#[pyfunction]
fn separation_gain<'py>(
    py: Python<'py>,
    estimate: (Vec<f64>, Vec<f64>),
    reference: (Vec<f64>, Vec<f64>),
    mixture: (Vec<f64>, Vec<f64>),
) -> PyResult<Bound<'py, PyAny>> {
    let m = sep_metrics(
        &binaural(estimate.0, estimate.1)?,
        &binaural(reference.0, reference.1)?,
        &binaural(mixture.0, mixture.1)?,
    )
    .map_err(py_err)?;
    to_py(py, &m)
}

/// Scenes of one split as dicts with `id`, `left`, `right`, `reference`
/// (`[speaker][ear][sample]`) and `azimuths_deg`.
#[pyfunction]
#[pyo3(signature = (config=None, split="train"))]
fn synthesize<'py>(
    py: Python<'py>,
    config: Option<&Bound<'py, PyAny>>,
    split: &str,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg: DatasetConfig = from_py_or_default(config)?;
    let split = split_named(split)?;
    let examples = py
        .detach(|| sagrnn::sim::synthesize_split(&cfg, split))
        .map_err(py_err)?;
    examples.iter().map(|e| example_dict(py, e)).collect()
}

/// Writes a dataset to `out_dir` and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None))]
fn gen_dataset(
    py: Python<'_>,
    out_dir: PathBuf,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<PathBuf> {
    let cfg: DatasetConfig = from_py_or_default(config)?;
    py.detach(|| sagrnn::sim::gen_dataset(&cfg, &out_dir))
        .map_err(py_err)?;
    Ok(out_dir.join(sagrnn::sim::MANIFEST_FILE))
}

/// Runs the finite-difference gradient suite; returns
/// `(passed, [(case, max_rel_err, coords)])`.
#[pyfunction]
fn gradcheck(py: Python<'_>) -> PyResult<(bool, Vec<(String, f64, usize)>)> {
    let report = py
        .detach(|| {
            sagrnn::gradcheck::run_suite(
                &sagrnn::gradcheck::default_cases(),
                sagrnn::gradcheck::TOLERANCE,
            )
        })
        .map_err(py_err)?;
    let rows = report
        .rows
        .iter()
        .map(|r| (r.name.clone(), r.max_rel_err, r.coords))
        .collect();
    Ok((report.passed(), rows))
}

#[pymodule]
pub fn sagrnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Trainer>()?;
    m.add_class::<CueAnalyzer>()?;
    m.add_function(wrap_pyfunction!(spatialize, m)?)?;
    m.add_function(wrap_pyfunction!(woodworth_itd_us, m)?)?;
    m.add_function(wrap_pyfunction!(model_ild_db, m)?)?;
    m.add_function(wrap_pyfunction!(snr_db, m)?)?;
    m.add_function(wrap_pyfunction!(si_snr_db, m)?)?;
    m.add_function(wrap_pyfunction!(pit_assign, m)?)?;
    m.add_function(wrap_pyfunction!(separation_gain, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("SAMPLE_RATE", DEFAULT_SAMPLE_RATE)?;
    Ok(())
}
