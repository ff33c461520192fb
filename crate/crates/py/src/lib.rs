use std::path::PathBuf;

use editctrl::backbone::ModelConfig;
use editctrl::codec::{PatchCodec, Video};
use editctrl::diffusion::{self, SampleConfig};
use editctrl::interactive;
use editctrl::mask::{edit_footprint, PixelMask, Region, RegionSet};
use editctrl::perf::{self, FlopQuery};
use editctrl::prompt::parse_prompt;
use editctrl::training::stage::{load_model_config, load_stage_files, save_stage_checkpoint};
use editctrl::training::{edit_metrics, run_stage, Stage, TrainConfig};
use editctrl::{Error, ParamSet, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(editctrl_py, EmptyMaskError, PyException);
create_exception!(editctrl_py, MissingWeightsError, PyException);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::EmptyMask | Error::MaskLeftFrame { .. } => EmptyMaskError::new_err(e.to_string()),
        Error::MissingWeights(_) | Error::MissingParam(_) => MissingWeightsError::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for editctrl::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Pixel clip `[frames, height, width, channels]`, values in `[0, 1]`.
#[pyclass(name = "Video", module = "editctrl_py", from_py_object)]
#[derive(Clone)]
struct PyVideo {
    inner: Video,
}

#[pymethods]
impl PyVideo {
    #[new]
    fn new(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Self> {
        let t = Tensor::new(shape, data).py()?;
        Ok(PyVideo { inner: Video::new(t).py()? })
    }

    #[staticmethod]
    fn filled(frames: usize, height: usize, width: usize, value: f32) -> Self {
        PyVideo { inner: Video::filled(frames, height, width, 3, value) }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let t = editctrl::io::load_etf::<f32>(&path).py()?;
        Ok(PyVideo { inner: Video::new(t).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        editctrl::io::save_etf(&path, self.inner.tensor()).py()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.dims().to_vec()
    }

    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    /// Largest absolute per-sample difference to `other`.
    fn max_abs_diff(&self, other: &PyVideo) -> f64 {
        self.inner.tensor().max_abs_diff(other.inner.tensor())
    }

    fn __repr__(&self) -> String {
        format!("Video(shape={:?})", self.inner.dims())
    }
}

/// Binary edit mask `[frames, height, width]`.
#[pyclass(name = "Mask", module = "editctrl_py", from_py_object)]
#[derive(Clone)]
struct PyMask {
    inner: PixelMask,
}

#[pymethods]
impl PyMask {
    #[new]
    fn new(bits: Vec<bool>, frames: usize, height: usize, width: usize) -> PyResult<Self> {
        Ok(PyMask { inner: PixelMask::from_bits(frames, height, width, bits).py()? })
    }

    /// Rectangle `[y0, y1) × [x0, x1)` on every frame.
    #[staticmethod]
    fn rect(frames: usize, height: usize, width: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Self {
        let mut m = PixelMask::empty(frames, height, width);
        for f in 0..frames {
            for y in y0..y1.min(height) {
                for x in x0..x1.min(width) {
                    m.set(f, y, x, true);
                }
            }
        }
        PyMask { inner: m }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let t = editctrl::io::load_etf::<f32>(&path).py()?;
        Ok(PyMask { inner: PixelMask::from_tensor(&t).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        editctrl::io::save_etf(&path, &self.inner.to_tensor()).py()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.dims()
    }

    fn count(&self) -> usize {
        self.inner.count()
    }

    fn area_ratio(&self) -> f64 {
        self.inner.area_ratio()
    }

    /// Pixels an edit with this dilation may rewrite.
    #[pyo3(signature = (dilation_radius = editctrl::mask::DEFAULT_DILATION))]
    fn footprint(&self, dilation_radius: usize) -> PyResult<PyMask> {
        Ok(PyMask { inner: edit_footprint(&self.inner, editctrl::codec::DEFAULT_PATCH, dilation_radius).py()? })
    }
}

/// Encode then decode with the default patch codec.
#[pyfunction]
fn codec_roundtrip(v: &PyVideo) -> PyResult<PyVideo> {
    let codec = PatchCodec::default();
    let z = codec.encode(&v.inner).py()?;
    Ok(PyVideo { inner: codec.decode(&z).py()? })
}

/// Frozen backbone plus whatever adapters a checkpoint directory holds.
#[pyclass(name = "Pipeline", module = "editctrl_py")]
struct PyPipeline {
    inner: diffusion::Pipeline,
}

fn sample_config(steps: usize, seed: u64, dilation_radius: usize) -> SampleConfig {
    SampleConfig { steps, seed, dilation_radius, ..Default::default() }
}

#[pymethods]
impl PyPipeline {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let model = load_model_config(&dir).py()?;
        let stages: Vec<(&std::path::Path, Stage)> = [Stage::Base, Stage::ControlFull, Stage::AdaptersSparse]
            .into_iter()
            .filter(|s| *s == Stage::Base || dir.join(s.file_name()).exists())
            .map(|s| (dir.as_path(), s))
            .collect();
        let ps = load_stage_files(&stages).py()?;
        Ok(PyPipeline { inner: diffusion::Pipeline::new(&model, ps).py()? })
    }

    /// `ModelConfig` as JSON.
    fn model_config(&self) -> String {
        serde_json::to_string(self.inner.cfg()).expect("model config serializes")
    }

    fn has_control(&self) -> bool {
        self.inner.modules.control.is_some()
    }

    fn has_global(&self) -> bool {
        self.inner.modules.global.is_some()
    }

    #[pyo3(signature = (video, mask, prompt, steps = 25, seed = 0, dilation_radius = editctrl::mask::DEFAULT_DILATION))]
    fn edit(&self, py: Python<'_>, video: &PyVideo, mask: &PyMask, prompt: &str, steps: usize, seed: u64, dilation_radius: usize) -> PyResult<PyVideo> {
        let ids = parse_prompt(prompt).py()?;
        let cfg = sample_config(steps, seed, dilation_radius);
        let out = py.detach(|| self.inner.sample_edit(&video.inner, &mask.inner, &ids, &cfg)).py()?;
        Ok(PyVideo { inner: out.video })
    }

    /// `regions` is a list of `(mask, prompt, seed)`.
    #[pyo3(signature = (video, regions, steps = 25, dilation_radius = editctrl::mask::DEFAULT_DILATION, threads = None))]
    fn edit_multi(
        &self,
        py: Python<'_>,
        video: &PyVideo,
        regions: Vec<(PyMask, String, u64)>,
        steps: usize,
        dilation_radius: usize,
        threads: Option<usize>,
    ) -> PyResult<PyVideo> {
        let regions = regions.into_iter().map(|(m, prompt, seed)| Region { mask: m.inner, prompt, seed }).collect();
        let set = RegionSet::new(regions, self.inner.codec.patch(), dilation_radius).py()?;
        let cfg = sample_config(steps, 0, dilation_radius);
        let threads = threads.unwrap_or_else(interactive::lane_threads);
        let out = py.detach(|| interactive::edit_multi_region(&self.inner, &video.inner, &set, &cfg, threads)).py()?;
        Ok(PyVideo { inner: out.video })
    }

    /// Measured and analytic FLOPs of one sparse edit, as a dict.
    #[pyo3(signature = (video, mask, prompt, steps = 25, dilation_radius = editctrl::mask::DEFAULT_DILATION))]
    fn edit_flops<'py>(&self, py: Python<'py>, video: &PyVideo, mask: &PyMask, prompt: &str, steps: usize, dilation_radius: usize) -> PyResult<Bound<'py, PyDict>> {
        let ids = parse_prompt(prompt).py()?;
        let cfg = sample_config(steps, 0, dilation_radius);
        let out = py.detach(|| self.inner.sample_edit(&video.inner, &mask.inner, &ids, &cfg)).py()?;
        let n_sel = out.context.selection.len();
        let n_total = out.context.selection.total();
        let ng = self.inner.modules.global.as_ref().map(|_| perf::global_tokens(self.inner.cfg(), video.inner.frames(), self.inner.codec.patch()));
        let q = FlopQuery { control: self.inner.modules.control.as_ref().map(|_| false), global_tokens: ng, ..FlopQuery::dense(n_sel, ids.len(), steps) };
        let analytic = perf::analytic_flops(self.inner.cfg(), &q).py()?;
        let d = PyDict::new(py);
        d.set_item("n_sel", n_sel)?;
        d.set_item("n_total", n_total)?;
        d.set_item("measured", out.flops.total())?;
        d.set_item("analytic", analytic.total())?;
        d.set_item("backbone", out.flops.backbone)?;
        d.set_item("control", out.flops.control)?;
        d.set_item("global", out.flops.global)?;
        Ok(d)
    }
}

fn parse_stage(name: &str) -> PyResult<Stage> {
    serde_json::from_value(serde_json::Value::String(name.into())).map_err(|_| PyValueError::new_err(format!("unknown stage {name:?}")))
}

/// Runs one training stage and writes its checkpoint into `out_dir`.
///
/// `config` and `model` are optional JSON objects merged over the defaults.
/// Returns the per-iteration losses.
#[pyfunction]
#[pyo3(signature = (stage, out_dir, init_dir = None, config = None, model = None))]
fn train_stage(py: Python<'_>, stage: &str, out_dir: PathBuf, init_dir: Option<PathBuf>, config: Option<&str>, model: Option<&str>) -> PyResult<Vec<f64>> {
    let stage = parse_stage(stage)?;
    let mut cfg = serde_json::to_value(TrainConfig::new(stage, 0)).expect("config serializes");
    if let Some(text) = config {
        let patch: serde_json::Value = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        merge(&mut cfg, patch);
    }
    let cfg: TrainConfig = serde_json::from_value(cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().py()?;
    let (model_cfg, params) = match &init_dir {
        Some(dir) => {
            let mc = load_model_config(dir).py()?;
            let mut ps = ParamSet::new();
            for s in [Stage::Base, Stage::ControlFull, Stage::AdaptersSparse] {
                let p = dir.join(s.file_name());
                if s != stage && p.exists() {
                    ps.merge(&editctrl::io::load_etw::<f32>(&p).py()?);
                }
            }
            (mc, ps)
        }
        None => {
            let mut mc = serde_json::to_value(ModelConfig::default()).expect("model serializes");
            if let Some(text) = model {
                let patch: serde_json::Value = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
                merge(&mut mc, patch);
            }
            let mc: ModelConfig = serde_json::from_value(mc).map_err(|e| PyValueError::new_err(e.to_string()))?;
            mc.validate().py()?;
            (mc, ParamSet::new())
        }
    };
    let out = py.detach(|| run_stage(&model_cfg, &cfg, params)).py()?;
    for s in [Stage::Base, Stage::ControlFull, Stage::AdaptersSparse] {
        if s == stage || out.params.entries().iter().any(|e| s.owns(&e.name)) {
            save_stage_checkpoint(&out_dir, s, &out.model, &out.params).py()?;
        }
    }
    Ok(out.losses.iter().map(|l| l.loss).collect())
}

fn merge(dst: &mut serde_json::Value, src: serde_json::Value) {
    match (dst, src) {
        (serde_json::Value::Object(d), serde_json::Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

/// Preservation and fill metrics as a dict of dicts.
#[pyfunction]
#[pyo3(signature = (output, reference, mask, dilation_radius = editctrl::mask::DEFAULT_DILATION))]
fn metrics<'py>(py: Python<'py>, output: &PyVideo, reference: &PyVideo, mask: &PyMask, dilation_radius: usize) -> PyResult<Bound<'py, PyDict>> {
    let footprint = edit_footprint(&mask.inner, editctrl::codec::DEFAULT_PATCH, dilation_radius).py()?;
    let m = edit_metrics(&output.inner, &reference.inner, &mask.inner, &footprint).py()?;
    let d = PyDict::new(py);
    for (key, r) in [("unmasked", &m.unmasked), ("masked", &m.masked)] {
        match r {
            Some(r) => {
                let inner = PyDict::new(py);
                inner.set_item("mse", r.mse)?;
                inner.set_item("mae", r.mae)?;
                inner.set_item("psnr", r.psnr)?;
                inner.set_item("ssim", r.ssim)?;
                inner.set_item("pixels", r.pixels)?;
                d.set_item(key, inner)?;
            }
            None => d.set_item(key, py.None())?,
        }
    }
    Ok(d)
}

/// Analytic FLOPs of a sparse edit over `n_sel` tokens, and of the dense pass over `n_total`.
#[pyfunction]
#[pyo3(signature = (model, n_sel, n_total, frames, prompt_len = 1, steps = 25))]
fn analytic_flops(model: &str, n_sel: usize, n_total: usize, frames: usize, prompt_len: usize, steps: usize) -> PyResult<(u64, u64)> {
    let cfg: ModelConfig = serde_json::from_str(model).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let ng = perf::global_tokens(&cfg, frames, editctrl::codec::DEFAULT_PATCH);
    let sparse = perf::analytic_flops(&cfg, &FlopQuery::sparse(n_sel, ng, prompt_len, steps)).py()?;
    let dense = perf::analytic_flops(&cfg, &FlopQuery::dense(n_total, prompt_len, steps)).py()?;
    Ok((sparse.total(), dense.total()))
}

#[pyfunction]
fn lane_threads() -> usize {
    interactive::lane_threads()
}

#[pymodule]
fn editctrl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVideo>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(codec_roundtrip, m)?)?;
    m.add_function(wrap_pyfunction!(train_stage, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_flops, m)?)?;
    m.add_function(wrap_pyfunction!(lane_threads, m)?)?;
    m.add("EmptyMaskError", m.py().get_type::<EmptyMaskError>())?;
    m.add("MissingWeightsError", m.py().get_type::<MissingWeightsError>())?;
    Ok(())
}
