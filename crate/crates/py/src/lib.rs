//! Python bindings: the main types and operations of the condensa engine
//! behind a small, copy-based API (plain lists and bytes, no numpy
//! dependency).

use condensa::autodiff::Tensor;
use condensa::condenser::{self, CondenseConfig, PromptMode};
use condensa::datagen::{self, ClassParams, SynthSpec, VideoClip};
use condensa::error::Error;
use condensa::experiment::{self, ExperimentConfig};
use condensa::memory::{self, PixelData};
use condensa::model::{self, ModelParams, DEFAULT_SHIFT_FOLD};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// One synthetic labelled video clip.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Clip {
    inner: VideoClip,
}

#[pymethods]
impl Clip {
    #[getter]
    fn pixels(&self) -> Vec<u8> {
        self.inner.pixels.clone()
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn label(&self) -> u32 {
        self.inner.label
    }

    fn __repr__(&self) -> String {
        format!(
            "Clip(label={}, frames={}, {}x{}x{})",
            self.inner.label, self.inner.frames, self.inner.channels, self.inner.height, self.inner.width
        )
    }
}

/// The temporal-shift feature extractor plus its growable head.
#[pyclass]
struct Model {
    params: ModelParams,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (channels=3, num_classes=0, seed=0))]
    fn new(channels: usize, num_classes: usize, seed: u64) -> PyResult<Self> {
        let params =
            ModelParams::init(channels, num_classes, DEFAULT_SHIFT_FOLD, seed).map_err(to_py_err)?;
        Ok(Model { params })
    }

    /// Grow the head; old rows are preserved bit-identically.
    fn extend_head(&mut self, n_new: usize, seed: u64) -> PyResult<()> {
        self.params = self.params.extend_head(n_new, seed).map_err(to_py_err)?;
        Ok(())
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.params.num_classes
    }

    /// 16-dim clip embedding.
    fn embedding(&self, clip: &Clip) -> PyResult<Vec<f64>> {
        let bundle =
            model::extract_features(&self.params, &clip.inner.to_tensor()).map_err(to_py_err)?;
        Ok(bundle.embedding.data)
    }

    /// Head logits for a clip.
    fn logits(&self, clip: &Clip) -> PyResult<Vec<f64>> {
        let bundle =
            model::extract_features(&self.params, &clip.inner.to_tensor()).map_err(to_py_err)?;
        let logits = model::classify(&self.params, &bundle).map_err(to_py_err)?;
        Ok(logits.data)
    }
}

/// A finalized condensed exemplar.
#[pyclass]
struct Exemplar {
    #[pyo3(get)]
    pixels: Vec<u8>,
    #[pyo3(get)]
    label: u32,
    #[pyo3(get)]
    weights: Vec<f32>,
    #[pyo3(get)]
    initial_total: f64,
    #[pyo3(get)]
    final_total: f64,
}

/// Per-class memory budget: returns (bytes, megabytes to two decimals,
/// display string as printed in budget tables).
#[pyfunction]
#[pyo3(signature = (frames, videos, height=224, width=224, channels=3))]
fn budget(frames: u64, videos: u64, height: u64, width: u64, channels: u64) -> (u64, f64, String) {
    let (bytes, mb) = memory::memory_bytes(frames * videos, height, width, channels);
    (bytes, mb, memory::format_mb(bytes))
}

/// Greedy herding order over embeddings (lists of equal length).
#[pyfunction]
fn herding_select(embeddings: Vec<Vec<f64>>, m: usize) -> PyResult<Vec<usize>> {
    memory::herding_select(&embeddings, m).map_err(to_py_err)
}

/// Softmax-weighted frame combination. `frames` is the flat row-major
/// `[t, c, h, w]` block; returns the flat `[c, h, w]` frame.
#[pyfunction]
fn condense_frame(
    weights: Vec<f64>,
    frames: Vec<f64>,
    shape: (usize, usize, usize, usize),
) -> PyResult<Vec<f64>> {
    let (t, c, h, w) = shape;
    let frames = Tensor::new(vec![t, c, h, w], frames).map_err(to_py_err)?;
    let logits = Tensor::new(vec![t], weights).map_err(to_py_err)?;
    Ok(condenser::condense_frame(&logits, &frames).map_err(to_py_err)?.data)
}

/// Render one clip of the default synthetic spec.
#[pyfunction]
#[pyo3(signature = (class_id, instance_seed, frames=8, height=32, width=32, noise_std=6.0))]
fn render_clip(
    class_id: u32,
    instance_seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    noise_std: f64,
) -> Clip {
    let spec = SynthSpec { frames, height, width, noise_std, ..SynthSpec::default() };
    let params = ClassParams::for_class(class_id);
    Clip { inner: datagen::render_clip(&spec, &params, class_id, instance_seed) }
}

/// Optimize condensing weights and an instance prompt for one clip against
/// a frozen model, then finalize the stored frame.
#[pyfunction]
#[pyo3(signature = (clip, model, iterations=50, seed=0, prompt=true))]
fn condense_exemplar(
    clip: &Clip,
    model: &Model,
    iterations: usize,
    seed: u64,
    prompt: bool,
) -> PyResult<Exemplar> {
    let cfg = CondenseConfig {
        iterations,
        prompt_mode: if prompt { PromptMode::Instance } else { PromptMode::Disabled },
        ..CondenseConfig::default()
    };
    let ex = condenser::optimize_exemplar(
        &clip.inner,
        clip.inner.label as usize,
        &model.params,
        &cfg,
        seed,
    )
    .map_err(to_py_err)?;
    let audit = ex.loss_audit.as_ref();
    let PixelData::Bytes(pixels) = &ex.pixels else {
        return Err(PyValueError::new_err("expected quantized pixels"));
    };
    Ok(Exemplar {
        pixels: pixels.clone(),
        label: ex.label,
        weights: ex.weights_audit.clone(),
        initial_total: audit.map_or(f64::NAN, |a| a.initial.total),
        final_total: audit.map_or(f64::NAN, |a| a.last.total),
    })
}

/// Run a full experiment from a JSON config string; writes the CSV/SVG
/// reports into the config's output directory and returns summary.csv.
#[pyfunction]
fn run_experiment(config_json: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(to_py_err)?;
    experiment::run_experiment(&cfg).map_err(to_py_err)?;
    std::fs::read_to_string(cfg.output_dir.join("summary.csv"))
        .map_err(|e| PyIOError::new_err(e.to_string()))
}

#[pymodule]
fn condensa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Clip>()?;
    m.add_class::<Model>()?;
    m.add_class::<Exemplar>()?;
    m.add_function(wrap_pyfunction!(budget, m)?)?;
    m.add_function(wrap_pyfunction!(herding_select, m)?)?;
    m.add_function(wrap_pyfunction!(condense_frame, m)?)?;
    m.add_function(wrap_pyfunction!(render_clip, m)?)?;
    m.add_function(wrap_pyfunction!(condense_exemplar, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
