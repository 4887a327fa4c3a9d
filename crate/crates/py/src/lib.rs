use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use spkver::autodiff::Tensor;
use spkver::backend;
use spkver::frontend::{self, FeatureMatrix, FrontendConfig, Waveform};
use spkver::metrics::{self, DcfParams};
use spkver::models::{ExtractorModel, MaxPoolWidths, NetworkSpec, ResNetWidths};
use spkver::objectives;
use spkver::pipeline::{self, Checkpoint, GradSuiteOptions, Scorer, SyntheticCorpusSpec};

fn err(e: spkver::Error) -> PyErr {
    match e {
        spkver::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn features(rows: Vec<Vec<f64>>, frame_shift_ms: f64) -> PyResult<FeatureMatrix> {
    FeatureMatrix::from_rows(&rows, frame_shift_ms).map_err(err)
}

fn rows(f: &FeatureMatrix) -> Vec<Vec<f64>> {
    (0..f.frames()).map(|t| f.row(t).to_vec()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Tensor::matrix(rows.len(), cols, rows.concat()).map_err(err)
}

/// Trained or freshly initialized embedding extractor.
#[pyclass(module = "pyspkver")]
struct Extractor {
    model: ExtractorModel,
    speakers: Option<Vec<String>>,
}

#[pymethods]
impl Extractor {
    /// Max-pooling network; widths default to the full-size configuration.
    #[staticmethod]
    #[pyo3(signature = (n_speakers, input_dim=23, seed=0, widths=None))]
    fn maxpool(n_speakers: usize, input_dim: usize, seed: u64, widths: Option<(usize, usize, usize, usize)>) -> PyResult<Self> {
        let w = widths.map_or_else(MaxPoolWidths::default, |(frame, top, segment, embedding)| MaxPoolWidths { frame, top, segment, embedding });
        let spec = NetworkSpec::maxpool(n_speakers, input_dim, &w).map_err(err)?;
        Ok(Self { model: ExtractorModel::new(spec, seed).map_err(err)?, speakers: None })
    }

    /// Residual network with `blocks` residual blocks.
    #[staticmethod]
    #[pyo3(signature = (blocks, n_speakers, input_dim=23, seed=0))]
    fn resnet(blocks: usize, n_speakers: usize, input_dim: usize, seed: u64) -> PyResult<Self> {
        let spec = NetworkSpec::resnet(blocks, n_speakers, input_dim, &ResNetWidths::default()).map_err(err)?;
        Ok(Self { model: ExtractorModel::new(spec, seed).map_err(err)?, speakers: None })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = Checkpoint::load(&path).map_err(err)?;
        Ok(Self { model: c.model, speakers: Some(c.speakers) })
    }

    #[getter]
    fn name(&self) -> String {
        self.model.spec().name.clone()
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.model.embedding_dim()
    }

    #[getter]
    fn min_frames(&self) -> usize {
        self.model.min_frames()
    }

    #[getter]
    fn speakers(&self) -> Option<Vec<String>> {
        self.speakers.clone()
    }

    fn parameter_count(&self) -> usize {
        self.model.params().scalar_count()
    }

    /// `(layer, receptive field in frames)` for every frame-level layer.
    fn receptive_fields(&self) -> Vec<(String, usize)> {
        self.model.spec().context_table()
    }

    /// Embedding of one utterance given as frames x dims.
    fn embed(&self, py: Python<'_>, frames: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let f = features(frames, 10.0)?;
        py.allow_threads(|| self.model.forward_embed(&f)).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Extractor({}, embedding_dim={}, min_frames={})", self.model.spec().name, self.embedding_dim(), self.min_frames())
    }
}

/// Scoring backend saved by `spkver backend-train`.
#[pyclass(module = "pyspkver")]
struct Backend {
    scorer: Scorer,
}

#[pymethods]
impl Backend {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { scorer: Scorer::load(&path).map_err(err)? })
    }

    /// Cosine scoring with optional mean subtraction.
    #[staticmethod]
    #[pyo3(signature = (mean=None))]
    fn cosine(mean: Option<Vec<f64>>) -> Self {
        Self { scorer: Scorer::Cosine { mean } }
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.scorer.name()
    }

    fn score(&self, a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
        self.scorer.score(&a, &b).map_err(err)
    }
}

/// MFCC features (frames x cepstra) after VAD and sliding mean
/// normalization.
#[pyfunction]
fn mfcc(py: Python<'_>, samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<Vec<f64>>> {
    let w = Waveform::new(samples, sample_rate).map_err(err)?;
    let f = py.allow_threads(|| frontend::extract_features(&w, &FrontendConfig::default())).map_err(err)?;
    Ok(rows(&f))
}

#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<(Vec<f64>, u32)> {
    let w = frontend::read_wav(&path).map_err(err)?;
    Ok((w.samples().to_vec(), w.sample_rate()))
}

#[pyfunction]
fn compute_eer(scores: Vec<f64>, targets: Vec<bool>) -> PyResult<f64> {
    metrics::compute_eer(&scores, &targets).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (scores, targets, p_target=0.01, c_miss=1.0, c_fa=1.0))]
fn compute_min_dcf(scores: Vec<f64>, targets: Vec<bool>, p_target: f64, c_miss: f64, c_fa: f64) -> PyResult<f64> {
    metrics::compute_min_dcf(&scores, &targets, &DcfParams { p_target, c_miss, c_fa }).map_err(err)
}

#[pyfunction]
fn cosine_score(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    backend::cosine_score(&a, &b).map_err(err)
}

/// Mean angular-margin softmax loss for features (B x D) and classifier
/// weights (D x N).
#[pyfunction]
#[pyo3(signature = (x, w, labels, margin, lambda_=0.0))]
fn asoftmax_loss(x: Vec<Vec<f64>>, w: Vec<Vec<f64>>, labels: Vec<usize>, margin: u32, lambda_: f64) -> PyResult<f64> {
    objectives::asoftmax_loss(&matrix(&x)?, &matrix(&w)?, &labels, margin, lambda_).map_err(err)
}

/// Synthetic corpus as `(utterance id, speaker, frames)` tuples.
#[pyfunction]
#[pyo3(signature = (n_speakers=4, utterances_per_speaker=4, dim=23, separation=0.5, seed=0))]
fn synthetic_corpus(n_speakers: usize, utterances_per_speaker: usize, dim: usize, separation: f64, seed: u64) -> PyResult<Vec<(String, String, Vec<Vec<f64>>)>> {
    let spec = SyntheticCorpusSpec { n_speakers, utterances_per_speaker, dim, separation, seed, ..Default::default() };
    let set = pipeline::generate_synthetic_corpus(&spec).map_err(err)?;
    Ok(set.utterances.into_iter().map(|u| (u.id, u.speaker.unwrap_or_default(), rows(&u.features))).collect())
}

/// Gradient-check suite as `(case, max relative error)` pairs.
#[pyfunction]
#[pyo3(signature = (primitives_only=true, seed=0))]
fn gradient_suite(py: Python<'_>, primitives_only: bool, seed: u64) -> PyResult<Vec<(String, f64)>> {
    let opts = GradSuiteOptions { primitives_only, seed, ..Default::default() };
    let cases = py.allow_threads(|| pipeline::gradient_suite(&opts)).map_err(err)?;
    Ok(cases.into_iter().map(|c| (c.name, c.max_rel_error)).collect())
}

#[pymodule]
fn pyspkver(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Extractor>()?;
    m.add_class::<Backend>()?;
    m.add_function(wrap_pyfunction!(mfcc, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eer, m)?)?;
    m.add_function(wrap_pyfunction!(compute_min_dcf, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_score, m)?)?;
    m.add_function(wrap_pyfunction!(asoftmax_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    Ok(())
}
