//! Python bindings: waveforms, augmentation, kernel statistics, search,
//! MED analysis and the toy contrastive trainer.

use std::collections::BTreeMap;
use std::path::PathBuf;

use augsel_core::analysis::{med_report, DEFAULT_K};
use augsel_core::augment::{apply_chain, sample_chain, sample_distribution, AugChain, AugDistribution, PARAMETER_NAMES};
use augsel_core::contrastive::{self, loss_from_similarities, EncoderDims, EncoderParams, ToyTrainConfig};
use augsel_core::corpus::{self, load_manifest, LoadedDataset};
use augsel_core::features;
use augsel_core::kernelstats::{self, GramMatrix};
use augsel_core::rng::seeded_rng;
use augsel_core::selector::{self, ScoringConfig};
use augsel_core::synth::{self, SynthConfig};
use augsel_core::Error;
use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match &e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for Result<T, Error> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Mono audio with float samples.
#[pyclass(name = "Waveform", module = "augsel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyWaveform(corpus::Waveform);

#[pymethods]
impl PyWaveform {
    #[new]
    fn new(samples: Vec<f64>, sample_rate: u32) -> PyResult<Self> {
        Ok(PyWaveform(corpus::Waveform::new(samples, sample_rate).py()?))
    }

    #[getter]
    fn samples(&self) -> Vec<f64> {
        self.0.samples().to_vec()
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.0.sample_rate()
    }

    fn duration_s(&self) -> f64 {
        self.0.duration_s()
    }

    fn peak(&self) -> f64 {
        self.0.peak()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Waveform({} samples at {} Hz)", self.0.len(), self.0.sample_rate())
    }
}

/// Apply-probabilities and parameter bounds of the five effects.
#[pyclass(name = "AugDistribution", module = "augsel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyAugDistribution(AugDistribution);

#[pymethods]
impl PyAugDistribution {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyAugDistribution(AugDistribution::from_json(text).py()?))
    }

    #[staticmethod]
    fn from_dict(values: BTreeMap<String, f64>) -> PyResult<Self> {
        let mut v = [0.0; 13];
        for (slot, name) in v.iter_mut().zip(PARAMETER_NAMES) {
            *slot = *values
                .get(name)
                .ok_or_else(|| PyValueError::new_err(format!("missing field {name:?}")))?;
        }
        if let Some(extra) = values.keys().find(|k| !PARAMETER_NAMES.contains(&k.as_str())) {
            return Err(PyValueError::new_err(format!("unknown field {extra:?}")));
        }
        Ok(PyAugDistribution(AugDistribution::from_values(v).py()?))
    }

    #[staticmethod]
    fn no_augmentation() -> Self {
        PyAugDistribution(AugDistribution::no_augmentation())
    }

    /// Uniform draw from the parameter ranges.
    #[staticmethod]
    fn sample(seed: u64) -> Self {
        PyAugDistribution(sample_distribution(&mut seeded_rng(seed)))
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    fn to_dict(&self) -> BTreeMap<String, f64> {
        PARAMETER_NAMES
            .iter()
            .zip(self.0.values())
            .map(|(n, v)| (n.to_string(), v))
            .collect()
    }

    fn __getitem__(&self, name: &str) -> PyResult<f64> {
        self.0
            .get(name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown parameter {name:?}")))
    }
}

/// One sampled realisation of a distribution.
#[pyclass(name = "AugChain", module = "augsel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyAugChain(AugChain);

#[pymethods]
impl PyAugChain {
    #[staticmethod]
    fn sample(distribution: &PyAugDistribution, seed: u64) -> Self {
        PyAugChain(sample_chain(&distribution.0, &mut seeded_rng(seed)))
    }

    fn apply(&self, w: &PyWaveform) -> PyResult<PyWaveform> {
        Ok(PyWaveform(apply_chain(&self.0, &w.0).py()?))
    }

    fn effect_names(&self) -> Vec<&'static str> {
        self.0.effects().iter().map(|e| e.name()).collect()
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("chain serialises")
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Ranked candidates of a random search.
#[pyclass(name = "SearchResult", module = "augsel", frozen)]
struct PySearchResult(selector::SearchResult);

fn candidate_dict(c: &selector::ScoredCandidate) -> BTreeMap<String, f64> {
    let mut d: BTreeMap<String, f64> = PARAMETER_NAMES
        .iter()
        .zip(c.distribution.values())
        .map(|(n, v)| (n.to_string(), v))
        .collect();
    d.insert("index".into(), c.index as f64);
    d.insert("score".into(), c.score.value);
    d
}

#[pymethods]
impl PySearchResult {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PySearchResult(selector::SearchResult::read(path).py()?.0))
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.0.write(path, None).py()
    }

    fn to_records(&self) -> String {
        self.0.to_records(None)
    }

    fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }

    /// Lowest-scoring candidate: index, score and the 13 parameters.
    fn best(&self) -> BTreeMap<String, f64> {
        candidate_dict(self.0.best())
    }

    fn best_distribution(&self) -> PyAugDistribution {
        PyAugDistribution(self.0.best().distribution)
    }

    fn candidates(&self) -> Vec<BTreeMap<String, f64>> {
        self.0.candidates().iter().map(candidate_dict).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Encoder, projection head and bilinear similarity weights.
#[pyclass(name = "EncoderParams", module = "augsel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyEncoderParams(EncoderParams);

#[pymethods]
impl PyEncoderParams {
    #[staticmethod]
    #[pyo3(signature = (seed, hidden=64, embed=64, proj=32, bilinear_init=0.01))]
    fn init(seed: u64, hidden: usize, embed: usize, proj: usize, bilinear_init: f64) -> Self {
        let dims = EncoderDims { hidden, embed, proj };
        PyEncoderParams(EncoderParams::init(dims, bilinear_init, &mut seeded_rng(seed)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyEncoderParams(contrastive::Checkpoint::read(path).py()?.params))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        contrastive::Checkpoint {
            params: self.0.clone(),
            step: 0,
            run: None,
        }
        .write(path)
        .py()
    }

    fn encode(&self, segment: &PyWaveform) -> PyResult<Vec<f64>> {
        Ok(contrastive::encode(&self.0, &segment.0).py()?.iter().copied().collect())
    }

    fn embed_utterance(&self, w: &PyWaveform) -> PyResult<Vec<f64>> {
        Ok(contrastive::embed_utterance(&self.0, &w.0).py()?.iter().copied().collect())
    }
}

#[pyfunction]
fn load_waveform(path: PathBuf) -> PyResult<PyWaveform> {
    Ok(PyWaveform(corpus::load_waveform(path).py()?))
}

#[pyfunction]
fn write_waveform(path: PathBuf, w: &PyWaveform) -> PyResult<()> {
    corpus::write_waveform(path, &w.0).py()
}

#[pyfunction]
fn cut_random_segment(w: &PyWaveform, duration_s: f64, seed: u64) -> PyResult<PyWaveform> {
    Ok(PyWaveform(
        corpus::cut_random_segment(&w.0, duration_s, &mut seeded_rng(seed)).py()?,
    ))
}

#[pyfunction]
fn mel_spectrogram(w: &PyWaveform) -> PyResult<Vec<Vec<f64>>> {
    let m = features::mel_spectrogram(&w.0).py()?;
    Ok(m.rows().map(<[f64]>::to_vec).collect())
}

#[pyfunction]
fn pooled_features(w: &PyWaveform) -> PyResult<Vec<f64>> {
    Ok(features::pooled_features(&w.0).py()?.to_vec())
}

fn gram(rows: Vec<Vec<f64>>) -> PyResult<GramMatrix> {
    GramMatrix::from_rows(&rows).py()
}

#[pyfunction]
fn gaussian_gram(points: Vec<Vec<f64>>, sigma: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(kernelstats::gaussian_gram(&points, sigma).py()?.to_rows())
}

#[pyfunction]
fn delta_gram(labels: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
    Ok(kernelstats::delta_gram(&labels).py()?.to_rows())
}

#[pyfunction]
fn median_heuristic(points: Vec<Vec<f64>>) -> PyResult<f64> {
    kernelstats::median_heuristic(&points).py()
}

#[pyfunction]
fn hsic_biased(k: Vec<Vec<f64>>, l: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(kernelstats::hsic_biased(&gram(k)?, &gram(l)?).py()?.value)
}

#[pyfunction]
#[pyo3(signature = (gx, gz, gy, epsilon=kernelstats::DEFAULT_EPSILON))]
fn conditional_dependence(
    gx: Vec<Vec<f64>>,
    gz: Vec<Vec<f64>>,
    gy: Vec<Vec<f64>>,
    epsilon: f64,
) -> PyResult<f64> {
    Ok(kernelstats::conditional_dependence(&gram(gx)?, &gram(gz)?, &gram(gy)?, epsilon)
        .py()?
        .value)
}

fn load_data(manifest: PathBuf) -> PyResult<LoadedDataset> {
    LoadedDataset::load(load_manifest(manifest).py()?).py()
}

fn scoring(n_views: usize, epsilon: f64, max_origins: usize) -> ScoringConfig {
    ScoringConfig {
        n_views,
        epsilon,
        max_origins,
        ..ScoringConfig::default()
    }
}

#[pyfunction]
#[pyo3(signature = (manifest, distribution, n_views=20, epsilon=1e-3, max_origins=100, seed=0))]
fn score_distribution(
    py: Python<'_>,
    manifest: PathBuf,
    distribution: &PyAugDistribution,
    n_views: usize,
    epsilon: f64,
    max_origins: usize,
    seed: u64,
) -> PyResult<f64> {
    let data = load_data(manifest)?;
    let cfg = scoring(n_views, epsilon, max_origins);
    let d = distribution.0;
    py.detach(|| selector::score_distribution(&data, &d, &cfg, &mut seeded_rng(seed)))
        .py()
        .map(|s| s.value)
}

#[pyfunction]
#[pyo3(signature = (manifest, n_candidates=100, n_views=20, epsilon=1e-3, max_origins=100, seed=0, workers=None))]
#[allow(clippy::too_many_arguments)]
fn random_search(
    py: Python<'_>,
    manifest: PathBuf,
    n_candidates: usize,
    n_views: usize,
    epsilon: f64,
    max_origins: usize,
    seed: u64,
    workers: Option<usize>,
) -> PyResult<PySearchResult> {
    let data = load_data(manifest)?;
    let cfg = scoring(n_views, epsilon, max_origins);
    let result = py
        .detach(|| selector::random_search(&data, n_candidates, &cfg, seed, workers))
        .py()?;
    Ok(PySearchResult(result))
}

/// Mean Extremal Difference of every parameter.
#[pyfunction]
#[pyo3(signature = (result, k=DEFAULT_K))]
fn med(result: &PySearchResult, k: usize) -> PyResult<BTreeMap<String, f64>> {
    let report = med_report(&result.0, k).py()?;
    Ok(report.entries.into_iter().map(|e| (e.parameter, e.med)).collect())
}

#[pyfunction]
fn contrastive_loss(similarities: Vec<Vec<f64>>) -> PyResult<f64> {
    let b = similarities.len();
    if b == 0 || similarities.iter().any(|r| r.len() != b) {
        return Err(PyValueError::new_err("similarities must be a non-empty square matrix"));
    }
    Ok(loss_from_similarities(&DMatrix::from_fn(b, b, |i, j| similarities[i][j])))
}

#[pyfunction]
#[pyo3(signature = (directory, n_samples=40, n_classes=2, duration_s=2.0, seed=0, band_only=false))]
fn write_synthetic_corpus(
    directory: PathBuf,
    n_samples: usize,
    n_classes: usize,
    duration_s: f64,
    seed: u64,
    band_only: bool,
) -> PyResult<PathBuf> {
    let base = if band_only {
        SynthConfig::band_only()
    } else {
        SynthConfig::default()
    };
    let cfg = SynthConfig {
        n_samples,
        n_classes,
        duration_s,
        seed,
        ..base
    };
    synth::write_corpus(directory, &cfg).py()
}

/// Runs the toy trainer; returns the trained parameters and per-step losses.
#[pyfunction]
#[pyo3(signature = (manifest, distribution, steps=200, batch_size=8, learning_rate=0.05, seed=0))]
fn toy_train(
    py: Python<'_>,
    manifest: PathBuf,
    distribution: &PyAugDistribution,
    steps: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> PyResult<(PyEncoderParams, Vec<f64>)> {
    let data = load_data(manifest)?;
    let cfg = ToyTrainConfig {
        steps,
        batch_size,
        learning_rate,
        seed,
        ..ToyTrainConfig::default()
    };
    let d = distribution.0;
    let outcome = py
        .detach(|| {
            let p = contrastive::init_for_dataset(&data, &cfg)?;
            contrastive::train_toy(&data, &d, &cfg, p, 0)
        })
        .py()?;
    Ok((PyEncoderParams(outcome.params), outcome.losses))
}

#[pymodule]
fn augsel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWaveform>()?;
    m.add_class::<PyAugDistribution>()?;
    m.add_class::<PyAugChain>()?;
    m.add_class::<PySearchResult>()?;
    m.add_class::<PyEncoderParams>()?;
    m.add_function(wrap_pyfunction!(load_waveform, m)?)?;
    m.add_function(wrap_pyfunction!(write_waveform, m)?)?;
    m.add_function(wrap_pyfunction!(cut_random_segment, m)?)?;
    m.add_function(wrap_pyfunction!(mel_spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(pooled_features, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_gram, m)?)?;
    m.add_function(wrap_pyfunction!(delta_gram, m)?)?;
    m.add_function(wrap_pyfunction!(median_heuristic, m)?)?;
    m.add_function(wrap_pyfunction!(hsic_biased, m)?)?;
    m.add_function(wrap_pyfunction!(conditional_dependence, m)?)?;
    m.add_function(wrap_pyfunction!(score_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(random_search, m)?)?;
    m.add_function(wrap_pyfunction!(med, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(toy_train, m)?)?;
    m.add("PARAMETER_NAMES", PARAMETER_NAMES.to_vec())?;
    m.add("N_MELS", features::N_MELS)?;
    Ok(())
}
