use std::path::PathBuf;

use ndarray::{Array1, Array2, Array3};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;

use smile_core::corpus::{detokenize, generate_corpus, tokenize, CorpusConfig, CorpusMode};
use smile_core::decoder::{decode, DecodeConfig};
use smile_core::error::Error;
use smile_core::model::{init, Parameters};
use smile_core::objectives::{self, FirstToken, Objective, SubsetMask};
use smile_core::trainer::{self, RunMetrics, Split, TrainConfig};

create_exception!(smile_lab, SmileError, PyException);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Shape(_) | Error::MixingWeight(_) => PyValueError::new_err(e.to_string()),
        other => SmileError::new_err(other.to_string()),
    }
}

fn cube(data: Vec<Vec<Vec<f64>>>) -> PyResult<Array3<f64>> {
    let b = data.len();
    let t = data.first().map_or(0, Vec::len);
    let v = data.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let flat: Vec<f64> = data.into_iter().flatten().flatten().collect();
    Array3::from_shape_vec((b, t, v), flat).map_err(|e| PyValueError::new_err(format!("ragged logits: {e}")))
}

fn nested<T: Clone>(a: &Array3<T>) -> Vec<Vec<Vec<T>>> {
    a.outer_iter().map(|m| m.outer_iter().map(|r| r.to_vec()).collect()).collect()
}

/// Generated or loaded scene/caption corpus.
#[pyclass(module = "smile_lab")]
struct Corpus {
    inner: smile_core::corpus::Corpus,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    #[pyo3(signature = (mode = "full", seed = 0, n_scenes = 1000))]
    fn generate(mode: &str, seed: u64, n_scenes: usize) -> PyResult<Self> {
        let mode = CorpusMode::parse(mode).map_err(py_err)?;
        let inner = generate_corpus(&CorpusConfig::new(mode, seed, n_scenes)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let inner = smile_core::corpus::Corpus::load_dir(&dir).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save_dir(&dir).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.inner.vocab.tokens().to_vec()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.inventory.len()
    }

    fn captions(&self) -> Vec<String> {
        self.inner.samples.iter().map(|s| detokenize(&s.caption, &self.inner.vocab)).collect()
    }

    /// `(scene_id, features, caption ids, detail level)` of one sample.
    fn sample(&self, index: usize) -> PyResult<(u64, Vec<u8>, Vec<u32>, u8)> {
        let s = self
            .inner
            .samples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("sample {index} out of range")))?;
        Ok((s.scene_id, s.features.clone(), s.caption.clone(), s.detail_level))
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        tokenize(text, &self.inner.vocab)
    }

    fn detokenize(&self, ids: Vec<u32>) -> String {
        detokenize(&ids, &self.inner.vocab)
    }
}

/// Captioning model weights.
#[pyclass(module = "smile_lab", skip_from_py_object)]
#[derive(Clone)]
struct Model {
    params: Parameters,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (corpus, d_model = 64, n_layers = 2, n_heads = 4, max_len = 32, seed = 0))]
    fn new(corpus: &Corpus, d_model: usize, n_layers: usize, n_heads: usize, max_len: usize, seed: u64) -> PyResult<Self> {
        let shape = smile_core::experiments::ModelShape {
            d_model,
            n_layers,
            n_heads,
            max_len,
            seed,
        };
        let params = init(&shape.config(&corpus.inner)).map_err(py_err)?;
        Ok(Self { params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            params: Parameters::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.params.save(&path).map_err(py_err)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Logits for one caption prefix: a `len(tokens) x vocab` nested list.
    fn logits(&self, features: Vec<f64>, tokens: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        let f = Array2::from_shape_vec((1, features.len()), features).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let (out, _) = self.params.forward(f.view(), &[tokens]).map_err(py_err)?;
        Ok(nested(&out.values).remove(0))
    }

    /// Greedy when `beam` is 0; returns token ids framed by BOS/EOS.
    #[pyo3(signature = (corpus, features, beam = 3, max_len = None))]
    fn decode(&self, corpus: &Corpus, features: Vec<f64>, beam: usize, max_len: Option<usize>) -> PyResult<Vec<u32>> {
        let max_len = max_len.unwrap_or(self.params.config().max_len);
        let cfg = if beam == 0 {
            DecodeConfig::greedy(max_len)
        } else {
            DecodeConfig::beam(beam, max_len)
        };
        let v = &corpus.inner.vocab;
        let d = decode(&self.params, Array1::from(features).view(), v.bos(), v.eos(), &cfg).map_err(py_err)?;
        Ok(d.tokens)
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &RunMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", m.epoch)?;
    d.set_item("objective", &m.objective)?;
    d.set_item("train_loss", m.train_loss)?;
    d.set_item("val_loss", m.val_loss)?;
    d.set_item("mean_caption_length", m.mean_caption_length)?;
    d.set_item("lexical_diversity", m.lexical_diversity)?;
    d.set_item("r_at_1", m.r_at_1)?;
    d.set_item("r_at_5", m.r_at_5)?;
    d.set_item("oracle_precision", m.oracle_precision)?;
    d.set_item("ppl_proxy", m.ppl_proxy)?;
    Ok(d)
}

/// Trains `model` on `corpus`; returns `(best, last, history)`.
#[pyfunction]
#[pyo3(signature = (model, corpus, objective = "mle", first_token = "mle", epochs = 10, learning_rate = 3e-4, batch_size = 32, seed = 0, val_fraction = 0.1, beam = 3))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    model: &Model,
    corpus: &Corpus,
    objective: &str,
    first_token: &str,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
    val_fraction: f64,
    beam: usize,
) -> PyResult<(Model, Model, Vec<Bound<'py, PyDict>>)> {
    let split = Split::new(&corpus.inner, val_fraction).map_err(py_err)?;
    let max_len = model.params.config().max_len;
    let cfg = TrainConfig {
        objective: Objective::parse(objective).map_err(py_err)?,
        first_token: FirstToken::parse(first_token).map_err(py_err)?,
        epochs,
        learning_rate,
        batch_size,
        seed,
        decode: if beam == 0 {
            DecodeConfig::greedy(max_len)
        } else {
            DecodeConfig::beam(beam, max_len)
        },
        ..TrainConfig::default()
    };
    let out = trainer::train(model.params.clone(), &split, &cfg).map_err(py_err)?;
    let history = out.history.iter().map(|m| metrics_dict(py, m)).collect::<PyResult<_>>()?;
    Ok((Model { params: out.best }, Model { params: out.last }, history))
}

/// Validation loss and descriptiveness metrics of `model`.
#[pyfunction]
#[pyo3(signature = (model, corpus, val_fraction = 0.1, beam = 3))]
fn evaluate<'py>(py: Python<'py>, model: &Model, corpus: &Corpus, val_fraction: f64, beam: usize) -> PyResult<Bound<'py, PyDict>> {
    let split = Split::new(&corpus.inner, val_fraction).map_err(py_err)?;
    let max_len = model.params.config().max_len;
    let cfg = if beam == 0 {
        DecodeConfig::greedy(max_len)
    } else {
        DecodeConfig::beam(beam, max_len)
    };
    let (val_loss, report) = trainer::evaluate(&model.params, &split, &cfg).map_err(py_err)?;
    metrics_dict(py, &RunMetrics::from_report(0, "eval", f64::NAN, val_loss, &report))
}

/// Admission mask (`batch x positions x vocab`) for padded labels.
#[pyfunction]
#[pyo3(signature = (labels, vocab_size, strategy = "smile", first_token = "none", pad = 0, seed = 0))]
fn build_mask(
    labels: Vec<Vec<u32>>,
    vocab_size: usize,
    strategy: &str,
    first_token: &str,
    pad: u32,
    seed: u64,
) -> PyResult<Vec<Vec<Vec<bool>>>> {
    let strategy = Objective::parse(strategy).map_err(py_err)?.strategy();
    let ft = FirstToken::parse(first_token).map_err(py_err)?;
    let padded = objectives::pad_labels(&labels, pad);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let m = objectives::build_mask(padded.view(), vocab_size, pad, strategy, ft, &mut rng);
    Ok(nested(&m.admit))
}

/// `(total, grad)` of the cross-entropy restricted to `admit` (full softmax when omitted).
#[pyfunction]
#[pyo3(signature = (logits, labels, admit = None, pad = 0))]
fn loss(
    logits: Vec<Vec<Vec<f64>>>,
    labels: Vec<Vec<u32>>,
    admit: Option<Vec<Vec<Vec<bool>>>>,
    pad: u32,
) -> PyResult<(f64, Vec<Vec<Vec<f64>>>)> {
    let z = cube(logits)?;
    let padded = objectives::pad_labels(&labels, pad);
    let out = match admit {
        None => objectives::mle_loss(z.view(), padded.view(), pad),
        Some(a) => {
            let (b, t, v) = z.dim();
            let flat: Vec<bool> = a.into_iter().flatten().flatten().collect();
            let mut mask = SubsetMask::full(b, t, v);
            mask.admit = Array3::from_shape_vec((b, t, v), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
            objectives::smile_loss(z.view(), padded.view(), &mask, pad)
        }
    }
    .map_err(py_err)?;
    Ok((out.report.total, nested(&out.grad)))
}

/// Runs the `smile-lab` command line with `args` (no program name); returns the exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    smile_core::cli::run(std::iter::once("smile-lab".to_string()).chain(args))
}

#[pymodule]
fn smile_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SmileError", m.py().get_type::<SmileError>())?;
    m.add_class::<Corpus>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(build_mask, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
