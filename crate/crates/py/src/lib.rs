//! Python bindings: corpora and episodes, span F1, pair distance, adaption
//! maps, and config-driven train / eval / ablate.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mcml::adaption::{blend as blend_vectors, fit_adaption, project, AdaptionKind, AdaptionMap, SeenPair};
use mcml::corpus::{generate_synthetic, parse_conll, read_conll, sample_episode, to_conll_string, write_conll};
use mcml::corpus::{BioTag, Corpus, Episode, SyntheticSpec};
use mcml::harness::cli::evaluate_targets;
use mcml::harness::metrics::to_json_lines;
use mcml::harness::pipeline::{train_to_checkpoint, TrainLogEntry};
use mcml::harness::{
    checkpoint_hash, read_checkpoint, run_ablation, run_grad_suite, span_f1 as micro_f1, spans_from_bio,
    write_checkpoint, Dataset, Mode, Model, RunConfig, TrainRecord,
};
use mcml::memory::{pair_distance as distance, MemoryStore, SignMode};
use mcml::protonet::compute_prototype_values;

fn py_err(e: mcml::Error) -> PyErr {
    match e {
        mcml::Error::Io(io) => PyOSError::new_err(io.to_string()),
        e @ (mcml::Error::Config(_)
        | mcml::Error::Spec(_)
        | mcml::Error::Parse { .. }
        | mcml::Error::Shape { .. }
        | mcml::Error::Lookup { .. }) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

fn tags(raw: &[String]) -> PyResult<Vec<BioTag>> {
    raw.iter().map(|t| parse::<BioTag>(t)).collect()
}

/// JSON lines to a list of dicts through the stdlib parser.
fn json_lines(py: Python<'_>, text: mcml::Result<String>) -> PyResult<Vec<Py<PyAny>>> {
    let json = py.import("json")?;
    text.map_err(py_err)?
        .lines()
        .map(|l| Ok(json.call_method1("loads", (l,))?.unbind()))
        .collect()
}

#[pyclass(name = "Corpus", module = "mcml_py")]
struct PyCorpus {
    inner: Corpus,
}

#[pymethods]
impl PyCorpus {
    /// Generates a synthetic corpus from a spec file (built-in desk corpus if omitted).
    #[staticmethod]
    #[pyo3(signature = (spec=None, seed=None))]
    fn synthetic(spec: Option<PathBuf>, seed: Option<u64>) -> PyResult<Self> {
        let mut s = match spec {
            Some(p) => SyntheticSpec::read(p).map_err(py_err)?,
            None => SyntheticSpec::desk_default(),
        };
        if let Some(seed) = seed {
            s.seed = seed;
        }
        Ok(PyCorpus {
            inner: generate_synthetic(&s).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn read_conll(path: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: read_conll(path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn parse_conll(text: &str) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: parse_conll(text).map_err(py_err)?,
        })
    }

    fn domains(&self) -> Vec<String> {
        self.inner.domain_names().into_iter().map(String::from).collect()
    }

    #[getter]
    fn num_sentences(&self) -> usize {
        self.inner.num_sentences()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab().len()
    }

    fn label_set(&self, domain: &str) -> PyResult<Vec<String>> {
        Ok(self.inner.label_set(domain).map_err(py_err)?.iter().map(ToString::to_string).collect())
    }

    fn to_conll(&self) -> String {
        to_conll_string(&self.inner)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_conll(&self.inner, path).map_err(py_err)
    }

    #[pyo3(signature = (domain, k_shot, query_size=10, seed=0))]
    fn sample_episode(&self, domain: &str, k_shot: usize, query_size: usize, seed: u64) -> PyResult<PyEpisode> {
        Ok(PyEpisode {
            inner: sample_episode(&self.inner, domain, k_shot, query_size, seed).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.num_sentences()
    }

    fn __repr__(&self) -> String {
        format!("Corpus(domains={:?}, sentences={})", self.inner.domain_names(), self.inner.num_sentences())
    }
}

type TaggedSentence = (Vec<String>, Vec<String>);

fn sentences(list: &[mcml::corpus::Sentence]) -> Vec<TaggedSentence> {
    list.iter()
        .map(|s| (s.tokens.clone(), s.tags.iter().map(ToString::to_string).collect()))
        .collect()
}

#[pyclass(name = "Episode", module = "mcml_py")]
struct PyEpisode {
    inner: Episode,
}

#[pymethods]
impl PyEpisode {
    #[getter]
    fn id(&self) -> u64 {
        self.inner.id
    }

    #[getter]
    fn domain(&self) -> String {
        self.inner.domain.clone()
    }

    #[getter]
    fn label_set(&self) -> Vec<String> {
        self.inner.label_set.iter().map(ToString::to_string).collect()
    }

    #[getter]
    fn support(&self) -> Vec<TaggedSentence> {
        sentences(&self.inner.support)
    }

    #[getter]
    fn query(&self) -> Vec<TaggedSentence> {
        sentences(&self.inner.query)
    }

    fn support_counts(&self) -> BTreeMap<String, usize> {
        self.inner.support_counts().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Raises if the K-shot or disjointness invariants do not hold.
    fn check(&self, k_shot: usize) -> PyResult<()> {
        self.inner.check(k_shot).map_err(py_err)
    }
}

/// `(start, end, slot)` spans with exclusive end.
#[pyfunction]
fn spans(tags_: Vec<String>) -> PyResult<Vec<(usize, usize, String)>> {
    Ok(spans_from_bio(&tags(&tags_)?).into_iter().map(|s| (s.start, s.end, s.slot)).collect())
}

/// Micro-averaged `(precision, recall, f1)` over parallel tag sequences.
#[pyfunction]
fn span_f1(predicted: Vec<Vec<String>>, gold: Vec<Vec<String>>) -> PyResult<(f64, f64, f64)> {
    if predicted.len() != gold.len() {
        return Err(PyValueError::new_err("predicted and gold need the same number of sentences"));
    }
    let p = predicted.iter().map(|t| Ok(spans_from_bio(&tags(t)?))).collect::<PyResult<Vec<_>>>()?;
    let g = gold.iter().map(|t| Ok(spans_from_bio(&tags(t)?))).collect::<PyResult<Vec<_>>>()?;
    let s = micro_f1(&p, &g);
    Ok((s.precision, s.recall, s.f1))
}

#[pyfunction]
#[pyo3(signature = (a, b, sign_mode="literal"))]
fn pair_distance(a: Vec<f64>, b: Vec<f64>, sign_mode: &str) -> PyResult<f64> {
    distance(&a, &b, parse::<SignMode>(sign_mode)?).map_err(py_err)
}

#[pyfunction]
fn blend(ori: Vec<f64>, ada: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    blend_vectors(&ori, &ada, alpha).map_err(py_err)
}

/// Mean embedding per label, in first-appearance order.
#[pyfunction]
fn prototypes(embeddings: Vec<Vec<f64>>, labels: Vec<String>) -> PyResult<Vec<(String, Vec<f64>)>> {
    let labels = tags(&labels)?;
    let mut order: Vec<BioTag> = Vec::new();
    for l in &labels {
        if !order.contains(l) {
            order.push(l.clone());
        }
    }
    let set = compute_prototype_values(&embeddings, &labels, &order, 0).map_err(py_err)?;
    Ok(set.labels.iter().map(ToString::to_string).zip(set.prototypes).collect())
}

#[pyclass(name = "AdaptionMap", module = "mcml_py")]
struct PyAdaptionMap {
    inner: AdaptionMap,
}

#[pymethods]
impl PyAdaptionMap {
    /// Fits `f` so that `f(test) ~ train` over `(train, test)` pairs.
    #[staticmethod]
    #[pyo3(signature = (pairs, kind="linear", iterations=1000, lr=0.05, seed=0))]
    fn fit(pairs: Vec<(Vec<f64>, Vec<f64>)>, kind: &str, iterations: usize, lr: f64, seed: u64) -> PyResult<Self> {
        let seen: Vec<SeenPair> = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (train_side, test_side))| SeenPair {
                label: BioTag::begin(format!("p{i}")),
                train_side,
                test_side,
            })
            .collect();
        let kind = parse::<AdaptionKind>(kind)?;
        Ok(PyAdaptionMap {
            inner: fit_adaption(&seen, kind, iterations, lr, seed).map_err(py_err)?,
        })
    }

    fn project(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        project(&self.inner, &x).map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.to_string()
    }

    #[getter]
    fn initial_loss(&self) -> f64 {
        self.inner.fit_report.initial_loss
    }

    #[getter]
    fn final_loss(&self) -> f64 {
        self.inner.fit_report.final_loss
    }

    fn params(&self) -> BTreeMap<String, Vec<f64>> {
        self.inner.params.slots().iter().map(|s| (s.name.clone(), s.data.clone())).collect()
    }
}

#[pyclass(name = "Config", module = "mcml_py")]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Reads a run config; defaults when no path is given.
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        Ok(PyConfig {
            inner: match path {
                Some(p) => RunConfig::read(p).map_err(py_err)?,
                None => RunConfig::default(),
            },
        })
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) {
        self.inner.seeds = seeds;
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[setter]
    fn set_mode(&mut self, mode: &str) -> PyResult<()> {
        self.inner.mode = parse(mode)?;
        Ok(())
    }

    #[getter]
    fn shots(&self) -> Vec<usize> {
        self.inner.shots.clone()
    }

    #[setter]
    fn set_shots(&mut self, shots: Vec<usize>) {
        self.inner.shots = shots;
    }

    #[getter]
    fn k_shot(&self) -> usize {
        self.inner.episode.k_shot
    }

    #[setter]
    fn set_k_shot(&mut self, k: usize) {
        self.inner.episode.k_shot = k;
    }

    #[getter]
    fn train_episodes(&self) -> usize {
        self.inner.episode.train_episodes
    }

    #[setter]
    fn set_train_episodes(&mut self, n: usize) {
        self.inner.episode.train_episodes = n;
    }

    #[getter]
    fn test_episodes(&self) -> usize {
        self.inner.episode.test_episodes
    }

    #[setter]
    fn set_test_episodes(&mut self, n: usize) {
        self.inner.episode.test_episodes = n;
    }

    #[getter]
    fn validate_every(&self) -> usize {
        self.inner.validate_every
    }

    #[setter]
    fn set_validate_every(&mut self, n: usize) {
        self.inner.validate_every = n;
    }

    #[getter]
    fn sign_mode(&self) -> String {
        self.inner.contrastive.sign_mode.to_string()
    }

    #[setter]
    fn set_sign_mode(&mut self, mode: &str) -> PyResult<()> {
        self.inner.contrastive.sign_mode = parse(mode)?;
        Ok(())
    }

    fn modes(&self) -> Vec<String> {
        self.inner.modes.iter().map(ToString::to_string).collect()
    }

    fn set_modes(&mut self, modes: Vec<String>) -> PyResult<()> {
        self.inner.modes = modes.iter().map(|m| parse(m)).collect::<PyResult<_>>()?;
        Ok(())
    }
}

/// A trained model with its memory store.
#[pyclass(name = "Trained", module = "mcml_py")]
struct PyTrained {
    model: Model,
    memory: MemoryStore,
    log: Vec<TrainRecord>,
}

fn train_records(seed: u64, mode: Mode, shot: usize, log: &[TrainLogEntry]) -> Vec<TrainRecord> {
    log.iter()
        .map(|e| TrainRecord {
            seed,
            mode: mode.to_string(),
            shot,
            episode: e.episode,
            episode_id: e.episode_id,
            domain: e.domain.clone(),
            ner_loss: e.ner_loss,
            memory_loss: e.memory_loss,
            memory_terms: e.memory_terms,
        })
        .collect()
}

#[pymethods]
impl PyTrained {
    #[getter]
    fn memory_size(&self) -> usize {
        self.memory.len()
    }

    fn memory_labels(&self) -> Vec<String> {
        self.memory.labels().map(ToString::to_string).collect()
    }

    /// Per-episode training records (empty for a loaded checkpoint).
    fn log(&self, py: Python<'_>) -> PyResult<Vec<Py<PyAny>>> {
        json_lines(py, to_json_lines(&self.log))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_checkpoint(&path, &self.model.params, &self.memory).map_err(py_err)
    }

    fn checkpoint_hash(&self) -> u64 {
        checkpoint_hash(&self.model.params, &self.memory)
    }

    /// One metrics dict per target domain.
    #[pyo3(signature = (config, seed=None, mode=None))]
    fn evaluate(&self, py: Python<'_>, config: &PyConfig, seed: Option<u64>, mode: Option<&str>) -> PyResult<Vec<Py<PyAny>>> {
        let cfg = &config.inner;
        let mode = mode.map(parse::<Mode>).transpose()?.unwrap_or(cfg.mode);
        let data = Dataset::load(&cfg.data).map_err(py_err)?;
        let records = evaluate_targets(&self.model, &self.memory, cfg, &data, seed.unwrap_or(cfg.seeds[0]), mode);
        json_lines(py, records.and_then(|r| to_json_lines(&r)))
    }
}

#[pyfunction]
#[pyo3(signature = (config, seed=None, mode=None, checkpoint=None))]
fn train(config: &PyConfig, seed: Option<u64>, mode: Option<&str>, checkpoint: Option<PathBuf>) -> PyResult<PyTrained> {
    let cfg = &config.inner;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let mode = mode.map(parse::<Mode>).transpose()?.unwrap_or(cfg.mode);
    let data = Dataset::load(&cfg.data).map_err(py_err)?;
    let t = train_to_checkpoint(cfg, &data, seed, mode, checkpoint.as_deref()).map_err(py_err)?;
    Ok(PyTrained {
        log: train_records(seed, mode, cfg.episode.k_shot, &t.log),
        model: t.model,
        memory: t.memory,
    })
}

/// Loads a checkpoint against the vocabulary of the config's corpus.
#[pyfunction]
fn load_checkpoint(path: PathBuf, config: &PyConfig) -> PyResult<PyTrained> {
    let data = Dataset::load(&config.inner.data).map_err(py_err)?;
    let (params, memory) = read_checkpoint(&path).map_err(py_err)?;
    Ok(PyTrained {
        model: Model::from_params(params, data.corpus.vocab()).map_err(py_err)?,
        memory,
        log: Vec::new(),
    })
}

/// Returns the rendered table and one metrics dict per cell.
#[pyfunction]
fn ablate(py: Python<'_>, config: &PyConfig) -> PyResult<(String, Vec<Py<PyAny>>)> {
    let cfg = &config.inner;
    let data = Dataset::load(&cfg.data).map_err(py_err)?;
    let table = py.detach(|| run_ablation(cfg, &data)).map_err(py_err)?;
    Ok((table.render(), json_lines(py, to_json_lines(&table.records))?))
}

#[pyfunction]
#[pyo3(signature = (seed=0, instances=20))]
fn grad_check(py: Python<'_>, seed: u64, instances: usize) -> PyResult<Vec<Py<PyAny>>> {
    json_lines(py, run_grad_suite(seed, instances).and_then(|r| to_json_lines(&r)))
}

#[pymodule]
fn mcml_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyEpisode>()?;
    m.add_class::<PyAdaptionMap>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrained>()?;
    m.add_function(wrap_pyfunction!(spans, m)?)?;
    m.add_function(wrap_pyfunction!(span_f1, m)?)?;
    m.add_function(wrap_pyfunction!(pair_distance, m)?)?;
    m.add_function(wrap_pyfunction!(blend, m)?)?;
    m.add_function(wrap_pyfunction!(prototypes, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(load_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
