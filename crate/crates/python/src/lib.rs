//! Python bindings: `import kgned`.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use kgned::candidates::{LabelIndex, MatchMode};
use kgned::context::{self, ContextConfig};
use kgned::datasets::ContextPipeline;
use kgned::eval::{self, ConfusionCounts};
use kgned::kg::{EntityId, HopSet, TripleStore};
use kgned::model::{self, Checkpoint};
use kgned::tokenize::{self, Mention, Vocab};
use kgned::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn entity(id: &str) -> PyResult<EntityId> {
    EntityId::new(id).map_err(err)
}

fn entities(ids: Vec<String>) -> PyResult<Vec<EntityId>> {
    ids.iter().map(|s| entity(s)).collect()
}

fn parse<T>(s: &str) -> PyResult<T>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "TripleStore", module = "kgned")]
struct PyTripleStore {
    inner: TripleStore,
}

#[pymethods]
impl PyTripleStore {
    /// Reads `triples.tsv` and `labels.tsv` from a KG directory.
    #[staticmethod]
    fn load_dir(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: TripleStore::load_dir(&path).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.triple_count()
    }

    fn primary_label(&self, subject: &str) -> String {
        self.inner.primary_label(subject).to_owned()
    }

    /// `(head, relation, tail, hop)` tuples in stored order.
    #[pyo3(signature = (head, hops = "1"))]
    fn neighbors(&self, head: &str, hops: &str) -> PyResult<Vec<(String, String, String, u8)>> {
        let head = entity(head)?;
        Ok(self
            .inner
            .neighbors(&head, parse(hops)?)
            .into_iter()
            .map(|t| (t.head.to_string(), t.relation.to_string(), t.tail.raw().to_owned(), t.hop.as_u8()))
            .collect())
    }
}

#[pyclass(name = "Vocab", module = "kgned")]
struct PyVocab {
    inner: Vocab,
}

#[pymethods]
impl PyVocab {
    #[staticmethod]
    #[pyo3(signature = (texts, min_freq = 1))]
    fn build(texts: Vec<String>, min_freq: usize) -> PyResult<Self> {
        Ok(Self { inner: Vocab::build(texts, min_freq).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Vocab::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<u32>) -> Vec<String> {
        self.inner.decode(&ids)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn context_config(hops: &str, max_triples: usize, max_seq_len: usize) -> PyResult<ContextConfig> {
    let cfg = ContextConfig {
        hops: parse::<HopSet>(hops)?,
        max_triples,
        max_seq_len,
        ..ContextConfig::default()
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Verbalized context of `entity`: `(kept, dropped_count)`.
#[pyfunction]
#[pyo3(signature = (store, entity_id, hops = "1", max_triples = 15, budget = 512))]
fn build_context(
    store: &PyTripleStore,
    entity_id: &str,
    hops: &str,
    max_triples: usize,
    budget: usize,
) -> PyResult<(Vec<String>, usize)> {
    let cfg = context_config(hops, max_triples, context::DEFAULT_MAX_SEQ_LEN)?;
    let bundle = context::build_context(&store.inner, &entity(entity_id)?, &cfg, budget);
    Ok((bundle.kept.into_iter().map(|t| t.text).collect(), bundle.dropped_count))
}

/// Model input for one (mention, candidate) pair as a dict with
/// `token_ids`, `segment_ids`, `mask`, `length` and `triples`.
#[pyfunction]
#[pyo3(signature = (vocab, sentence, surface, entity_id, store = None, hops = "1", max_triples = 15, max_seq_len = 512))]
#[allow(clippy::too_many_arguments)]
fn assemble<'py>(
    py: Python<'py>,
    vocab: &PyVocab,
    sentence: &str,
    surface: &str,
    entity_id: &str,
    store: Option<&PyTripleStore>,
    hops: &str,
    max_triples: usize,
    max_seq_len: usize,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let cfg = context_config(hops, max_triples, max_seq_len)?;
    let pipeline = ContextPipeline::new(store.map(|s| &s.inner), &vocab.inner, cfg);
    let mention = Mention::find(sentence, surface).map_err(err)?;
    let (input, bundle) = pipeline.prepare_with_context(&mention, &entity(entity_id)?).map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("token_ids", input.token_ids)?;
    d.set_item("segment_ids", input.segment_ids)?;
    d.set_item("mask", input.mask)?;
    d.set_item("length", input.length)?;
    d.set_item("triples", bundle.kept.into_iter().map(|t| t.text).collect::<Vec<_>>())?;
    Ok(d)
}

#[pyclass(name = "Checkpoint", module = "kgned")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(&path).map_err(err)? })
    }

    #[getter]
    fn max_triples(&self) -> usize {
        self.inner.context.max_triples
    }

    #[getter]
    fn max_seq_len(&self) -> usize {
        self.inner.context.max_seq_len
    }

    /// Probability that `entity_id` is the referent of `surface`.
    #[pyo3(signature = (sentence, surface, entity_id, store = None))]
    fn score(&self, sentence: &str, surface: &str, entity_id: &str, store: Option<&PyTripleStore>) -> PyResult<f64> {
        let ck = &self.inner;
        let pipeline = ContextPipeline::new(store.map(|s| &s.inner), &ck.vocab, ck.context.clone());
        let mention = Mention::find(sentence, surface).map_err(err)?;
        let input = pipeline.prepare(&mention, &entity(entity_id)?).map_err(err)?;
        ck.model.forward(&input).map_err(err)
    }

    /// Candidates ranked by probability, best first.
    #[pyo3(signature = (sentence, surface, candidates, store = None))]
    fn predict(
        &self,
        sentence: &str,
        surface: &str,
        candidates: Vec<String>,
        store: Option<&PyTripleStore>,
    ) -> PyResult<Vec<(String, f64)>> {
        let ck = &self.inner;
        let pipeline = ContextPipeline::new(store.map(|s| &s.inner), &ck.vocab, ck.context.clone());
        let mention = Mention::find(sentence, surface).map_err(err)?;
        let pred = model::predict(&ck.model, &pipeline, &mention, &entities(candidates)?).map_err(err)?;
        Ok(pred.ranked.into_iter().map(|(e, p)| (e.to_string(), p)).collect())
    }
}

#[pyclass(name = "LabelIndex", module = "kgned")]
struct PyLabelIndex {
    inner: LabelIndex,
}

#[pymethods]
impl PyLabelIndex {
    #[staticmethod]
    fn build(store: &PyTripleStore) -> Self {
        Self { inner: LabelIndex::build(&store.inner) }
    }

    /// Candidate entity ids for a surface form; `mode` is exact or contains.
    #[pyo3(signature = (surface, mode = "exact"))]
    fn lookup(&self, surface: &str, mode: &str) -> PyResult<Vec<String>> {
        let mode: MatchMode = parse(mode)?;
        Ok(self.inner.lookup(surface, mode).entities.iter().map(|e| e.to_string()).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyfunction]
fn tokenize_text(text: &str) -> Vec<String> {
    tokenize::tokenize(text)
}

/// `(precision, recall, f1)` as fractions of the positive class.
#[pyfunction]
#[pyo3(signature = (tp, fp, fn_, tn = 0))]
fn prf(tp: usize, fp: usize, fn_: usize, tn: usize) -> (f64, f64, f64) {
    let r = eval::prf(&ConfusionCounts { tp, fp, fn_, tn });
    (r.precision, r.recall, r.f1)
}

#[pyfunction]
fn f1_score(precision: f64, recall: f64) -> f64 {
    eval::f1_score(precision, recall)
}

/// Both maps go from mention id to entity id (or None). NaN when no gold
/// entity is present.
#[pyfunction]
fn inkb_accuracy(predictions: HashMap<String, Option<String>>, gold: HashMap<String, Option<String>>) -> PyResult<f64> {
    let convert = |m: HashMap<String, Option<String>>| -> PyResult<HashMap<String, Option<EntityId>>> {
        m.into_iter().map(|(k, v)| Ok((k, v.as_deref().map(entity).transpose()?))).collect()
    };
    eval::inkb_accuracy(&convert(predictions)?, &convert(gold)?).map_err(err)
}

#[pymodule]
#[pyo3(name = "kgned")]
fn kgned_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTripleStore>()?;
    m.add_class::<PyVocab>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyLabelIndex>()?;
    m.add_function(wrap_pyfunction!(build_context, m)?)?;
    m.add_function(wrap_pyfunction!(assemble, m)?)?;
    m.add("tokenize", wrap_pyfunction!(tokenize_text, m)?)?;
    m.add_function(wrap_pyfunction!(prf, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(inkb_accuracy, m)?)?;
    Ok(())
}
