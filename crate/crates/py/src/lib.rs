//! Python bindings: corpus handling, poisoning, detection, evaluation, and
//! trigger analysis, mirroring the CLI surface.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use searchguard::attack::{poison_corpus, AttackKind, TriggerSpec};
use searchguard::corpus::{load_corpus, word_frequencies, Token};
use searchguard::detector::{NormalizeScope, ThresholdMode};
use searchguard::followup::SynonymTable;
use searchguard::pipeline::{
    analyze_run, dataset_anr, evaluate, run_detection, BaselineParams, PipelineConfig,
};
use searchguard::synth::{generate_corpus, SynthConfig};
use std::path::PathBuf;
use std::str::FromStr;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A query/code corpus with relevance links.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Corpus {
    inner: searchguard::corpus::Corpus,
}

#[pymethods]
impl Corpus {
    /// Generate a deterministic synthetic corpus.
    #[staticmethod]
    fn synthetic(records: usize, seed: u64) -> PyResult<Corpus> {
        let inner = generate_corpus(&SynthConfig { records, seed }).map_err(err)?;
        Ok(Corpus { inner })
    }

    /// Load a JSONL corpus file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Corpus> {
        Ok(Corpus { inner: load_corpus(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn query_count(&self) -> usize {
        self.inner.queries.len()
    }

    #[getter]
    fn snippet_count(&self) -> usize {
        self.inner.codebase.len()
    }

    /// The `n` most frequent query words with their counts.
    fn top_words(&self, n: usize) -> Vec<(String, u64)> {
        let freq = word_frequencies(&self.inner);
        let mut entries: Vec<(String, u64)> = freq
            .counts
            .iter()
            .map(|(t, &c)| (t.as_str().to_string(), c))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(n);
        entries
    }

    fn __len__(&self) -> usize {
        self.inner.queries.len()
    }
}

/// One detection verdict.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Verdict {
    #[pyo3(get)]
    query_id: String,
    #[pyo3(get)]
    word: String,
    #[pyo3(get)]
    hsv_final: f64,
    #[pyo3(get)]
    threshold: f64,
    #[pyo3(get)]
    poisoned: bool,
}

#[pymethods]
impl Verdict {
    fn __repr__(&self) -> String {
        format!(
            "Verdict(query_id={:?}, word={:?}, hsv_final={:.6}, poisoned={})",
            self.query_id, self.word, self.hsv_final, self.poisoned
        )
    }
}

fn build_spec(kind: &str, target: &str, payload: Option<String>, seed: u64) -> PyResult<TriggerSpec> {
    let kind = AttackKind::from_str(kind).map_err(err)?;
    let target = Token::new(target)
        .ok_or_else(|| PyValueError::new_err(format!("invalid target word {target:?}")))?;
    let payload = match (payload, kind) {
        (Some(p), _) => p,
        (None, AttackKind::DciFixed) => "if False: logging.info('telemetry')".to_string(),
        (None, AttackKind::Ir) => "xq".to_string(),
        (None, _) => String::new(),
    };
    TriggerSpec::new(kind, target, payload, seed).map_err(err)
}

#[allow(clippy::too_many_arguments)]
fn build_config(
    seed: u64,
    k: usize,
    insert_rank: usize,
    queries_per_target: usize,
    w1: f64,
    beta: f64,
    threshold: Option<f64>,
    group_scope: bool,
) -> PipelineConfig {
    PipelineConfig {
        seed,
        k,
        insert_rank,
        queries_per_target,
        w1,
        beta,
        threshold_mode: match threshold {
            Some(t) => ThresholdMode::Fixed(t),
            None => ThresholdMode::Mean,
        },
        normalize_scope: if group_scope { NormalizeScope::Group } else { NormalizeScope::Run },
        ..PipelineConfig::default()
    }
}

/// Poison a fraction of the snippets whose paired query contains `target`.
/// Returns the poisoned corpus and the ids of the modified snippets.
#[pyfunction]
#[pyo3(signature = (corpus, kind="dci-fixed", target="file", payload=None, rate=1.0, seed=42))]
fn poison(
    corpus: &Corpus,
    kind: &str,
    target: &str,
    payload: Option<String>,
    rate: f64,
    seed: u64,
) -> PyResult<(Corpus, Vec<String>)> {
    let spec = build_spec(kind, target, payload, seed)?;
    let (poisoned, ledger) = poison_corpus(&corpus.inner, &spec, rate, seed).map_err(err)?;
    let mut ids: Vec<String> = ledger.entries.iter().map(|e| e.id.clone()).collect();
    ids.sort();
    Ok((Corpus { inner: poisoned }, ids))
}

/// Run metamorphic violation detection against a simulated victim backend.
/// Returns (verdicts, threshold, anr).
#[pyfunction]
#[pyo3(signature = (corpus, kind="dci-fixed", target="file", payload=None, beta=0.5, seed=42,
                    k=20, insert_rank=10, queries_per_target=30, w1=0.7, threshold=None,
                    group_scope=false))]
#[allow(clippy::too_many_arguments)]
fn detect(
    corpus: &Corpus,
    kind: &str,
    target: &str,
    payload: Option<String>,
    beta: f64,
    seed: u64,
    k: usize,
    insert_rank: usize,
    queries_per_target: usize,
    w1: f64,
    threshold: Option<f64>,
    group_scope: bool,
) -> PyResult<(Vec<Verdict>, f64, Option<f64>)> {
    let spec = build_spec(kind, target, payload, seed)?;
    let config = build_config(seed, k, insert_rank, queries_per_target, w1, beta, threshold, group_scope);
    let prepared = run_detection(&corpus.inner, &spec, None, &SynonymTable::builtin(), &config)
        .map_err(err)?;
    let anr = dataset_anr(&prepared.dataset).map_err(err)?;
    let verdicts = prepared
        .outcome
        .run
        .verdicts
        .iter()
        .map(|v| Verdict {
            query_id: v.query_id.clone(),
            word: v.suspicious_word.as_str().to_string(),
            hsv_final: v.hsv_final,
            threshold: v.threshold,
            poisoned: v.poisoned,
        })
        .collect();
    Ok((verdicts, prepared.outcome.run.threshold, anr))
}

/// Compare the metamorphic detector with the reference defenses.
/// Returns the reports as a JSON string.
#[pyfunction]
#[pyo3(signature = (corpus, kind="dci-fixed", target="file", payload=None, beta=0.5, seed=42,
                    k=20, insert_rank=10, queries_per_target=30, w1=0.7))]
#[allow(clippy::too_many_arguments)]
fn evaluate_json(
    corpus: &Corpus,
    kind: &str,
    target: &str,
    payload: Option<String>,
    beta: f64,
    seed: u64,
    k: usize,
    insert_rank: usize,
    queries_per_target: usize,
    w1: f64,
) -> PyResult<String> {
    let spec = build_spec(kind, target, payload, seed)?;
    let config = build_config(seed, k, insert_rank, queries_per_target, w1, beta, None, false);
    let reports = evaluate(
        &corpus.inner,
        &spec,
        &SynonymTable::builtin(),
        &config,
        &BaselineParams::default(),
    )
    .map_err(err)?;
    serde_json::to_string_pretty(&reports).map_err(err)
}

/// Detect, then mine and cross-validate trigger candidates.
/// Returns the analysis report as a JSON string.
#[pyfunction]
#[pyo3(signature = (corpus, kind="dci-fixed", target="file", payload=None, beta=0.5, seed=42,
                    k=20, insert_rank=10, queries_per_target=30, w1=0.7))]
#[allow(clippy::too_many_arguments)]
fn analyze_json(
    corpus: &Corpus,
    kind: &str,
    target: &str,
    payload: Option<String>,
    beta: f64,
    seed: u64,
    k: usize,
    insert_rank: usize,
    queries_per_target: usize,
    w1: f64,
) -> PyResult<String> {
    let spec = build_spec(kind, target, payload, seed)?;
    let config = build_config(seed, k, insert_rank, queries_per_target, w1, beta, None, false);
    let prepared = run_detection(&corpus.inner, &spec, None, &SynonymTable::builtin(), &config)
        .map_err(err)?;
    let report = analyze_run(
        &prepared.dataset,
        &prepared.outcome,
        &prepared.backend,
        &config.hsv_config().map_err(err)?,
    )
    .map_err(err)?;
    serde_json::to_string_pretty(&report).map_err(err)
}

/// Derive a labeled sub-seed from a master seed.
#[pyfunction]
fn derive_seed(seed: u64, label: &str) -> u64 {
    searchguard::seed::derive_seed(seed, label)
}

#[pymodule]
fn searchguard_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Verdict>()?;
    m.add_function(wrap_pyfunction!(poison, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_json, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_json, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    Ok(())
}
