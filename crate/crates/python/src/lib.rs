//! Python bindings. Structured results cross the boundary as plain Python
//! values (dicts, lists, numbers) built from the library's JSON form.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::de::DeserializeOwned;
use serde::Serialize;

use wba_core::analytics::{self, ConsistencyQuery, ObservationLog, PortfolioConfig, Scope, Window};
use wba_core::capture::{ApplyOutcome, CaptureBatch, Store as CoreStore};
use wba_core::mapping::{self, BlueprintConstraint, CoverageFilter, MappingGraph};
use wba_core::report;
use wba_core::scheduler::{self, AnalyticsSnapshot, SchedulerConfig};
use wba_core::synth::{self, AnomalyKind, AnomalyParams, CohortConfig};
use wba_core::{DevelopmentalIndicator, PatientSlot, QuestionId, Registry as CoreRegistry, StudentId};
use wba_service::state::{
    AnalyticsParams, PlanRequest, QuestionResultRequest, Service as CoreService, ServiceOptions,
};

create_exception!(wba, WbaError, PyException, "Error raised by the assessment core; args are (code, message).");

fn err(code: &str, message: impl ToString) -> PyErr {
    WbaError::new_err((code.to_owned(), message.to_string()))
}

trait Coded {
    fn code(&self) -> &'static str;
}

macro_rules! coded {
    ($($t:ty),*) => {$(
        impl Coded for $t {
            fn code(&self) -> &'static str {
                <$t>::code(self)
            }
        }
    )*};
}

coded!(
    wba_core::RegistryError,
    wba_core::capture::SyncError,
    wba_core::mapping::MappingError,
    wba_core::analytics::QueryError,
    wba_core::scheduler::SchedulerError,
    wba_core::synth::SynthError,
    wba_service::state::ServiceError
);

fn raise<T, E: Coded + std::fmt::Display>(r: Result<T, E>) -> PyResult<T> {
    r.map_err(|e| err(e.code(), e))
}

/// Converts any serializable value to the equivalent Python object.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err("internal", e))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Reads a Python value (or a JSON string) into a library type.
fn from_py<T: DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = match value.extract::<String>() {
        Ok(s) => s,
        Err(_) => py.import("json")?.call_method1("dumps", (value,))?.extract()?,
    };
    serde_json::from_str(&text).map_err(|e| err("bad-request", e))
}

fn threshold(t: u8) -> PyResult<DevelopmentalIndicator> {
    DevelopmentalIndicator::new(t).map_err(|e| err("scale-violation", e))
}

fn window(last: Option<usize>) -> Window {
    last.map_or(Window::All, |n| Window::LastSessions { n })
}

fn query(student: &str, scope: &str, t: u8, last: Option<usize>) -> PyResult<ConsistencyQuery> {
    let student = StudentId::new(student).map_err(|e| err("bad-request", e))?;
    let scope: Scope = raise(scope.parse())?;
    raise(ConsistencyQuery::new(student, scope, t, window(last)))
}

/// Master data: outcomes, workflow items, procedures, people, locations,
/// questions and patient slots.
#[pyclass(frozen)]
pub struct Registry {
    inner: CoreRegistry,
    graph: MappingGraph,
}

impl Registry {
    fn wrap(inner: CoreRegistry) -> Self {
        let graph = MappingGraph::from_registry(&inner);
        Registry { inner, graph }
    }
}

#[pymethods]
impl Registry {
    /// Parses the TOML registry document.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        raise(CoreRegistry::load(text)).map(Registry::wrap)
    }

    /// Builds a registry from its JSON form (a dict or a JSON string).
    #[staticmethod]
    fn from_json(py: Python<'_>, document: &Bound<'_, PyAny>) -> PyResult<Self> {
        raise(CoreRegistry::from_document(from_py(py, document)?)).map(Registry::wrap)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn to_json(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.to_document())
    }

    fn counts(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.counts())
    }

    fn students(&self) -> Vec<String> {
        self.inner.students().map(|s| s.id.to_string()).collect()
    }

    fn staff(&self) -> Vec<String> {
        self.inner.staff().map(|s| s.id.to_string()).collect()
    }

    fn procedures(&self) -> Vec<String> {
        self.inner.procedures().map(|p| p.id.to_string()).collect()
    }

    fn questions(&self) -> Vec<String> {
        self.inner.questions().map(|q| q.id.to_string()).collect()
    }

    fn __repr__(&self) -> String {
        let c = self.inner.counts();
        format!(
            "Registry(outcomes={}, procedures={}, students={}, staff={})",
            c.outcomes, c.procedures, c.students, c.staff
        )
    }
}

/// Committed sessions received from capture clients.
#[pyclass]
#[derive(Default)]
pub struct Store {
    inner: CoreStore,
}

#[pymethods]
impl Store {
    #[new]
    fn new() -> Self {
        Store::default()
    }

    /// Applies one batch (dict or JSON string). Returns "applied" or
    /// "duplicate"; invalid batches raise and leave the store unchanged.
    fn apply(&mut self, py: Python<'_>, registry: &Registry, batch: &Bound<'_, PyAny>) -> PyResult<String> {
        let batch: CaptureBatch = from_py(py, batch)?;
        Ok(match raise(self.inner.apply(&registry.inner, &batch))? {
            ApplyOutcome::Applied { .. } => "applied".into(),
            ApplyOutcome::Duplicate { .. } => "duplicate".into(),
        })
    }

    /// Applies every batch in a JSON Lines text, stopping at the first error.
    fn apply_jsonl(&mut self, registry: &Registry, text: &str) -> PyResult<usize> {
        let mut applied = 0;
        for batch in raise(CaptureBatch::parse_many(text))? {
            if let ApplyOutcome::Applied { .. } = raise(self.inner.apply(&registry.inner, &batch))? {
                applied += 1;
            }
        }
        Ok(applied)
    }

    fn state_hash(&self) -> String {
        self.inner.state_hash()
    }

    fn session_count(&self) -> usize {
        self.inner.session_count()
    }

    fn observation_count(&self) -> usize {
        self.inner.observation_count()
    }

    fn log(&self) -> Log {
        Log {
            inner: ObservationLog::from_store(&self.inner),
        }
    }
}

/// Chronologically ordered observations, the input to every analytic.
#[pyclass(frozen)]
pub struct Log {
    inner: ObservationLog,
}

#[pymethods]
impl Log {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn students(&self) -> Vec<String> {
        self.inner.students().into_iter().map(|s| s.to_string()).collect()
    }
}

/// A generated synthetic cohort.
#[pyclass(frozen)]
pub struct Cohort {
    inner: synth::Cohort,
}

#[pymethods]
impl Cohort {
    fn registry(&self) -> Registry {
        Registry::wrap(self.inner.registry.clone())
    }

    fn log(&self) -> Log {
        Log { inner: self.inner.log() }
    }

    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.stats())
    }

    /// Capture batches as JSON Lines, one committed session per line.
    fn batches_jsonl(&self) -> PyResult<String> {
        let mut out = Vec::new();
        self.inner.write_batches(&mut out).map_err(|e| err("io-error", e))?;
        String::from_utf8(out).map_err(|e| err("internal", e))
    }

    /// Strictness applied to each staff member.
    fn strictness(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.strictness)
    }

    /// Returns a modified cohort and the altered ids.
    #[pyo3(signature = (kind, params=None, seed=0))]
    fn inject_anomaly(
        &self,
        py: Python<'_>,
        kind: &str,
        params: Option<&Bound<'_, PyAny>>,
        seed: u64,
    ) -> PyResult<(Cohort, Vec<String>)> {
        let kind: AnomalyKind = raise(kind.parse())?;
        let params: AnomalyParams = match params {
            Some(p) => from_py(py, p)?,
            None => AnomalyParams::default(),
        };
        let (inner, labels) = raise(synth::inject_anomaly(&self.inner, kind, &params, seed))?;
        Ok((Cohort { inner }, labels.targets))
    }
}

/// Generates a synthetic cohort. `config` overrides generator defaults.
#[pyfunction]
#[pyo3(signature = (config=None, seed=None))]
fn generate_cohort(py: Python<'_>, config: Option<&Bound<'_, PyAny>>, seed: Option<u64>) -> PyResult<Cohort> {
    let mut config: CohortConfig = match config {
        Some(c) => from_py(py, c)?,
        None => CohortConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let inner = py.detach(|| synth::generate(&config));
    Ok(Cohort { inner: raise(inner)? })
}

/// Sessional consistency as {numerator, denominator, value}; value is None
/// when no session applies.
#[pyfunction]
#[pyo3(signature = (log, registry, student, scope="all", threshold=4, last=None))]
fn sessional_consistency(
    py: Python<'_>,
    log: &Log,
    registry: &Registry,
    student: &str,
    scope: &str,
    threshold: u8,
    last: Option<usize>,
) -> PyResult<Py<PyAny>> {
    let q = query(student, scope, threshold, last)?;
    to_py(py, &analytics::sessional_consistency(&log.inner, &registry.graph, &q))
}

#[pyfunction]
#[pyo3(signature = (log, registry, student, scope="all", threshold=4, last=None))]
fn barcode(
    py: Python<'_>,
    log: &Log,
    registry: &Registry,
    student: &str,
    scope: &str,
    threshold: u8,
    last: Option<usize>,
) -> PyResult<Py<PyAny>> {
    let q = query(student, scope, threshold, last)?;
    to_py(py, &analytics::barcode(&log.inner, &registry.graph, &q))
}

/// The barcode as a string of '#' (meets) and '.' (does not).
#[pyfunction]
#[pyo3(signature = (log, registry, student, scope="all", threshold=4))]
fn barcode_strip(log: &Log, registry: &Registry, student: &str, scope: &str, threshold: u8) -> PyResult<String> {
    let q = query(student, scope, threshold, None)?;
    Ok(analytics::barcode(&log.inner, &registry.graph, &q).strip())
}

#[pyfunction]
#[pyo3(signature = (log, registry, student, min_experience=5, sufficiency=0.8, threshold=4))]
fn portfolio(
    py: Python<'_>,
    log: &Log,
    registry: &Registry,
    student: &str,
    min_experience: u32,
    sufficiency: f64,
    threshold: u8,
) -> PyResult<Py<PyAny>> {
    let config = PortfolioConfig {
        min_experience,
        sufficiency_threshold: sufficiency,
        indicator_threshold: self::threshold(threshold)?,
    };
    let student = StudentId::new(student).map_err(|e| err("bad-request", e))?;
    to_py(py, &raise(analytics::portfolio(&log.inner, &registry.inner, &student, &config))?)
}

#[pyfunction]
fn calibration_report(py: Python<'_>, log: &Log, registry: &Registry) -> PyResult<Py<PyAny>> {
    to_py(py, &analytics::calibration_report(&log.inner, &registry.inner))
}

/// Tab-separated consistency table for every student.
#[pyfunction]
#[pyo3(signature = (log, registry, scope="all", threshold=4))]
fn consistency_tsv(log: &Log, registry: &Registry, scope: &str, threshold: u8) -> PyResult<String> {
    let scope: Scope = raise(scope.parse())?;
    let rows = raise(report::consistency_table(&log.inner, &registry.graph, &registry.inner, &scope, threshold, &Window::All))?;
    Ok(report::consistency_tsv(&rows))
}

#[pyfunction]
fn calibration_tsv(log: &Log, registry: &Registry) -> String {
    report::calibration_tsv(&analytics::calibration_report(&log.inner, &registry.inner))
}

/// Coverage matrix over all outcomes, from the observations in `store`.
#[pyfunction]
#[pyo3(signature = (store, registry, tsv=false))]
fn coverage(py: Python<'_>, store: &Store, registry: &Registry, tsv: bool) -> PyResult<Py<PyAny>> {
    let report = raise(mapping::coverage_report(
        &registry.inner,
        &registry.graph,
        store.inner.observations(),
        &[],
        &CoverageFilter::default(),
    ))?;
    if tsv {
        Ok(report.to_tsv().into_pyobject(py)?.into_any().unbind())
    } else {
        to_py(py, &report)
    }
}

/// Picks questions meeting `constraints`, a list of
/// {outcome_id, min_questions, max_questions?}.
#[pyfunction]
#[pyo3(signature = (registry, constraints, size_limit, bank=None))]
fn generate_exam(
    py: Python<'_>,
    registry: &Registry,
    constraints: &Bound<'_, PyAny>,
    size_limit: usize,
    bank: Option<Vec<String>>,
) -> PyResult<Vec<String>> {
    let constraints: Vec<BlueprintConstraint> = from_py(py, constraints)?;
    let bank: Vec<QuestionId> = match bank {
        Some(ids) => ids
            .into_iter()
            .map(|q| QuestionId::new(q).map_err(|e| err("bad-request", e)))
            .collect::<PyResult<_>>()?,
        None => registry.inner.questions().map(|q| q.id.clone()).collect(),
    };
    let exam = raise(mapping::generate_exam(
        &registry.inner,
        &registry.graph,
        &bank,
        &constraints,
        size_limit,
        &Default::default(),
    ))?;
    Ok(exam.into_iter().map(|q| q.to_string()).collect())
}

#[pyfunction]
fn verify_blueprint(
    py: Python<'_>,
    registry: &Registry,
    questions: Vec<String>,
    constraints: &Bound<'_, PyAny>,
) -> PyResult<Py<PyAny>> {
    let constraints: Vec<BlueprintConstraint> = from_py(py, constraints)?;
    let questions: Vec<QuestionId> = questions
        .into_iter()
        .map(|q| QuestionId::new(q).map_err(|e| err("bad-request", e)))
        .collect::<PyResult<_>>()?;
    to_py(py, &raise(mapping::verify_blueprint(&registry.inner, &registry.graph, &questions, &constraints))?)
}

/// Allocates the registry's patient slots (or `slots`) to every student.
#[pyfunction]
#[pyo3(signature = (log, registry, config=None, slots=None))]
fn plan_allocations(
    py: Python<'_>,
    log: &Log,
    registry: &Registry,
    config: Option<&Bound<'_, PyAny>>,
    slots: Option<&Bound<'_, PyAny>>,
) -> PyResult<Py<PyAny>> {
    let config: SchedulerConfig = match config {
        Some(c) => from_py(py, c)?,
        None => SchedulerConfig::default(),
    };
    let slots: Vec<PatientSlot> = match slots {
        Some(s) => from_py(py, s)?,
        None => registry.inner.slots().cloned().collect(),
    };
    let students: Vec<StudentId> = registry.inner.students().map(|s| s.id.clone()).collect();
    let snapshot = AnalyticsSnapshot::from_log(&log.inner, &registry.inner, &students, analytics::DEFAULT_THRESHOLD);
    to_py(py, &raise(scheduler::plan(&students, &slots, &snapshot, &config))?)
}

/// A data directory opened with its event log, as the HTTP service uses it.
#[pyclass]
pub struct Service {
    inner: CoreService,
}

#[pymethods]
impl Service {
    #[new]
    fn open(data_dir: PathBuf) -> PyResult<Self> {
        Ok(Service {
            inner: raise(CoreService::open(&data_dir, ServiceOptions::default()))?,
        })
    }

    fn load_registry(&mut self, py: Python<'_>, toml: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &raise(self.inner.load_registry(toml))?)
    }

    /// Applies batches from a JSON Lines text; one result per batch.
    fn sync(&mut self, py: Python<'_>, jsonl: &str) -> PyResult<Py<PyAny>> {
        let batches = raise(CaptureBatch::parse_many(jsonl))?;
        to_py(py, &raise(self.inner.sync(&batches))?)
    }

    fn status(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.status())
    }

    #[pyo3(signature = (student, scope="all", threshold=4, last=None))]
    fn consistency(
        &self,
        py: Python<'_>,
        student: &str,
        scope: &str,
        threshold: u8,
        last: Option<usize>,
    ) -> PyResult<Py<PyAny>> {
        let params = AnalyticsParams {
            scope: Some(scope.to_owned()),
            threshold: Some(threshold),
            last,
            ..Default::default()
        };
        to_py(py, &raise(self.inner.engine().consistency(student, &params))?)
    }

    fn record_result(&mut self, py: Python<'_>, question: &str, correct: bool) -> PyResult<Py<PyAny>> {
        let request = QuestionResultRequest { correct, at: None };
        to_py(py, &raise(self.inner.record_result(question, &request))?)
    }

    fn create_plan(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &raise(self.inner.create_plan(PlanRequest::default()))?)
    }

    fn snapshot(&mut self) -> PyResult<()> {
        raise(self.inner.snapshot())
    }
}

#[pymodule]
fn wba(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("WbaError", m.py().get_type::<WbaError>())?;
    m.add_class::<Registry>()?;
    m.add_class::<Store>()?;
    m.add_class::<Log>()?;
    m.add_class::<Cohort>()?;
    m.add_class::<Service>()?;
    m.add_function(wrap_pyfunction!(generate_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(sessional_consistency, m)?)?;
    m.add_function(wrap_pyfunction!(barcode, m)?)?;
    m.add_function(wrap_pyfunction!(barcode_strip, m)?)?;
    m.add_function(wrap_pyfunction!(portfolio, m)?)?;
    m.add_function(wrap_pyfunction!(calibration_report, m)?)?;
    m.add_function(wrap_pyfunction!(consistency_tsv, m)?)?;
    m.add_function(wrap_pyfunction!(calibration_tsv, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    m.add_function(wrap_pyfunction!(generate_exam, m)?)?;
    m.add_function(wrap_pyfunction!(verify_blueprint, m)?)?;
    m.add_function(wrap_pyfunction!(plan_allocations, m)?)?;
    Ok(())
}
