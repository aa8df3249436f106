//! In-memory state rebuilt from the event log, and the write path that keeps
//! the two in step.
//!
//! Every write is validated against the current state first, then appended
//! to the log (and synced), and only then applied in memory. Replaying the
//! log therefore always reproduces the state the service had.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use wba_core::analytics::{
    barcode, calibration_report, portfolio, sessional_consistency, Barcode, Consistency, ConsistencyQuery,
    ObservationLog, PortfolioConfig, PortfolioEntry, QueryError, Scope, StaffCalibration, Window,
    DEFAULT_THRESHOLD,
};
use wba_core::capture::{ApplyOutcome, CaptureBatch, SessionRecord, Store, SyncError};
use wba_core::mapping::{
    coverage_report, generate_exam, verify_blueprint, BlueprintConstraint, BlueprintReport, CoverageFilter,
    CoverageReport, ExamAttempt, MappingError, MappingGraph, QuestionLedger, QuestionPerformance,
};
use wba_core::registry::RegistryCounts;
use wba_core::scheduler::{plan, AllocationPlan, AnalyticsSnapshot, SchedulerConfig, SchedulerError};
use wba_core::{
    DevelopmentalIndicator, LocationId, Observation, PatientSlot, QuestionId, Registry, RegistryError, SessionId,
    StaffId, StudentId,
};

use crate::events::{write_atomic, EventKind, EventLog, EventLogRecord, LogError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no registry has been loaded")]
    NoRegistry,
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("new registry conflicts with stored data: {0}")]
    RegistryConflict(String),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error("batch {index} ({batch_id}): {source}")]
    Import {
        index: usize,
        batch_id: String,
        #[source]
        source: SyncError,
    },
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("unknown {kind} {id}")]
    NotFound { kind: &'static str, id: String },
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("event {seq} cannot be replayed: {reason}")]
    Replay { seq: u64, reason: String },
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NoRegistry => "no-registry",
            ServiceError::Registry(e) => e.code(),
            ServiceError::RegistryConflict(_) => "registry-conflict",
            ServiceError::Sync(e) | ServiceError::Import { source: e, .. } => e.code(),
            ServiceError::Mapping(e) => e.code(),
            ServiceError::Query(e) => e.code(),
            ServiceError::Scheduler(e) => e.code(),
            ServiceError::NotFound { .. } => "not-found",
            ServiceError::BadRequest(_) => "bad-request",
            ServiceError::Log(e) => e.code(),
            ServiceError::Replay { .. } => "corrupt-log",
        }
    }

    fn replay(seq: u64, reason: impl ToString) -> Self {
        ServiceError::Replay {
            seq,
            reason: reason.to_string(),
        }
    }
}

fn not_found(kind: &'static str, id: &str) -> ServiceError {
    ServiceError::NotFound { kind, id: id.to_owned() }
}

/// Query parameters shared by the student analytics endpoints and commands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsParams {
    pub scope: Option<String>,
    pub threshold: Option<u8>,
    pub from: Option<NaiveDate>,
    pub to: Option<NaiveDate>,
    /// Only the N most recent sessions.
    pub last: Option<usize>,
}

impl AnalyticsParams {
    pub fn scope(&self) -> Result<Scope, ServiceError> {
        Ok(self.scope.as_deref().unwrap_or("all").parse::<Scope>()?)
    }

    pub fn window(&self) -> Result<Window, ServiceError> {
        match (self.last, self.from, self.to) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                Err(ServiceError::BadRequest("use either last or from/to, not both".into()))
            }
            (Some(n), None, None) => Ok(Window::LastSessions { n }),
            (None, None, None) => Ok(Window::All),
            (None, from, to) => Ok(Window::Dates { from, to }),
        }
    }

    pub fn query(&self, student: StudentId) -> Result<ConsistencyQuery, ServiceError> {
        let threshold = self.threshold.unwrap_or(DEFAULT_THRESHOLD.get());
        Ok(ConsistencyQuery::new(student, self.scope()?, threshold, self.window()?)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PortfolioParams {
    pub min_experience: Option<u32>,
    pub sufficiency: Option<f64>,
    pub threshold: Option<u8>,
}

impl PortfolioParams {
    pub fn config(&self) -> Result<PortfolioConfig, ServiceError> {
        let mut config = PortfolioConfig::default();
        if let Some(m) = self.min_experience {
            config.min_experience = m;
        }
        if let Some(s) = self.sufficiency {
            config.sufficiency_threshold = s;
        }
        if let Some(t) = self.threshold {
            config.indicator_threshold =
                DevelopmentalIndicator::new(t).map_err(|_| ServiceError::Query(QueryError::Threshold(t)))?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamRequest {
    pub constraints: Vec<BlueprintConstraint>,
    pub size_limit: usize,
    /// Candidate questions; the whole registry bank when absent.
    #[serde(default)]
    pub bank: Option<Vec<QuestionId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamResponse {
    pub questions: Vec<QuestionId>,
    pub blueprint: BlueprintReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub questions: Vec<QuestionId>,
    pub constraints: Vec<BlueprintConstraint>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    /// Students to plan for; every registry student when absent.
    #[serde(default)]
    pub students: Option<Vec<StudentId>>,
    /// Slots on offer; the registry's slots when absent.
    #[serde(default)]
    pub slots: Option<Vec<PatientSlot>>,
    #[serde(default)]
    pub config: SchedulerConfig,
    /// Indicator threshold for the consistency that feeds priorities.
    #[serde(default)]
    pub threshold: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPlan {
    pub plan_id: String,
    pub request: PlanRequest,
    pub plan: AllocationPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResultRequest {
    pub correct: bool,
    #[serde(default)]
    pub at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: SessionId,
    pub location_id: LocationId,
    pub staff_id: StaffId,
    pub students: Vec<StudentId>,
    pub observations: usize,
    pub opened_at: DateTime<Utc>,
    pub closed_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub seq: u64,
    pub registry_loaded: bool,
    pub sessions: usize,
    pub batches: usize,
    pub observations: usize,
    pub question_results: usize,
    pub plans: usize,
    pub state_hash: String,
}

/// Outcome of one batch in a sync request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncResult {
    pub batch_id: String,
    #[serde(flatten)]
    pub outcome: SyncStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SyncStatus {
    Applied { session_id: SessionId, observations: usize },
    Duplicate { session_id: SessionId },
    Rejected { error: String, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportSummary {
    pub applied: usize,
    pub duplicates: usize,
    pub observations: usize,
}

/// Everything needed to rebuild an [`Engine`]; also the snapshot format.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    /// Registry document as TOML text.
    pub registry: Option<String>,
    pub store: Store,
    pub results: Vec<ExamAttempt>,
    pub plans: BTreeMap<String, StoredPlan>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    state: EngineState,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryPayload {
    document: String,
}

/// Read side of the service plus the pure halves of every write.
#[derive(Debug, Default)]
pub struct Engine {
    registry_text: Option<String>,
    registry: Option<Registry>,
    graph: MappingGraph,
    store: Store,
    results: Vec<ExamAttempt>,
    ledger: QuestionLedger,
    plans: BTreeMap<String, StoredPlan>,
    log: OnceLock<Arc<ObservationLog>>,
}

impl Engine {
    pub fn from_state(state: EngineState) -> Result<Self, ServiceError> {
        let mut engine = Engine {
            store: state.store,
            plans: state.plans,
            ..Default::default()
        };
        if let Some(text) = state.registry {
            let registry = Registry::load(&text)?;
            engine.ledger = ledger_with(&registry, &state.results)?;
            engine.graph = MappingGraph::from_registry(&registry);
            engine.registry = Some(registry);
            engine.registry_text = Some(text);
        } else if !state.results.is_empty() {
            return Err(ServiceError::NoRegistry);
        }
        engine.results = state.results;
        Ok(engine)
    }

    pub fn state(&self) -> EngineState {
        EngineState {
            registry: self.registry_text.clone(),
            store: self.store.clone(),
            results: self.results.clone(),
            plans: self.plans.clone(),
        }
    }

    /// SHA-256 over the canonical JSON of the full state.
    pub fn state_hash(&self) -> String {
        let view = EngineStateView {
            registry: self.registry_text.as_deref(),
            store: &self.store,
            results: &self.results,
            plans: &self.plans,
        };
        let mut h = HashWriter(Sha256::new());
        serde_json::to_writer(&mut h, &view).expect("state serializes");
        hex::encode(h.0.finalize())
    }

    pub fn registry(&self) -> Result<&Registry, ServiceError> {
        self.registry.as_ref().ok_or(ServiceError::NoRegistry)
    }

    pub fn registry_text(&self) -> Option<&str> {
        self.registry_text.as_deref()
    }

    pub fn graph(&self) -> &MappingGraph {
        &self.graph
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn attempts(&self) -> &[ExamAttempt] {
        &self.results
    }

    /// Chronological view of all stored observations, built on first use
    /// after each write.
    pub fn observation_log(&self) -> Arc<ObservationLog> {
        self.log
            .get_or_init(|| Arc::new(ObservationLog::from_store(&self.store)))
            .clone()
    }

    fn invalidate(&mut self) {
        self.log = OnceLock::new();
    }

    fn student(&self, id: &str) -> Result<StudentId, ServiceError> {
        self.registry()?
            .student(id)
            .map(|s| s.id.clone())
            .ok_or_else(|| not_found("student", id))
    }

    pub fn consistency(&self, student: &str, params: &AnalyticsParams) -> Result<Consistency, ServiceError> {
        let q = params.query(self.student(student)?)?;
        Ok(sessional_consistency(&self.observation_log(), &self.graph, &q))
    }

    pub fn barcode(&self, student: &str, params: &AnalyticsParams) -> Result<Barcode, ServiceError> {
        let q = params.query(self.student(student)?)?;
        Ok(barcode(&self.observation_log(), &self.graph, &q))
    }

    pub fn portfolio(&self, student: &str, params: &PortfolioParams) -> Result<Vec<PortfolioEntry>, ServiceError> {
        let id = self.student(student)?;
        Ok(portfolio(&self.observation_log(), self.registry()?, &id, &params.config()?)?)
    }

    pub fn calibration(&self) -> Result<Vec<StaffCalibration>, ServiceError> {
        Ok(calibration_report(&self.observation_log(), self.registry()?))
    }

    pub fn staff_calibration(&self, staff: &str) -> Result<StaffCalibration, ServiceError> {
        self.registry()?
            .staff_member(staff)
            .ok_or_else(|| not_found("staff", staff))?;
        self.calibration()?
            .into_iter()
            .find(|r| r.staff_id.as_str() == staff)
            .ok_or_else(|| not_found("staff", staff))
    }

    pub fn coverage(&self, filter: &CoverageFilter) -> Result<CoverageReport, ServiceError> {
        let registry = self.registry()?;
        Ok(coverage_report(registry, &self.graph, self.store.observations(), &self.results, filter)?)
    }

    pub fn generate_exam(&self, request: &ExamRequest) -> Result<ExamResponse, ServiceError> {
        let registry = self.registry()?;
        let bank: Vec<QuestionId> = match &request.bank {
            Some(b) => b.clone(),
            None => registry.questions().map(|q| q.id.clone()).collect(),
        };
        let questions = generate_exam(
            registry,
            &self.graph,
            &bank,
            &request.constraints,
            request.size_limit,
            &self.ledger.usage_history(),
        )?;
        let blueprint = verify_blueprint(registry, &self.graph, &questions, &request.constraints)?;
        Ok(ExamResponse { questions, blueprint })
    }

    pub fn verify_exam(&self, request: &VerifyRequest) -> Result<BlueprintReport, ServiceError> {
        Ok(verify_blueprint(self.registry()?, &self.graph, &request.questions, &request.constraints)?)
    }

    pub fn question_performance(&self, question: &str) -> Result<QuestionPerformance, ServiceError> {
        let id = QuestionId::new(question).map_err(|_| not_found("question", question))?;
        Ok(self.ledger.performance(&id)?)
    }

    /// Computes a plan without recording it.
    pub fn compute_plan(&self, request: &PlanRequest) -> Result<AllocationPlan, ServiceError> {
        let registry = self.registry()?;
        let students: Vec<StudentId> = match &request.students {
            Some(list) => list
                .iter()
                .map(|s| self.student(s.as_str()))
                .collect::<Result<_, _>>()?,
            None => registry.students().map(|s| s.id.clone()).collect(),
        };
        let slots: Vec<PatientSlot> = match &request.slots {
            Some(slots) => {
                for s in slots {
                    if registry.procedure(s.procedure_id.as_str()).is_none() {
                        return Err(not_found("procedure", s.procedure_id.as_str()));
                    }
                    if s.capacity == 0 {
                        return Err(ServiceError::BadRequest(format!("slot {} has zero capacity", s.id)));
                    }
                }
                slots.clone()
            }
            None => registry.slots().cloned().collect(),
        };
        let threshold = match request.threshold {
            Some(t) => DevelopmentalIndicator::new(t).map_err(|_| ServiceError::Query(QueryError::Threshold(t)))?,
            None => DEFAULT_THRESHOLD,
        };
        let snapshot = AnalyticsSnapshot::from_log(&self.observation_log(), registry, &students, threshold);
        Ok(plan(&students, &slots, &snapshot, &request.config)?)
    }

    pub fn plan(&self, id: &str) -> Result<&StoredPlan, ServiceError> {
        self.plans.get(id).ok_or_else(|| not_found("plan", id))
    }

    pub fn plans(&self) -> impl Iterator<Item = &StoredPlan> {
        self.plans.values()
    }

    pub fn sessions(&self) -> Vec<SessionSummary> {
        self.store
            .sessions()
            .map(|r| SessionSummary {
                session_id: r.session.id.clone(),
                location_id: r.session.location_id.clone(),
                staff_id: r.session.staff_id.clone(),
                students: r.session.students.keys().cloned().collect(),
                observations: r.observations.len(),
                opened_at: r.session.opened_at,
                closed_at: r.session.closed_at,
            })
            .collect()
    }

    pub fn session(&self, id: &str) -> Result<&SessionRecord, ServiceError> {
        self.store.session(id).ok_or_else(|| not_found("session", id))
    }

    pub fn observation(&self, id: &str) -> Result<&Observation, ServiceError> {
        self.store
            .observations()
            .find(|o| o.id.as_str() == id)
            .ok_or_else(|| not_found("observation", id))
    }

    pub fn status(&self, seq: u64) -> Status {
        Status {
            seq,
            registry_loaded: self.registry.is_some(),
            sessions: self.store.session_count(),
            batches: self.store.batch_count(),
            observations: self.store.observation_count(),
            question_results: self.results.len(),
            plans: self.plans.len(),
            state_hash: self.state_hash(),
        }
    }

    // Write halves. `prepare_*` validate without changing anything.

    fn prepare_registry(&self, text: &str) -> Result<(Registry, QuestionLedger), ServiceError> {
        let registry = Registry::load(text)?;
        self.store
            .revalidate(&registry)
            .map_err(|e| ServiceError::RegistryConflict(e.to_string()))?;
        let ledger =
            ledger_with(&registry, &self.results).map_err(|e| ServiceError::RegistryConflict(e.to_string()))?;
        Ok((registry, ledger))
    }

    fn commit_registry(&mut self, text: String, registry: Registry, ledger: QuestionLedger) {
        self.graph = MappingGraph::from_registry(&registry);
        self.registry = Some(registry);
        self.registry_text = Some(text);
        self.ledger = ledger;
    }

    fn prepare_result(&self, question: &str) -> Result<QuestionId, ServiceError> {
        let registry = self.registry()?;
        registry
            .question(question)
            .map(|q| q.id.clone())
            .ok_or_else(|| not_found("question", question))
    }

    fn commit_result(&mut self, attempt: ExamAttempt) -> QuestionPerformance {
        self.ledger
            .record_result(&attempt.question_id, attempt.correct)
            .expect("question checked before commit");
        let performance = self.ledger.performance(&attempt.question_id).expect("known question");
        self.results.push(attempt);
        performance
    }

    fn next_plan_id(&self) -> String {
        format!("PL{:06}", self.plans.len() + 1)
    }

    /// Applies a logged event during replay.
    fn replay(&mut self, record: &EventLogRecord) -> Result<(), ServiceError> {
        let seq = record.seq;
        match record.kind {
            EventKind::RegistryLoaded => {
                let payload: RegistryPayload =
                    serde_json::from_value(record.payload.clone()).map_err(|e| ServiceError::replay(seq, e))?;
                let (registry, ledger) = self.prepare_registry(&payload.document).map_err(|e| ServiceError::replay(seq, e))?;
                self.commit_registry(payload.document, registry, ledger);
            }
            EventKind::BatchApplied => {
                let batch: CaptureBatch =
                    serde_json::from_value(record.payload.clone()).map_err(|e| ServiceError::replay(seq, e))?;
                let registry = self.registry.as_ref().ok_or_else(|| ServiceError::replay(seq, "no registry"))?;
                match self.store.apply(registry, &batch) {
                    Ok(ApplyOutcome::Applied { .. }) => {}
                    Ok(ApplyOutcome::Duplicate { .. }) => return Err(ServiceError::replay(seq, "duplicate batch in log")),
                    Err(e) => return Err(ServiceError::replay(seq, e)),
                }
            }
            EventKind::QuestionResult => {
                let attempt: ExamAttempt =
                    serde_json::from_value(record.payload.clone()).map_err(|e| ServiceError::replay(seq, e))?;
                self.prepare_result(attempt.question_id.as_str())
                    .map_err(|e| ServiceError::replay(seq, e))?;
                self.commit_result(attempt);
            }
            EventKind::PlanCreated => {
                let stored: StoredPlan =
                    serde_json::from_value(record.payload.clone()).map_err(|e| ServiceError::replay(seq, e))?;
                self.plans.insert(stored.plan_id.clone(), stored);
            }
        }
        self.invalidate();
        Ok(())
    }
}

fn ledger_with(registry: &Registry, results: &[ExamAttempt]) -> Result<QuestionLedger, MappingError> {
    let mut ledger = QuestionLedger::from_registry(registry);
    for r in results {
        ledger.record_result(&r.question_id, r.correct)?;
    }
    Ok(ledger)
}

#[derive(Serialize)]
struct EngineStateView<'a> {
    registry: Option<&'a str>,
    store: &'a Store,
    results: &'a [ExamAttempt],
    plans: &'a BTreeMap<String, StoredPlan>,
}

struct HashWriter(Sha256);

impl std::io::Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServiceOptions {
    /// Write a snapshot once this many events have accumulated since the last.
    pub snapshot_every: u64,
    pub keep_snapshots: usize,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        ServiceOptions {
            snapshot_every: 5000,
            keep_snapshots: 2,
        }
    }
}

/// The engine together with its durable log.
#[derive(Debug)]
pub struct Service {
    engine: Engine,
    log: EventLog,
    options: ServiceOptions,
    snapshot_seq: u64,
}

impl Service {
    /// Opens the data directory and rebuilds state from the newest usable
    /// snapshot plus the events after it.
    pub fn open(dir: &Path, options: ServiceOptions) -> Result<Self, ServiceError> {
        let (log, records) = EventLog::open(dir)?;
        let last = log.last_seq();
        let mut engine = Engine::default();
        let mut snapshot_seq = 0;
        for seq in log.snapshots().into_iter().filter(|s| *s <= last) {
            let loaded = std::fs::read(log.snapshot_path(seq))
                .ok()
                .and_then(|bytes| serde_json::from_slice::<Snapshot>(&bytes).ok())
                .filter(|s| s.seq == seq)
                .and_then(|s| Engine::from_state(s.state).ok());
            if let Some(e) = loaded {
                engine = e;
                snapshot_seq = seq;
                break;
            }
        }
        for record in records.iter().filter(|r| r.seq > snapshot_seq) {
            engine.replay(record)?;
        }
        Ok(Service {
            engine,
            log,
            options,
            snapshot_seq,
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn seq(&self) -> u64 {
        self.log.last_seq()
    }

    pub fn status(&self) -> Status {
        self.engine.status(self.seq())
    }

    /// Writes a snapshot of the current state if anything changed since the
    /// last one.
    pub fn snapshot(&mut self) -> Result<(), ServiceError> {
        let seq = self.seq();
        if seq == self.snapshot_seq {
            return Ok(());
        }
        let bytes = serde_json::to_vec(&SnapshotView {
            seq,
            state: EngineStateView {
                registry: self.engine.registry_text.as_deref(),
                store: &self.engine.store,
                results: &self.engine.results,
                plans: &self.engine.plans,
            },
        })
        .expect("state serializes");
        write_atomic(&self.log.snapshot_path(seq), &bytes)?;
        self.snapshot_seq = seq;
        self.log.prune_snapshots(self.options.keep_snapshots);
        Ok(())
    }

    fn maybe_snapshot(&mut self) -> Result<(), ServiceError> {
        if self.seq() - self.snapshot_seq >= self.options.snapshot_every {
            self.snapshot()?;
        }
        Ok(())
    }

    pub fn load_registry(&mut self, text: &str) -> Result<RegistryCounts, ServiceError> {
        let (registry, ledger) = self.engine.prepare_registry(text)?;
        let payload = serde_json::to_value(RegistryPayload {
            document: text.to_owned(),
        })
        .expect("payload serializes");
        let records = self.log.append([(EventKind::RegistryLoaded, payload)], Utc::now())?;
        // A copy of the document as received; the log stays authoritative.
        let _ = std::fs::write(self.log.import_path(records[0].seq, "registry.toml"), text);
        let counts = registry.counts();
        self.engine.commit_registry(text.to_owned(), registry, ledger);
        self.engine.invalidate();
        self.maybe_snapshot()?;
        Ok(counts)
    }

    /// Applies batches one at a time; each succeeds or fails on its own.
    pub fn sync(&mut self, batches: &[CaptureBatch]) -> Result<Vec<SyncResult>, ServiceError> {
        let mut results = Vec::with_capacity(batches.len());
        for batch in batches {
            let registry = self.engine.registry()?;
            let outcome = match self.engine.store.check(registry, batch) {
                Err(e) => SyncStatus::Rejected {
                    error: e.code().to_owned(),
                    message: e.to_string(),
                },
                Ok(checked) if checked.is_duplicate() => match self.engine.store.commit(checked) {
                    ApplyOutcome::Duplicate { session_id } | ApplyOutcome::Applied { session_id, .. } => {
                        SyncStatus::Duplicate { session_id }
                    }
                },
                Ok(checked) => {
                    let payload = serde_json::to_value(batch).expect("batch serializes");
                    self.log.append([(EventKind::BatchApplied, payload)], Utc::now())?;
                    self.engine.invalidate();
                    match self.engine.store.commit(checked) {
                        ApplyOutcome::Applied { session_id, observations } => {
                            SyncStatus::Applied { session_id, observations }
                        }
                        ApplyOutcome::Duplicate { session_id } => SyncStatus::Duplicate { session_id },
                    }
                }
            };
            results.push(SyncResult {
                batch_id: batch.batch_id.to_string(),
                outcome,
            });
        }
        self.maybe_snapshot()?;
        Ok(results)
    }

    /// Applies every batch or none of them.
    pub fn import(&mut self, batches: &[CaptureBatch]) -> Result<ImportSummary, ServiceError> {
        let registry = self.engine.registry()?;
        let mut scratch = self.engine.store.clone();
        let mut summary = ImportSummary::default();
        let mut fresh = Vec::new();
        for (index, batch) in batches.iter().enumerate() {
            match scratch.apply(registry, batch) {
                Ok(ApplyOutcome::Applied { observations, .. }) => {
                    summary.applied += 1;
                    summary.observations += observations;
                    fresh.push(batch);
                }
                Ok(ApplyOutcome::Duplicate { .. }) => summary.duplicates += 1,
                Err(source) => {
                    return Err(ServiceError::Import {
                        index,
                        batch_id: batch.batch_id.to_string(),
                        source,
                    })
                }
            }
        }
        self.log.append(
            fresh
                .into_iter()
                .map(|b| (EventKind::BatchApplied, serde_json::to_value(b).expect("batch serializes"))),
            Utc::now(),
        )?;
        self.engine.store = scratch;
        self.engine.invalidate();
        self.maybe_snapshot()?;
        Ok(summary)
    }

    pub fn record_result(
        &mut self,
        question: &str,
        request: &QuestionResultRequest,
    ) -> Result<QuestionPerformance, ServiceError> {
        let question_id = self.engine.prepare_result(question)?;
        let now = Utc::now();
        let attempt = ExamAttempt {
            question_id,
            correct: request.correct,
            at: request.at.unwrap_or(now),
        };
        let payload = serde_json::to_value(&attempt).expect("attempt serializes");
        self.log.append([(EventKind::QuestionResult, payload)], now)?;
        let performance = self.engine.commit_result(attempt);
        self.engine.invalidate();
        self.maybe_snapshot()?;
        Ok(performance)
    }

    pub fn create_plan(&mut self, request: PlanRequest) -> Result<StoredPlan, ServiceError> {
        let plan = self.engine.compute_plan(&request)?;
        let stored = StoredPlan {
            plan_id: self.engine.next_plan_id(),
            request,
            plan,
        };
        let payload = serde_json::to_value(&stored).expect("plan serializes");
        self.log.append([(EventKind::PlanCreated, payload)], Utc::now())?;
        self.engine.plans.insert(stored.plan_id.clone(), stored.clone());
        self.maybe_snapshot()?;
        Ok(stored)
    }
}

#[derive(Serialize)]
struct SnapshotView<'a> {
    seq: u64,
    state: EngineStateView<'a>,
}
