//! Session capture and the offline sync protocol.
//!
//! A capture client opens a session at a location, records observations as
//! they happen, lets each student sign out (which freezes their feedback and
//! locks their record) and finally signs the staff member out. Staff sign-out
//! commits the session and yields a [`CaptureBatch`], a self-contained JSON
//! document that can sit on the device until connectivity returns.
//!
//! On the server, [`Store::apply`] re-validates every batch from scratch and
//! applies it all-or-nothing. Batches are keyed by `batch_id`, so re-delivery is
//! a no-op, and committed sessions are independent of each other, so delivery
//! order does not matter.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::*;
use crate::model::*;
use crate::registry::{validate_observation, EntityKind, Registry, ValidationError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub observation_id: ObservationId,
    pub workflow_item_id: ItemId,
    pub procedure_id: ProcedureId,
    pub indicator: DevelopmentalIndicator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
}

impl From<&Observation> for FeedbackEntry {
    fn from(o: &Observation) -> Self {
        FeedbackEntry {
            observation_id: o.id.clone(),
            workflow_item_id: o.workflow_item_id.clone(),
            procedure_id: o.procedure_id.clone(),
            indicator: o.indicator,
            comment: o.comment.clone(),
        }
    }
}

/// What a student was shown at sign-out. Immutable once taken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackSnapshot {
    pub signed_out_at: DateTime<Utc>,
    pub entries: Vec<FeedbackEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CaptureError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("unknown {kind} {id}")]
    UnknownReference { kind: EntityKind, id: String },
    #[error("a session needs at least one student")]
    EmptyStudentSet,
    #[error("student {student} already signed out of session {session}")]
    AlreadySignedOut { session: SessionId, student: StudentId },
    #[error("student {student} is not in the attendance of session {session}")]
    NotInAttendance { session: SessionId, student: StudentId },
    #[error("session {session} still has {} student(s) signed in", .open.len())]
    StudentsStillOpen { session: SessionId, open: Vec<StudentId> },
    #[error("session {0} is already committed")]
    AlreadyCommitted(SessionId),
    #[error("observation id {0} already used in this session")]
    DuplicateObservation(ObservationId),
}

impl CaptureError {
    pub fn code(&self) -> &'static str {
        match self {
            CaptureError::Validation(e) => e.code(),
            CaptureError::UnknownReference { kind: EntityKind::Location, .. } => "unknown-location",
            CaptureError::UnknownReference { .. } => "unknown-reference",
            CaptureError::EmptyStudentSet => "empty-student-set",
            CaptureError::AlreadySignedOut { .. } => "already-signed-out",
            CaptureError::NotInAttendance { .. } => "not-in-attendance",
            CaptureError::StudentsStillOpen { .. } => "students-still-open",
            CaptureError::AlreadyCommitted(_) => "already-committed",
            CaptureError::DuplicateObservation(_) => "duplicate-observation",
        }
    }
}

/// A session together with everything captured in it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session: Session,
    pub observations: Vec<Observation>,
    pub feedback: BTreeMap<StudentId, FeedbackSnapshot>,
}

/// Opens a session offering exactly the workflows available at `location`.
///
/// `staff` is whoever signs in, which may be someone covering for the rostered
/// colleague; the session is attributed to them.
pub fn open_session(
    registry: &Registry,
    id: SessionId,
    location: &LocationId,
    staff: &StaffId,
    students: impl IntoIterator<Item = StudentId>,
    now: DateTime<Utc>,
) -> Result<SessionRecord, CaptureError> {
    let loc = registry
        .location(location.as_str())
        .ok_or_else(|| CaptureError::UnknownReference {
            kind: EntityKind::Location,
            id: location.to_string(),
        })?;
    if registry.staff_member(staff.as_str()).is_none() {
        return Err(CaptureError::UnknownReference {
            kind: EntityKind::Staff,
            id: staff.to_string(),
        });
    }
    let mut attendance = BTreeMap::new();
    for s in students {
        if registry.student(s.as_str()).is_none() {
            return Err(CaptureError::UnknownReference {
                kind: EntityKind::Student,
                id: s.to_string(),
            });
        }
        attendance.insert(s, LockState::Open);
    }
    if attendance.is_empty() {
        return Err(CaptureError::EmptyStudentSet);
    }
    Ok(SessionRecord {
        session: Session {
            id,
            location_id: loc.id.clone(),
            staff_id: staff.clone(),
            offered_procedures: loc.available_procedures.clone(),
            students: attendance,
            opened_at: now,
            closed_at: None,
            state: SessionState::Active,
        },
        observations: Vec::new(),
        feedback: BTreeMap::new(),
    })
}

impl SessionRecord {
    pub fn id(&self) -> &SessionId {
        &self.session.id
    }

    pub fn is_committed(&self) -> bool {
        self.session.state == SessionState::Committed
    }

    fn ensure_active(&self) -> Result<(), CaptureError> {
        if self.is_committed() {
            Err(CaptureError::AlreadyCommitted(self.session.id.clone()))
        } else {
            Ok(())
        }
    }

    /// Appends one observation. Any subset of workflow items may be observed,
    /// in any order.
    pub fn record(&mut self, registry: &Registry, draft: &ObservationDraft) -> Result<&Observation, CaptureError> {
        self.ensure_active()?;
        match self.session.lock_state(&draft.student_id) {
            None => {
                return Err(ValidationError::NotInAttendance {
                    session: self.session.id.clone(),
                    student: draft.student_id.clone(),
                }
                .into())
            }
            Some(LockState::StudentSignedOut { .. }) => {
                return Err(ValidationError::LockedRecord {
                    session: self.session.id.clone(),
                    student: draft.student_id.clone(),
                }
                .into())
            }
            Some(LockState::Open) => {}
        }
        let obs = validate_observation(draft, registry, &self.session)?;
        if self.observations.iter().any(|o| o.id == obs.id) {
            return Err(CaptureError::DuplicateObservation(obs.id));
        }
        self.observations.push(obs);
        Ok(self.observations.last().expect("just pushed"))
    }

    pub fn observations_for<'a>(&'a self, student: &'a StudentId) -> impl Iterator<Item = &'a Observation> + 'a {
        self.observations.iter().filter(move |o| &o.student_id == student)
    }

    /// Locks the student's record and freezes the feedback they were shown.
    /// A student with nothing recorded may sign out; their snapshot is empty.
    pub fn student_signout(&mut self, student: &StudentId, now: DateTime<Utc>) -> Result<&FeedbackSnapshot, CaptureError> {
        self.ensure_active()?;
        match self.session.lock_state(student) {
            None => {
                return Err(CaptureError::NotInAttendance {
                    session: self.session.id.clone(),
                    student: student.clone(),
                })
            }
            Some(LockState::StudentSignedOut { .. }) => {
                return Err(CaptureError::AlreadySignedOut {
                    session: self.session.id.clone(),
                    student: student.clone(),
                })
            }
            Some(LockState::Open) => {}
        }
        let entries: Vec<FeedbackEntry> = self.observations_for(student).map(FeedbackEntry::from).collect();
        // Device clocks only move forward from the sign-out's point of view.
        let at = self
            .observations_for(student)
            .map(|o| o.timestamp)
            .chain([now, self.session.opened_at])
            .max()
            .expect("non-empty chain");
        self.session
            .students
            .insert(student.clone(), LockState::StudentSignedOut { at });
        let snapshot = FeedbackSnapshot {
            signed_out_at: at,
            entries,
        };
        Ok(self.feedback.entry(student.clone()).or_insert(snapshot))
    }

    /// Commits the session and packages it for upload.
    pub fn staff_signout(&mut self, client: &ClientId, batch: BatchId, now: DateTime<Utc>) -> Result<CaptureBatch, CaptureError> {
        self.ensure_active()?;
        let open: Vec<StudentId> = self
            .session
            .students
            .iter()
            .filter(|(_, s)| s.is_open())
            .map(|(id, _)| id.clone())
            .collect();
        if !open.is_empty() {
            return Err(CaptureError::StudentsStillOpen {
                session: self.session.id.clone(),
                open,
            });
        }
        let last_signout = self.feedback.values().map(|f| f.signed_out_at).max();
        let closed = last_signout.into_iter().chain([now]).max().expect("non-empty chain");
        self.session.closed_at = Some(closed);
        self.session.state = SessionState::Committed;
        Ok(CaptureBatch {
            batch_id: batch,
            client_id: client.clone(),
            session: self.session.clone(),
            observations: self.observations.iter().cloned().map(ObservationDraft::from).collect(),
            feedback: self.feedback.clone(),
        })
    }
}

/// Upload unit: one committed session with its observations and feedback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureBatch {
    pub batch_id: BatchId,
    pub client_id: ClientId,
    pub session: Session,
    pub observations: Vec<ObservationDraft>,
    pub feedback: BTreeMap<StudentId, FeedbackSnapshot>,
}

impl CaptureBatch {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("batches always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, SyncError> {
        serde_json::from_str(text).map_err(|e| SyncError::Malformed(e.to_string()))
    }

    /// Parses either a single JSON batch or JSON Lines with one batch per line.
    /// Nothing is returned unless every batch parses.
    pub fn parse_many(text: &str) -> Result<Vec<Self>, SyncError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Ok(Vec::new());
        }
        if let Ok(one) = serde_json::from_str::<CaptureBatch>(trimmed) {
            return Ok(vec![one]);
        }
        trimmed
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l).map_err(|e| SyncError::Malformed(format!("line {}: {e}", n + 1)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyncError {
    #[error("malformed batch: {0}")]
    Malformed(String),
    #[error("observation {observation:?} rejected: {error}")]
    Invalid {
        observation: Option<ObservationId>,
        error: ValidationError,
    },
    #[error("session {session} was already uploaded in batch {existing}")]
    DuplicateSession { session: SessionId, existing: BatchId },
    #[error("batch id {0} was already used for a different upload")]
    BatchConflict(BatchId),
    #[error("observation id {0} is already stored")]
    DuplicateObservation(ObservationId),
}

impl SyncError {
    pub fn code(&self) -> &'static str {
        match self {
            SyncError::Malformed(_) => "malformed-batch",
            SyncError::Invalid { error, .. } => error.code(),
            SyncError::DuplicateSession { .. } => "duplicate-session",
            SyncError::BatchConflict(_) => "batch-conflict",
            SyncError::DuplicateObservation(_) => "duplicate-observation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchReceipt {
    pub session_id: SessionId,
    pub client_id: ClientId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ApplyOutcome {
    Applied { session_id: SessionId, observations: usize },
    Duplicate { session_id: SessionId },
}

/// A batch that passed every check and can be committed without further
/// validation.
#[derive(Debug)]
pub struct CheckedBatch {
    batch_id: BatchId,
    receipt: BatchReceipt,
    record: Option<SessionRecord>,
}

impl CheckedBatch {
    pub fn is_duplicate(&self) -> bool {
        self.record.is_none()
    }
}

/// Server-side store of committed sessions.
#[derive(Debug, Clone, Default)]
pub struct Store {
    sessions: BTreeMap<SessionId, SessionRecord>,
    batches: BTreeMap<BatchId, BatchReceipt>,
    observation_ids: HashSet<ObservationId>,
}

#[derive(Serialize)]
struct StoreView<'a> {
    sessions: &'a BTreeMap<SessionId, SessionRecord>,
    batches: &'a BTreeMap<BatchId, BatchReceipt>,
}

#[derive(Deserialize)]
struct StoreData {
    sessions: BTreeMap<SessionId, SessionRecord>,
    batches: BTreeMap<BatchId, BatchReceipt>,
}

impl Serialize for Store {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        StoreView {
            sessions: &self.sessions,
            batches: &self.batches,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Store {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let data = StoreData::deserialize(deserializer)?;
        let observation_ids = data
            .sessions
            .values()
            .flat_map(|r| r.observations.iter().map(|o| o.id.clone()))
            .collect();
        Ok(Store {
            sessions: data.sessions,
            batches: data.batches,
            observation_ids,
        })
    }
}

impl PartialEq for Store {
    fn eq(&self, other: &Self) -> bool {
        self.sessions == other.sessions && self.batches == other.batches
    }
}

fn invalid(observation: Option<&ObservationId>, error: ValidationError) -> SyncError {
    SyncError::Invalid {
        observation: observation.cloned(),
        error,
    }
}

fn malformed(reason: impl Into<String>) -> SyncError {
    SyncError::Malformed(reason.into())
}

impl Store {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates `batch` against the registry and the current contents
    /// without changing anything.
    pub fn check(&self, registry: &Registry, batch: &CaptureBatch) -> Result<CheckedBatch, SyncError> {
        let session = &batch.session;
        let receipt = BatchReceipt {
            session_id: session.id.clone(),
            client_id: batch.client_id.clone(),
        };
        if let Some(existing) = self.batches.get(&batch.batch_id) {
            // A replay must carry exactly what was stored the first time.
            let same = existing.session_id == session.id
                && self.sessions.get(&session.id).is_some_and(|r| {
                    r.session == *session
                        && r.feedback == batch.feedback
                        && r.observations.len() == batch.observations.len()
                        && r.observations
                            .iter()
                            .zip(&batch.observations)
                            .all(|(o, d)| ObservationDraft::from(o.clone()) == *d)
                });
            return if same {
                Ok(CheckedBatch {
                    batch_id: batch.batch_id.clone(),
                    receipt,
                    record: None,
                })
            } else {
                Err(SyncError::BatchConflict(batch.batch_id.clone()))
            };
        }
        if self.sessions.contains_key(&session.id) {
            let existing = self
                .batches
                .iter()
                .find(|(_, r)| r.session_id == session.id)
                .map(|(b, _)| b.clone())
                .expect("every stored session arrived in a batch");
            return Err(SyncError::DuplicateSession {
                session: session.id.clone(),
                existing,
            });
        }

        if session.state != SessionState::Committed {
            return Err(malformed("session is not committed"));
        }
        let Some(closed_at) = session.closed_at else {
            return Err(malformed("committed session has no closing time"));
        };
        if session.students.is_empty() {
            return Err(malformed("session has no students"));
        }
        let unknown = |kind, id: &dyn std::fmt::Display| {
            invalid(
                None,
                ValidationError::UnknownReference {
                    kind,
                    id: id.to_string(),
                },
            )
        };
        if registry.location(session.location_id.as_str()).is_none() {
            return Err(unknown(EntityKind::Location, &session.location_id));
        }
        if registry.staff_member(session.staff_id.as_str()).is_none() {
            return Err(unknown(EntityKind::Staff, &session.staff_id));
        }
        if let Some(p) = session.offered_procedures.iter().find(|p| registry.procedure(p.as_str()).is_none()) {
            return Err(unknown(EntityKind::Procedure, p));
        }
        for (student, lock) in &session.students {
            if registry.student(student.as_str()).is_none() {
                return Err(unknown(EntityKind::Student, student));
            }
            match lock {
                LockState::Open => return Err(malformed(format!("student {student} never signed out"))),
                LockState::StudentSignedOut { at } if *at < session.opened_at || *at > closed_at => {
                    return Err(malformed(format!("sign-out of {student} lies outside the session")))
                }
                _ => {}
            }
        }

        let mut seen = BTreeSet::new();
        let mut observations = Vec::with_capacity(batch.observations.len());
        for draft in &batch.observations {
            let obs = validate_observation(draft, registry, session).map_err(|e| invalid(Some(&draft.id), e))?;
            if !seen.insert(obs.id.clone()) || self.observation_ids.contains(&obs.id) {
                return Err(SyncError::DuplicateObservation(obs.id));
            }
            observations.push(obs);
        }

        if batch.feedback.keys().ne(session.students.keys()) {
            return Err(malformed("feedback snapshots do not match the attendance list"));
        }
        for (student, snapshot) in &batch.feedback {
            let Some(LockState::StudentSignedOut { at }) = session.lock_state(student) else {
                unreachable!("attendance checked above");
            };
            if snapshot.signed_out_at != at {
                return Err(malformed(format!("feedback of {student} is not stamped at sign-out")));
            }
            let expected = observations.iter().filter(|o| &o.student_id == student).map(FeedbackEntry::from);
            if snapshot.entries.iter().cloned().ne(expected) {
                return Err(malformed(format!("feedback of {student} differs from the recorded observations")));
            }
        }

        Ok(CheckedBatch {
            batch_id: batch.batch_id.clone(),
            receipt,
            record: Some(SessionRecord {
                session: session.clone(),
                observations,
                feedback: batch.feedback.clone(),
            }),
        })
    }

    /// Applies a previously checked batch. The caller must not have modified
    /// the store in between.
    pub fn commit(&mut self, checked: CheckedBatch) -> ApplyOutcome {
        let session_id = checked.receipt.session_id.clone();
        let Some(record) = checked.record else {
            return ApplyOutcome::Duplicate { session_id };
        };
        let observations = record.observations.len();
        self.observation_ids.extend(record.observations.iter().map(|o| o.id.clone()));
        self.sessions.insert(session_id.clone(), record);
        self.batches.insert(checked.batch_id, checked.receipt);
        ApplyOutcome::Applied {
            session_id,
            observations,
        }
    }

    /// Idempotent, all-or-nothing batch application.
    pub fn apply(&mut self, registry: &Registry, batch: &CaptureBatch) -> Result<ApplyOutcome, SyncError> {
        let checked = self.check(registry, batch)?;
        Ok(self.commit(checked))
    }

    /// Re-checks every stored session against `registry` as if it were being
    /// synced for the first time. Used before replacing the registry.
    pub fn revalidate(&self, registry: &Registry) -> Result<(), SyncError> {
        let scratch = Store::new();
        for (batch_id, receipt) in &self.batches {
            let record = &self.sessions[&receipt.session_id];
            let batch = CaptureBatch {
                batch_id: batch_id.clone(),
                client_id: receipt.client_id.clone(),
                session: record.session.clone(),
                observations: record.observations.iter().cloned().map(ObservationDraft::from).collect(),
                feedback: record.feedback.clone(),
            };
            scratch.check(registry, &batch)?;
        }
        Ok(())
    }

    pub fn session(&self, id: &str) -> Option<&SessionRecord> {
        self.sessions.get(id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &SessionRecord> {
        self.sessions.values()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn batch_count(&self) -> usize {
        self.batches.len()
    }

    pub fn observation_count(&self) -> usize {
        self.observation_ids.len()
    }

    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.sessions.values().flat_map(|r| r.observations.iter())
    }

    /// SHA-256 over the canonical serialization of the stored sessions and
    /// batch receipts.
    pub fn state_hash(&self) -> String {
        let mut hasher = Sha256::new();
        serde_json::to_writer(HashWriter(&mut hasher), self).expect("store always serializes");
        hex::encode(hasher.finalize())
    }
}

struct HashWriter<'a>(&'a mut Sha256);

impl std::io::Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}
