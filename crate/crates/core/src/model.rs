//! Shared entities: outcomes, workflows, people, places, observations and
//! sessions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::*;

/// Maximum length of an observation comment, in characters.
pub const MAX_COMMENT_CHARS: usize = 2000;

/// One point on the 6-point developmental scale.
///
/// Only the ordinal value is stored; analytics need nothing beyond order and
/// threshold comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct DevelopmentalIndicator(u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("indicator {0} is outside the 1-6 scale")]
pub struct ScaleViolation(pub u8);

impl DevelopmentalIndicator {
    pub const MIN: Self = Self(1);
    pub const MAX: Self = Self(6);

    pub fn new(value: u8) -> Result<Self, ScaleViolation> {
        if (Self::MIN.0..=Self::MAX.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(ScaleViolation(value))
        }
    }

    /// Compile-time constructor; `None` when off the scale.
    pub const fn new_const(value: u8) -> Option<Self> {
        if value >= 1 && value <= 6 {
            Some(Self(value))
        } else {
            None
        }
    }

    pub const fn get(self) -> u8 {
        self.0
    }

    /// All six points in ascending order.
    pub fn all() -> impl DoubleEndedIterator<Item = Self> {
        (1..=6).map(Self)
    }

    /// Zero-based position on the scale, for histogram indexing.
    pub const fn index(self) -> usize {
        (self.0 - 1) as usize
    }

    /// Clamps an arbitrary real to the scale after rounding half away from zero.
    pub fn round_clamped(value: f64) -> Self {
        Self(value.round().clamp(1.0, 6.0) as u8)
    }
}

impl TryFrom<u8> for DevelopmentalIndicator {
    type Error = ScaleViolation;
    fn try_from(value: u8) -> Result<Self, ScaleViolation> {
        Self::new(value)
    }
}

impl From<DevelopmentalIndicator> for u8 {
    fn from(value: DevelopmentalIndicator) -> u8 {
        value.0
    }
}

impl fmt::Display for DevelopmentalIndicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Authority {
    #[default]
    Internal,
    ExternalStakeholder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningOutcome {
    pub id: OutcomeId,
    pub label: String,
    #[serde(default)]
    pub authority: Authority,
}

/// A single observable step. An item may appear in the workflows of several
/// procedures; its position is defined by each procedure's workflow order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowItem {
    pub id: ItemId,
    pub label: String,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub outcomes: BTreeSet<OutcomeId>,
}

/// A block of taught material. Only its outcome mapping is tracked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeachingUnit {
    pub id: TeachingUnitId,
    pub label: String,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub outcomes: BTreeSet<OutcomeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Procedure {
    pub id: ProcedureId,
    pub label: String,
    pub workflow: Vec<ItemId>,
}

impl Procedure {
    /// Zero-based position of `item` in this procedure's workflow.
    pub fn position(&self, item: &ItemId) -> Option<usize> {
        self.workflow.iter().position(|i| i == item)
    }

    pub fn contains(&self, item: &ItemId) -> bool {
        self.position(item).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Student {
    pub id: StudentId,
    pub cohort: String,
    pub enrollment_date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaffMember {
    pub id: StaffId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub id: LocationId,
    pub name: String,
    pub available_procedures: BTreeSet<ProcedureId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageStats {
    pub attempts: u64,
    pub correct: u64,
}

impl UsageStats {
    /// Proportion answered correctly; `None` before the first attempt.
    pub fn difficulty(&self) -> Option<f64> {
        (self.attempts > 0).then(|| self.correct as f64 / self.attempts as f64)
    }

    pub fn is_consistent(&self) -> bool {
        self.correct <= self.attempts
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamQuestion {
    pub id: QuestionId,
    pub text: String,
    pub outcome_ids: BTreeSet<OutcomeId>,
    #[serde(default)]
    pub usage_stats: UsageStats,
}

/// A bookable treatment opportunity for one procedure on one day.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientSlot {
    pub id: SlotId,
    pub procedure_id: ProcedureId,
    pub date: NaiveDate,
    pub capacity: u32,
}

/// Observation as submitted by a capture client, before validation. The
/// indicator is still a raw integer here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationDraft {
    pub id: ObservationId,
    pub session_id: SessionId,
    pub student_id: StudentId,
    pub staff_id: StaffId,
    pub workflow_item_id: ItemId,
    pub procedure_id: ProcedureId,
    pub indicator: u8,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
}

/// One staff judgment of one student on one workflow item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub id: ObservationId,
    pub session_id: SessionId,
    pub student_id: StudentId,
    pub staff_id: StaffId,
    pub workflow_item_id: ItemId,
    pub procedure_id: ProcedureId,
    pub indicator: DevelopmentalIndicator,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
}

impl Observation {
    /// Total order used by every time-ordered view: timestamp, then id.
    pub fn chronological_key(&self) -> (DateTime<Utc>, &str) {
        (self.timestamp, self.id.as_str())
    }
}

impl From<Observation> for ObservationDraft {
    fn from(o: Observation) -> Self {
        Self {
            id: o.id,
            session_id: o.session_id,
            student_id: o.student_id,
            staff_id: o.staff_id,
            workflow_item_id: o.workflow_item_id,
            procedure_id: o.procedure_id,
            indicator: o.indicator.get(),
            timestamp: o.timestamp,
            comment: o.comment,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum LockState {
    Open,
    StudentSignedOut { at: DateTime<Utc> },
}

impl LockState {
    pub fn is_open(&self) -> bool {
        matches!(self, LockState::Open)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    Committed,
}

/// One supervised clinical training attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: SessionId,
    pub location_id: LocationId,
    pub staff_id: StaffId,
    /// Procedures whose workflows were offered, taken from the location.
    pub offered_procedures: BTreeSet<ProcedureId>,
    pub students: BTreeMap<StudentId, LockState>,
    pub opened_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_at: Option<DateTime<Utc>>,
    pub state: SessionState,
}

impl Session {
    pub fn lock_state(&self, student: &StudentId) -> Option<LockState> {
        self.students.get(student).copied()
    }

    pub fn all_signed_out(&self) -> bool {
        self.students.values().all(|s| !s.is_open())
    }

    /// Whether `at` falls inside the session's opening interval (inclusive).
    pub fn covers(&self, at: DateTime<Utc>) -> bool {
        at >= self.opened_at && self.closed_at.is_none_or(|closed| at <= closed)
    }
}
