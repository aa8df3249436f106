//! Entity registry and its document format.
//!
//! The registry is loaded from a TOML document with one array-of-tables per
//! section:
//!
//! ```toml
//! [[outcomes]]
//! id = "LO-001"
//! label = "Takes a medical history"
//! authority = "external-stakeholder"   # or "internal" (default)
//!
//! [[items]]
//! id = "EXT-01"
//! label = "Confirms consent"
//! outcomes = ["LO-001"]
//!
//! [[procedures]]
//! id = "EXT"
//! label = "Extraction"
//! workflow = ["EXT-01", "EXT-02"]
//! ```
//!
//! plus `teaching_units`, `staff`, `students`, `locations`, `questions` and
//! `slots`. Every section is optional and unknown keys are ignored, so newer
//! documents stay readable by older builds. Loading is all-or-nothing: any
//! duplicate id, dangling reference or invalid entity rejects the whole
//! document. A loaded registry is immutable; a change means loading a new one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::*;
use crate::model::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntityKind {
    Outcome,
    TeachingUnit,
    Item,
    Procedure,
    Student,
    Staff,
    Location,
    Question,
    Slot,
    Session,
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityKind::Outcome => "outcome",
            EntityKind::TeachingUnit => "teaching-unit",
            EntityKind::Item => "item",
            EntityKind::Procedure => "procedure",
            EntityKind::Student => "student",
            EntityKind::Staff => "staff",
            EntityKind::Location => "location",
            EntityKind::Question => "question",
            EntityKind::Slot => "slot",
            EntityKind::Session => "session",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("document does not parse: {0}")]
    Parse(String),
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: EntityKind, id: String },
    #[error("{from_kind} {from_id} references undefined {to_kind} {to_id}")]
    DanglingReference {
        from_kind: EntityKind,
        from_id: String,
        to_kind: EntityKind,
        to_id: String,
    },
    #[error("{kind} {id} is invalid: {reason}")]
    Invalid {
        kind: EntityKind,
        id: String,
        reason: String,
    },
}

impl RegistryError {
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::Parse(_) => "parse-error",
            RegistryError::DuplicateId { .. } => "duplicate-id",
            RegistryError::DanglingReference { .. } => "dangling-reference",
            RegistryError::Invalid { .. } => "invalid-entity",
        }
    }
}

/// Serialized form of a registry. Sections are plain lists in document order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryDocument {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outcomes: Vec<LearningOutcome>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub teaching_units: Vec<TeachingUnit>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub items: Vec<WorkflowItem>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub procedures: Vec<Procedure>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub staff: Vec<StaffMember>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub students: Vec<Student>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub locations: Vec<Location>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub questions: Vec<ExamQuestion>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slots: Vec<PatientSlot>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    outcomes: BTreeMap<OutcomeId, LearningOutcome>,
    teaching_units: BTreeMap<TeachingUnitId, TeachingUnit>,
    items: BTreeMap<ItemId, WorkflowItem>,
    procedures: BTreeMap<ProcedureId, Procedure>,
    staff: BTreeMap<StaffId, StaffMember>,
    students: BTreeMap<StudentId, Student>,
    locations: BTreeMap<LocationId, Location>,
    questions: BTreeMap<QuestionId, ExamQuestion>,
    slots: BTreeMap<SlotId, PatientSlot>,
}

fn index<K, V>(
    kind: EntityKind,
    entries: Vec<V>,
    key: impl Fn(&V) -> &K,
) -> Result<BTreeMap<K, V>, RegistryError>
where
    K: Ord + Clone + fmt::Display,
{
    let mut map = BTreeMap::new();
    for entry in entries {
        let id = key(&entry).clone();
        if map.contains_key(&id) {
            return Err(RegistryError::DuplicateId {
                kind,
                id: id.to_string(),
            });
        }
        map.insert(id, entry);
    }
    Ok(map)
}

fn dangling(
    from_kind: EntityKind,
    from_id: &impl fmt::Display,
    to_kind: EntityKind,
    to_id: &impl fmt::Display,
) -> RegistryError {
    RegistryError::DanglingReference {
        from_kind,
        from_id: from_id.to_string(),
        to_kind,
        to_id: to_id.to_string(),
    }
}

fn invalid(kind: EntityKind, id: &impl fmt::Display, reason: impl Into<String>) -> RegistryError {
    RegistryError::Invalid {
        kind,
        id: id.to_string(),
        reason: reason.into(),
    }
}

impl Registry {
    /// Parses and resolves a TOML entity-definition document.
    pub fn load(document: &str) -> Result<Self, RegistryError> {
        let doc: RegistryDocument =
            toml::from_str(document).map_err(|e| RegistryError::Parse(e.to_string()))?;
        Self::from_document(doc)
    }

    pub fn from_document(doc: RegistryDocument) -> Result<Self, RegistryError> {
        let reg = Registry {
            outcomes: index(EntityKind::Outcome, doc.outcomes, |o| &o.id)?,
            teaching_units: index(EntityKind::TeachingUnit, doc.teaching_units, |u| &u.id)?,
            items: index(EntityKind::Item, doc.items, |i| &i.id)?,
            procedures: index(EntityKind::Procedure, doc.procedures, |p| &p.id)?,
            staff: index(EntityKind::Staff, doc.staff, |s| &s.id)?,
            students: index(EntityKind::Student, doc.students, |s| &s.id)?,
            locations: index(EntityKind::Location, doc.locations, |l| &l.id)?,
            questions: index(EntityKind::Question, doc.questions, |q| &q.id)?,
            slots: index(EntityKind::Slot, doc.slots, |s| &s.id)?,
        };
        reg.check_references()?;
        Ok(reg)
    }

    fn check_references(&self) -> Result<(), RegistryError> {
        for item in self.items.values() {
            if let Some(o) = item.outcomes.iter().find(|o| !self.outcomes.contains_key(*o)) {
                return Err(dangling(EntityKind::Item, &item.id, EntityKind::Outcome, o));
            }
        }
        for unit in self.teaching_units.values() {
            if let Some(o) = unit.outcomes.iter().find(|o| !self.outcomes.contains_key(*o)) {
                return Err(dangling(EntityKind::TeachingUnit, &unit.id, EntityKind::Outcome, o));
            }
        }
        for proc in self.procedures.values() {
            if proc.workflow.is_empty() {
                return Err(invalid(EntityKind::Procedure, &proc.id, "workflow is empty"));
            }
            let mut seen = BTreeSet::new();
            for item in &proc.workflow {
                if !self.items.contains_key(item) {
                    return Err(dangling(EntityKind::Procedure, &proc.id, EntityKind::Item, item));
                }
                if !seen.insert(item) {
                    return Err(invalid(
                        EntityKind::Procedure,
                        &proc.id,
                        format!("item {item} appears twice in the workflow"),
                    ));
                }
            }
        }
        for loc in self.locations.values() {
            if loc.available_procedures.is_empty() {
                return Err(invalid(EntityKind::Location, &loc.id, "no available procedures"));
            }
            if let Some(p) = loc
                .available_procedures
                .iter()
                .find(|p| !self.procedures.contains_key(*p))
            {
                return Err(dangling(EntityKind::Location, &loc.id, EntityKind::Procedure, p));
            }
        }
        for q in self.questions.values() {
            if q.outcome_ids.is_empty() {
                return Err(invalid(EntityKind::Question, &q.id, "no mapped outcomes"));
            }
            if let Some(o) = q.outcome_ids.iter().find(|o| !self.outcomes.contains_key(*o)) {
                return Err(dangling(EntityKind::Question, &q.id, EntityKind::Outcome, o));
            }
            if !q.usage_stats.is_consistent() {
                return Err(invalid(EntityKind::Question, &q.id, "correct count exceeds attempts"));
            }
        }
        for slot in self.slots.values() {
            if slot.capacity == 0 {
                return Err(invalid(EntityKind::Slot, &slot.id, "capacity must be at least 1"));
            }
            if !self.procedures.contains_key(&slot.procedure_id) {
                return Err(dangling(
                    EntityKind::Slot,
                    &slot.id,
                    EntityKind::Procedure,
                    &slot.procedure_id,
                ));
            }
        }
        Ok(())
    }

    pub fn to_document(&self) -> RegistryDocument {
        RegistryDocument {
            outcomes: self.outcomes.values().cloned().collect(),
            teaching_units: self.teaching_units.values().cloned().collect(),
            items: self.items.values().cloned().collect(),
            procedures: self.procedures.values().cloned().collect(),
            staff: self.staff.values().cloned().collect(),
            students: self.students.values().cloned().collect(),
            locations: self.locations.values().cloned().collect(),
            questions: self.questions.values().cloned().collect(),
            slots: self.slots.values().cloned().collect(),
        }
    }

    /// Serializes to the TOML document accepted by [`Registry::load`].
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_document()).expect("registry documents always serialize")
    }

    pub fn outcome(&self, id: &str) -> Option<&LearningOutcome> {
        self.outcomes.get(id)
    }
    pub fn teaching_unit(&self, id: &str) -> Option<&TeachingUnit> {
        self.teaching_units.get(id)
    }
    pub fn item(&self, id: &str) -> Option<&WorkflowItem> {
        self.items.get(id)
    }
    pub fn procedure(&self, id: &str) -> Option<&Procedure> {
        self.procedures.get(id)
    }
    pub fn staff_member(&self, id: &str) -> Option<&StaffMember> {
        self.staff.get(id)
    }
    pub fn student(&self, id: &str) -> Option<&Student> {
        self.students.get(id)
    }
    pub fn location(&self, id: &str) -> Option<&Location> {
        self.locations.get(id)
    }
    pub fn question(&self, id: &str) -> Option<&ExamQuestion> {
        self.questions.get(id)
    }
    pub fn slot(&self, id: &str) -> Option<&PatientSlot> {
        self.slots.get(id)
    }

    pub fn outcomes(&self) -> impl Iterator<Item = &LearningOutcome> {
        self.outcomes.values()
    }
    pub fn teaching_units(&self) -> impl Iterator<Item = &TeachingUnit> {
        self.teaching_units.values()
    }
    pub fn items(&self) -> impl Iterator<Item = &WorkflowItem> {
        self.items.values()
    }
    pub fn procedures(&self) -> impl Iterator<Item = &Procedure> {
        self.procedures.values()
    }
    pub fn staff(&self) -> impl Iterator<Item = &StaffMember> {
        self.staff.values()
    }
    pub fn students(&self) -> impl Iterator<Item = &Student> {
        self.students.values()
    }
    pub fn locations(&self) -> impl Iterator<Item = &Location> {
        self.locations.values()
    }
    pub fn questions(&self) -> impl Iterator<Item = &ExamQuestion> {
        self.questions.values()
    }
    pub fn slots(&self) -> impl Iterator<Item = &PatientSlot> {
        self.slots.values()
    }

    pub fn counts(&self) -> RegistryCounts {
        RegistryCounts {
            outcomes: self.outcomes.len(),
            teaching_units: self.teaching_units.len(),
            items: self.items.len(),
            procedures: self.procedures.len(),
            staff: self.staff.len(),
            students: self.students.len(),
            locations: self.locations.len(),
            questions: self.questions.len(),
            slots: self.slots.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.counts() == RegistryCounts::default()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryCounts {
    pub outcomes: usize,
    pub teaching_units: usize,
    pub items: usize,
    pub procedures: usize,
    pub staff: usize,
    pub students: usize,
    pub locations: usize,
    pub questions: usize,
    pub slots: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("unknown {kind} {id}")]
    UnknownReference { kind: EntityKind, id: String },
    #[error(transparent)]
    ScaleViolation(#[from] ScaleViolation),
    #[error("item {item} is not part of procedure {procedure}")]
    ItemProcedureMismatch { item: ItemId, procedure: ProcedureId },
    #[error("record of student {student} in session {session} is locked")]
    LockedRecord { session: SessionId, student: StudentId },
    #[error("student {student} is not in the attendance of session {session}")]
    NotInAttendance { session: SessionId, student: StudentId },
    #[error("procedure {procedure} is not offered at location {location}")]
    ItemNotInLocationWorkflows {
        item: ItemId,
        procedure: ProcedureId,
        location: LocationId,
    },
    #[error("observation {observation} belongs to session {found}, not {expected}")]
    SessionMismatch {
        observation: ObservationId,
        expected: SessionId,
        found: SessionId,
    },
    #[error("observation {observation} at {timestamp} lies outside its session")]
    OutsideSession {
        observation: ObservationId,
        timestamp: chrono::DateTime<chrono::Utc>,
    },
    #[error("comment on observation {observation} is {chars} characters, limit {MAX_COMMENT_CHARS}")]
    CommentTooLong { observation: ObservationId, chars: usize },
}

impl ValidationError {
    pub fn code(&self) -> &'static str {
        match self {
            ValidationError::UnknownReference { .. } => "unknown-reference",
            ValidationError::ScaleViolation(_) => "scale-violation",
            ValidationError::ItemProcedureMismatch { .. } => "item-procedure-mismatch",
            ValidationError::LockedRecord { .. } => "locked-record",
            ValidationError::NotInAttendance { .. } => "not-in-attendance",
            ValidationError::ItemNotInLocationWorkflows { .. } => "item-not-in-location-workflows",
            ValidationError::SessionMismatch { .. } => "session-mismatch",
            ValidationError::OutsideSession { .. } => "outside-session",
            ValidationError::CommentTooLong { .. } => "comment-too-long",
        }
    }
}

fn unknown(kind: EntityKind, id: &impl fmt::Display) -> ValidationError {
    ValidationError::UnknownReference {
        kind,
        id: id.to_string(),
    }
}

/// Checks a draft observation against the registry and its enclosing session.
///
/// A record counts as locked once the student has signed out of the session:
/// anything stamped after the sign-out instant is rejected. Neither input is
/// modified; on success the same observation comes back with a typed
/// indicator.
pub fn validate_observation(
    draft: &ObservationDraft,
    registry: &Registry,
    session: &Session,
) -> Result<Observation, ValidationError> {
    let indicator = DevelopmentalIndicator::new(draft.indicator)?;
    if let Some(comment) = &draft.comment {
        let chars = comment.chars().count();
        if chars > MAX_COMMENT_CHARS {
            return Err(ValidationError::CommentTooLong {
                observation: draft.id.clone(),
                chars,
            });
        }
    }
    if draft.session_id != session.id {
        return Err(ValidationError::SessionMismatch {
            observation: draft.id.clone(),
            expected: session.id.clone(),
            found: draft.session_id.clone(),
        });
    }
    if registry.student(draft.student_id.as_str()).is_none() {
        return Err(unknown(EntityKind::Student, &draft.student_id));
    }
    if registry.staff_member(draft.staff_id.as_str()).is_none() {
        return Err(unknown(EntityKind::Staff, &draft.staff_id));
    }
    if registry.item(draft.workflow_item_id.as_str()).is_none() {
        return Err(unknown(EntityKind::Item, &draft.workflow_item_id));
    }
    let procedure = registry
        .procedure(draft.procedure_id.as_str())
        .ok_or_else(|| unknown(EntityKind::Procedure, &draft.procedure_id))?;
    if !procedure.contains(&draft.workflow_item_id) {
        return Err(ValidationError::ItemProcedureMismatch {
            item: draft.workflow_item_id.clone(),
            procedure: draft.procedure_id.clone(),
        });
    }
    if !session.offered_procedures.contains(&draft.procedure_id) {
        return Err(ValidationError::ItemNotInLocationWorkflows {
            item: draft.workflow_item_id.clone(),
            procedure: draft.procedure_id.clone(),
            location: session.location_id.clone(),
        });
    }
    match session.lock_state(&draft.student_id) {
        None => {
            return Err(ValidationError::NotInAttendance {
                session: session.id.clone(),
                student: draft.student_id.clone(),
            })
        }
        Some(LockState::StudentSignedOut { at }) if draft.timestamp > at => {
            return Err(ValidationError::LockedRecord {
                session: session.id.clone(),
                student: draft.student_id.clone(),
            })
        }
        Some(_) => {}
    }
    if !session.covers(draft.timestamp) {
        return Err(ValidationError::OutsideSession {
            observation: draft.id.clone(),
            timestamp: draft.timestamp,
        });
    }
    Ok(Observation {
        id: draft.id.clone(),
        session_id: draft.session_id.clone(),
        student_id: draft.student_id.clone(),
        staff_id: draft.staff_id.clone(),
        workflow_item_id: draft.workflow_item_id.clone(),
        procedure_id: draft.procedure_id.clone(),
        indicator,
        timestamp: draft.timestamp,
        comment: draft.comment.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    const SMALL: &str = r#"
[[outcomes]]
id = "LO1"
label = "History taking"

[[outcomes]]
id = "LO2"
label = "Infection control"
authority = "external-stakeholder"

[[items]]
id = "I1"
label = "Consent"
outcomes = ["LO1"]

[[items]]
id = "I2"
label = "Gloves"
outcomes = ["LO1", "LO2"]

[[procedures]]
id = "P1"
label = "Scale and polish"
workflow = ["I1", "I2"]

[[procedures]]
id = "P2"
label = "Extraction"
workflow = ["I2"]

[[staff]]
id = "S1"
name = "Dr One"

[[students]]
id = "ST1"
cohort = "2020"
enrollment_date = "2020-09-07"

[[students]]
id = "ST2"
cohort = "2020"
enrollment_date = "2020-09-07"

[[locations]]
id = "L1"
name = "Clinic A"
available_procedures = ["P1"]
"#;

    fn registry() -> Registry {
        Registry::load(SMALL).unwrap()
    }

    fn session(reg: &Registry) -> Session {
        let loc = reg.location("L1").unwrap();
        Session {
            id: SessionId::new("SE1").unwrap(),
            location_id: loc.id.clone(),
            staff_id: StaffId::new("S1").unwrap(),
            offered_procedures: loc.available_procedures.clone(),
            students: [
                (StudentId::new("ST1").unwrap(), LockState::Open),
                (StudentId::new("ST2").unwrap(), LockState::Open),
            ]
            .into_iter()
            .collect(),
            opened_at: Utc.with_ymd_and_hms(2021, 1, 4, 9, 0, 0).unwrap(),
            closed_at: None,
            state: SessionState::Active,
        }
    }

    fn draft(indicator: u8) -> ObservationDraft {
        ObservationDraft {
            id: ObservationId::new("O1").unwrap(),
            session_id: SessionId::new("SE1").unwrap(),
            student_id: StudentId::new("ST1").unwrap(),
            staff_id: StaffId::new("S1").unwrap(),
            workflow_item_id: ItemId::new("I2").unwrap(),
            procedure_id: ProcedureId::new("P1").unwrap(),
            indicator,
            timestamp: Utc.with_ymd_and_hms(2021, 1, 4, 9, 30, 0).unwrap(),
            comment: None,
        }
    }

    #[test]
    fn loads_small_document() {
        let reg = registry();
        let c = reg.counts();
        assert_eq!((c.outcomes, c.items, c.procedures, c.students), (2, 2, 2, 2));
        assert_eq!(reg.procedure("P1").unwrap().position(&ItemId::new("I2").unwrap()), Some(1));
        assert_eq!(reg.outcome("LO2").unwrap().authority, Authority::ExternalStakeholder);
    }

    #[test]
    fn empty_document_is_empty_registry() {
        let reg = Registry::load("").unwrap();
        assert!(reg.is_empty());
        assert_eq!(Registry::load(&reg.to_toml()).unwrap(), reg);
    }

    #[test]
    fn dangling_workflow_item_rejected() {
        let doc = SMALL.replace(r#"workflow = ["I2"]"#, r#"workflow = ["I9"]"#);
        let err = Registry::load(&doc).unwrap_err();
        assert_eq!(err.code(), "dangling-reference");
        assert!(matches!(err, RegistryError::DanglingReference { ref to_id, .. } if to_id == "I9"));
    }

    #[test]
    fn duplicate_and_parse_errors() {
        let doc = format!("{SMALL}\n[[staff]]\nid = \"S1\"\nname = \"Again\"\n");
        assert_eq!(Registry::load(&doc).unwrap_err().code(), "duplicate-id");
        assert_eq!(Registry::load("[[outcomes]\n").unwrap_err().code(), "parse-error");
    }

    #[test]
    fn invalid_entities_rejected() {
        let doc = SMALL.replace(r#"workflow = ["I2"]"#, r#"workflow = []"#);
        assert_eq!(Registry::load(&doc).unwrap_err().code(), "invalid-entity");
        let doc = SMALL.replace(r#"workflow = ["I2"]"#, r#"workflow = ["I2", "I2"]"#);
        assert_eq!(Registry::load(&doc).unwrap_err().code(), "invalid-entity");
    }

    #[test]
    fn round_trips_through_toml() {
        let reg = registry();
        assert_eq!(Registry::load(&reg.to_toml()).unwrap(), reg);
    }

    #[test]
    fn accepts_valid_observation_unchanged() {
        let reg = registry();
        let s = session(&reg);
        let d = draft(4);
        let obs = validate_observation(&d, &reg, &s).unwrap();
        assert_eq!(ObservationDraft::from(obs), d);
    }

    #[test]
    fn rejects_off_scale_indicator() {
        let reg = registry();
        let err = validate_observation(&draft(7), &reg, &session(&reg)).unwrap_err();
        assert_eq!(err, ValidationError::ScaleViolation(ScaleViolation(7)));
    }

    #[test]
    fn rejects_after_student_signout() {
        let reg = registry();
        let mut s = session(&reg);
        s.students.insert(
            StudentId::new("ST1").unwrap(),
            LockState::StudentSignedOut {
                at: Utc.with_ymd_and_hms(2021, 1, 4, 9, 10, 0).unwrap(),
            },
        );
        assert_eq!(validate_observation(&draft(4), &reg, &s).unwrap_err().code(), "locked-record");
    }

    #[test]
    fn reference_errors() {
        let reg = registry();
        let s = session(&reg);

        let mut d = draft(4);
        d.staff_id = StaffId::new("S9").unwrap();
        assert_eq!(validate_observation(&d, &reg, &s).unwrap_err().code(), "unknown-reference");

        let mut d = draft(4);
        d.procedure_id = ProcedureId::new("P2").unwrap();
        d.workflow_item_id = ItemId::new("I1").unwrap();
        assert_eq!(validate_observation(&d, &reg, &s).unwrap_err().code(), "item-procedure-mismatch");

        let mut d = draft(4);
        d.procedure_id = ProcedureId::new("P2").unwrap();
        assert_eq!(
            validate_observation(&d, &reg, &s).unwrap_err().code(),
            "item-not-in-location-workflows"
        );

        let mut d = draft(4);
        d.timestamp = Utc.with_ymd_and_hms(2021, 1, 4, 8, 0, 0).unwrap();
        assert_eq!(validate_observation(&d, &reg, &s).unwrap_err().code(), "outside-session");

        let mut d = draft(4);
        d.comment = Some("x".repeat(MAX_COMMENT_CHARS + 1));
        assert_eq!(validate_observation(&d, &reg, &s).unwrap_err().code(), "comment-too-long");
    }
}
