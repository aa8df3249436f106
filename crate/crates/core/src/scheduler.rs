//! Allocation of students to scarce patient slots, with holding patterns for
//! students who are already consistent on a procedure.
//!
//! Each (student, procedure) pair asks for at most one slot per planning
//! round. Pairs that meet the hold rule are set aside; the rest are matched
//! greedily by priority. Slots left over after that are offered to held
//! students of the same procedure, who then leave the holding list for this
//! round so that no pair is ever both held and assigned.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{portfolio, ObservationLog, PortfolioConfig};
use crate::ids::*;
use crate::model::{DevelopmentalIndicator, PatientSlot};
use crate::registry::Registry;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedulerError {
    #[error("invalid scheduler config: {0}")]
    Config(String),
}

impl SchedulerError {
    pub fn code(&self) -> &'static str {
        "invalid-config"
    }
}

/// Planning parameters. The hold defaults (0.9 and 5 sessions) are local
/// configuration choices and carry no external authority.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub hold_consistency: f64,
    pub hold_min_experience: u32,
    /// Experience level below which the experience term of the score is non-zero.
    pub min_experience: u32,
    pub consistency_weight: f64,
    pub experience_weight: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            hold_consistency: 0.9,
            hold_min_experience: 5,
            min_experience: 5,
            consistency_weight: 1.0,
            experience_weight: 1.0,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        let bad = |m: &str| Err(SchedulerError::Config(m.to_owned()));
        if !(0.0..=1.0).contains(&self.hold_consistency) {
            return bad("hold_consistency must be within [0, 1]");
        }
        if self.min_experience == 0 {
            return bad("min_experience must be at least 1");
        }
        for w in [self.consistency_weight, self.experience_weight] {
            if !w.is_finite() || w < 0.0 {
                return bad("weights must be finite and non-negative");
            }
        }
        Ok(())
    }

    fn holds(&self, standing: &Standing) -> bool {
        standing.consistency.is_some_and(|c| c >= self.hold_consistency) && standing.experience >= self.hold_min_experience
    }
}

/// A student's current position on one procedure.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Standing {
    pub consistency: Option<f64>,
    pub experience: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub student_id: StudentId,
    pub procedure_id: ProcedureId,
    #[serde(flatten)]
    pub standing: Standing,
}

/// Per (student, procedure) standings the planner reads. Missing pairs count
/// as never practised.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<SnapshotEntry>", into = "Vec<SnapshotEntry>")]
pub struct AnalyticsSnapshot {
    entries: BTreeMap<(StudentId, ProcedureId), Standing>,
}

impl From<Vec<SnapshotEntry>> for AnalyticsSnapshot {
    fn from(entries: Vec<SnapshotEntry>) -> Self {
        let mut snapshot = AnalyticsSnapshot::default();
        for e in entries {
            snapshot.insert(e.student_id, e.procedure_id, e.standing);
        }
        snapshot
    }
}

impl From<AnalyticsSnapshot> for Vec<SnapshotEntry> {
    fn from(snapshot: AnalyticsSnapshot) -> Self {
        snapshot
            .entries
            .into_iter()
            .map(|((student_id, procedure_id), standing)| SnapshotEntry {
                student_id,
                procedure_id,
                standing,
            })
            .collect()
    }
}

impl AnalyticsSnapshot {
    pub fn insert(&mut self, student: StudentId, procedure: ProcedureId, standing: Standing) {
        self.entries.insert((student, procedure), standing);
    }

    pub fn standing(&self, student: &StudentId, procedure: &ProcedureId) -> Standing {
        // Tuple keys of Arc-backed ids cannot be borrowed as (&str, &str), so
        // the lookup clones two reference-counted pointers.
        self.entries
            .get(&(student.clone(), procedure.clone()))
            .copied()
            .unwrap_or_default()
    }

    pub fn procedures(&self) -> BTreeSet<&ProcedureId> {
        self.entries.keys().map(|(_, p)| p).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Per-procedure consistency and experience for each student, computed
    /// at `threshold` over the student's whole history.
    pub fn from_log(
        log: &ObservationLog,
        registry: &Registry,
        students: &[StudentId],
        threshold: DevelopmentalIndicator,
    ) -> Self {
        let config = PortfolioConfig {
            indicator_threshold: threshold,
            ..Default::default()
        };
        let mut snapshot = AnalyticsSnapshot::default();
        for s in students {
            let entries = portfolio(log, registry, s, &config).expect("default sufficiency is valid");
            for e in entries {
                snapshot.insert(
                    s.clone(),
                    e.procedure_id,
                    Standing {
                        consistency: e.consistency.value,
                        experience: e.experience_count,
                    },
                );
            }
        }
        snapshot
    }
}

pub fn priority_score(standing: &Standing, config: &SchedulerConfig) -> f64 {
    let inconsistency = 1.0 - standing.consistency.unwrap_or(0.0);
    let min = f64::from(config.min_experience);
    let shortfall = (min - f64::from(standing.experience)).max(0.0) / min;
    (config.consistency_weight * inconsistency + config.experience_weight * shortfall).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub student_id: StudentId,
    pub slot_id: SlotId,
    pub procedure_id: ProcedureId,
    pub score: f64,
    /// Filled from slots left over after regular demand, by a held student.
    #[serde(default)]
    pub surplus: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hold {
    pub student_id: StudentId,
    pub procedure_id: ProcedureId,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unassigned {
    pub student_id: StudentId,
    pub procedure_id: ProcedureId,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub assignments: Vec<Assignment>,
    pub holding: Vec<Hold>,
    pub unassigned: Vec<Unassigned>,
}

impl AllocationPlan {
    pub fn total_priority(&self) -> f64 {
        self.assignments.iter().map(|a| a.score).sum()
    }

    pub fn slot_load(&self) -> BTreeMap<&SlotId, u32> {
        let mut load = BTreeMap::new();
        for a in &self.assignments {
            *load.entry(&a.slot_id).or_insert(0) += 1;
        }
        load
    }

    pub fn is_assigned(&self, student: &StudentId, procedure: &ProcedureId) -> bool {
        self.assignments
            .iter()
            .any(|a| &a.student_id == student && &a.procedure_id == procedure)
    }

    pub fn is_holding(&self, student: &StudentId, procedure: &ProcedureId) -> bool {
        self.holding
            .iter()
            .any(|h| &h.student_id == student && &h.procedure_id == procedure)
    }
}

/// Score wrapper with a total order; scores are finite by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Score(f64);

impl Eq for Score {}

impl PartialOrd for Score {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Score {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Remaining capacity per procedure, earliest slot first.
struct SlotPool<'a> {
    by_procedure: HashMap<&'a ProcedureId, Vec<(&'a PatientSlot, u32)>>,
}

impl<'a> SlotPool<'a> {
    fn new(slots: &'a [PatientSlot]) -> Self {
        let mut by_procedure: HashMap<&ProcedureId, Vec<(&PatientSlot, u32)>> = HashMap::new();
        for s in slots {
            by_procedure.entry(&s.procedure_id).or_default().push((s, s.capacity));
        }
        for list in by_procedure.values_mut() {
            list.sort_by(|a, b| (a.0.date, &a.0.id).cmp(&(b.0.date, &b.0.id)));
        }
        SlotPool { by_procedure }
    }

    fn take(&mut self, procedure: &ProcedureId) -> Option<&'a SlotId> {
        let list = self.by_procedure.get_mut(procedure)?;
        let entry = list.iter_mut().find(|(_, left)| *left > 0)?;
        entry.1 -= 1;
        Some(&entry.0.id)
    }
}

struct Demand<'a> {
    student: &'a StudentId,
    procedure: &'a ProcedureId,
    score: f64,
}

/// Builds one round's plan. Demand covers every listed student against every
/// procedure that has slots or appears in the snapshot.
pub fn plan(
    students: &[StudentId],
    slots: &[PatientSlot],
    snapshot: &AnalyticsSnapshot,
    config: &SchedulerConfig,
) -> Result<AllocationPlan, SchedulerError> {
    config.validate()?;
    let students: BTreeSet<&StudentId> = students.iter().collect();
    let mut procedures: BTreeSet<&ProcedureId> = slots.iter().map(|s| &s.procedure_id).collect();
    procedures.extend(snapshot.procedures());

    let mut regular = Vec::new();
    let mut held = Vec::new();
    for s in &students {
        for p in &procedures {
            let standing = snapshot.standing(s, p);
            let demand = Demand {
                student: s,
                procedure: p,
                score: priority_score(&standing, config),
            };
            if config.holds(&standing) {
                held.push((demand, standing));
            } else {
                regular.push(demand);
            }
        }
    }

    let mut pool = SlotPool::new(slots);
    let mut counts: HashMap<&StudentId, u32> = HashMap::new();
    let mut out = AllocationPlan::default();

    // Max-heap on (score, fewest assignments, lowest student id, lowest
    // procedure id). Assignment counts only grow, so an entry whose count is
    // stale is re-pushed with its current count rather than served.
    type Key<'a> = (Score, Reverse<u32>, Reverse<&'a StudentId>, Reverse<&'a ProcedureId>);
    let mut heap: BinaryHeap<(Key, usize)> = regular
        .iter()
        .enumerate()
        .map(|(i, d)| ((Score(d.score), Reverse(0), Reverse(d.student), Reverse(d.procedure)), i))
        .collect();
    while let Some((key, i)) = heap.pop() {
        let d = &regular[i];
        let count = counts.get(d.student).copied().unwrap_or(0);
        if key.1 .0 != count {
            heap.push(((key.0, Reverse(count), key.2, key.3), i));
            continue;
        }
        match pool.take(d.procedure) {
            Some(slot) => {
                *counts.entry(d.student).or_insert(0) += 1;
                out.assignments.push(Assignment {
                    student_id: d.student.clone(),
                    slot_id: slot.clone(),
                    procedure_id: d.procedure.clone(),
                    score: d.score,
                    surplus: false,
                });
            }
            None => out.unassigned.push(Unassigned {
                student_id: d.student.clone(),
                procedure_id: d.procedure.clone(),
                score: d.score,
            }),
        }
    }

    // Surplus pass: a static order per procedure keeps a held student's
    // chance of a slot non-increasing in their own consistency.
    held.sort_by(|(a, _), (b, _)| {
        let ca = counts.get(a.student).copied().unwrap_or(0);
        let cb = counts.get(b.student).copied().unwrap_or(0);
        (a.procedure, Reverse(Score(a.score)), ca, a.student).cmp(&(b.procedure, Reverse(Score(b.score)), cb, b.student))
    });
    for (d, standing) in held {
        match pool.take(d.procedure) {
            Some(slot) => out.assignments.push(Assignment {
                student_id: d.student.clone(),
                slot_id: slot.clone(),
                procedure_id: d.procedure.clone(),
                score: d.score,
                surplus: true,
            }),
            None => out.holding.push(Hold {
                student_id: d.student.clone(),
                procedure_id: d.procedure.clone(),
                reason: format!(
                    "consistency {:.3} >= {} over {} sessions",
                    standing.consistency.unwrap_or(0.0),
                    config.hold_consistency,
                    standing.experience
                ),
            }),
        }
    }
    out.holding
        .sort_by(|a, b| (&a.student_id, &a.procedure_id).cmp(&(&b.student_id, &b.procedure_id)));
    Ok(out)
}
