//! Outcome mapping graph.
//!
//! Workflow items, teaching units and exam questions each map to one or more
//! learning outcomes. Everything that reasons "per outcome" goes through this
//! graph: coverage tables, blueprint verification and exam generation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::*;
use crate::model::{Observation, UsageStats};
use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    WorkflowItem,
    TeachingUnit,
    ExamQuestion,
}

impl std::str::FromStr for SourceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "workflow-item" | "wba" => Ok(SourceKind::WorkflowItem),
            "teaching-unit" | "teaching" => Ok(SourceKind::TeachingUnit),
            "exam-question" | "question" => Ok(SourceKind::ExamQuestion),
            other => Err(format!("unknown source kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "kebab-case")]
pub enum SourceRef {
    WorkflowItem(ItemId),
    TeachingUnit(TeachingUnitId),
    ExamQuestion(QuestionId),
}

impl SourceRef {
    pub fn kind(&self) -> SourceKind {
        match self {
            SourceRef::WorkflowItem(_) => SourceKind::WorkflowItem,
            SourceRef::TeachingUnit(_) => SourceKind::TeachingUnit,
            SourceRef::ExamQuestion(_) => SourceKind::ExamQuestion,
        }
    }

    fn id(&self) -> &str {
        match self {
            SourceRef::WorkflowItem(id) => id.as_str(),
            SourceRef::TeachingUnit(id) => id.as_str(),
            SourceRef::ExamQuestion(id) => id.as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MappingEdge {
    pub source: SourceRef,
    pub target: OutcomeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MappingError {
    #[error("edge {source_kind:?} {source_id} -> {target} references an undefined entity")]
    DanglingEdge {
        source_kind: SourceKind,
        source_id: String,
        target: OutcomeId,
    },
    #[error("duplicate edge {source_kind:?} {source_id} -> {target}")]
    DuplicateEdge {
        source_kind: SourceKind,
        source_id: String,
        target: OutcomeId,
    },
    #[error("unknown question {0}")]
    UnknownQuestion(QuestionId),
    #[error("unknown outcome {0}")]
    UnknownOutcome(OutcomeId),
    #[error("constraint on {outcome}: min {min} exceeds max {max}")]
    InvalidConstraint { outcome: OutcomeId, min: u32, max: u32 },
    #[error("more than one constraint on outcome {0}")]
    DuplicateConstraint(OutcomeId),
    #[error("size limit must be at least 1")]
    InvalidSizeLimit,
    #[error("blueprint infeasible at outcome {}: {reason}", .constraint.outcome_id)]
    Infeasible {
        constraint: BlueprintConstraint,
        reason: String,
    },
}

impl MappingError {
    pub fn code(&self) -> &'static str {
        match self {
            MappingError::DanglingEdge { .. } => "dangling-edge",
            MappingError::DuplicateEdge { .. } => "duplicate-edge",
            MappingError::UnknownQuestion(_) => "unknown-question",
            MappingError::UnknownOutcome(_) => "unknown-outcome",
            MappingError::InvalidConstraint { .. } => "invalid-constraint",
            MappingError::DuplicateConstraint(_) => "duplicate-constraint",
            MappingError::InvalidSizeLimit => "invalid-size-limit",
            MappingError::Infeasible { .. } => "infeasible",
        }
    }
}

/// Outcome mapping, indexed by source.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MappingGraph {
    items: BTreeMap<ItemId, BTreeSet<OutcomeId>>,
    units: BTreeMap<TeachingUnitId, BTreeSet<OutcomeId>>,
    questions: BTreeMap<QuestionId, BTreeSet<OutcomeId>>,
}

static NO_OUTCOMES: BTreeSet<OutcomeId> = BTreeSet::new();

impl MappingGraph {
    /// The mapping declared inside the registry's items, teaching units and
    /// questions.
    pub fn from_registry(registry: &Registry) -> Self {
        let nonempty = |s: &BTreeSet<OutcomeId>| !s.is_empty();
        MappingGraph {
            items: registry
                .items()
                .filter(|i| nonempty(&i.outcomes))
                .map(|i| (i.id.clone(), i.outcomes.clone()))
                .collect(),
            units: registry
                .teaching_units()
                .filter(|u| nonempty(&u.outcomes))
                .map(|u| (u.id.clone(), u.outcomes.clone()))
                .collect(),
            questions: registry
                .questions()
                .map(|q| (q.id.clone(), q.outcome_ids.clone()))
                .collect(),
        }
    }

    /// Builds a graph from an explicit edge list. Each (source, target) pair
    /// may appear once.
    pub fn from_edges(edges: impl IntoIterator<Item = MappingEdge>) -> Result<Self, MappingError> {
        let mut graph = MappingGraph::default();
        for edge in edges {
            let inserted = match &edge.source {
                SourceRef::WorkflowItem(id) => {
                    graph.items.entry(id.clone()).or_default().insert(edge.target.clone())
                }
                SourceRef::TeachingUnit(id) => {
                    graph.units.entry(id.clone()).or_default().insert(edge.target.clone())
                }
                SourceRef::ExamQuestion(id) => {
                    graph.questions.entry(id.clone()).or_default().insert(edge.target.clone())
                }
            };
            if !inserted {
                return Err(MappingError::DuplicateEdge {
                    source_kind: edge.source.kind(),
                    source_id: edge.source.id().to_owned(),
                    target: edge.target,
                });
            }
        }
        Ok(graph)
    }

    pub fn edges(&self) -> impl Iterator<Item = MappingEdge> + '_ {
        let items = self.items.iter().flat_map(|(s, ts)| {
            ts.iter().map(move |t| MappingEdge {
                source: SourceRef::WorkflowItem(s.clone()),
                target: t.clone(),
            })
        });
        let units = self.units.iter().flat_map(|(s, ts)| {
            ts.iter().map(move |t| MappingEdge {
                source: SourceRef::TeachingUnit(s.clone()),
                target: t.clone(),
            })
        });
        let questions = self.questions.iter().flat_map(|(s, ts)| {
            ts.iter().map(move |t| MappingEdge {
                source: SourceRef::ExamQuestion(s.clone()),
                target: t.clone(),
            })
        });
        items.chain(units).chain(questions)
    }

    /// Fails on the first edge whose source or target is missing from the
    /// registry.
    pub fn check(&self, registry: &Registry) -> Result<(), MappingError> {
        for edge in self.edges() {
            let source_known = match &edge.source {
                SourceRef::WorkflowItem(id) => registry.item(id.as_str()).is_some(),
                SourceRef::TeachingUnit(id) => registry.teaching_unit(id.as_str()).is_some(),
                SourceRef::ExamQuestion(id) => registry.question(id.as_str()).is_some(),
            };
            if !source_known || registry.outcome(edge.target.as_str()).is_none() {
                return Err(MappingError::DanglingEdge {
                    source_kind: edge.source.kind(),
                    source_id: edge.source.id().to_owned(),
                    target: edge.target,
                });
            }
        }
        Ok(())
    }

    pub fn item_outcomes(&self, item: &str) -> &BTreeSet<OutcomeId> {
        self.items.get(item).unwrap_or(&NO_OUTCOMES)
    }

    pub fn unit_outcomes(&self, unit: &str) -> &BTreeSet<OutcomeId> {
        self.units.get(unit).unwrap_or(&NO_OUTCOMES)
    }

    pub fn question_outcomes(&self, question: &str) -> &BTreeSet<OutcomeId> {
        self.questions.get(question).unwrap_or(&NO_OUTCOMES)
    }

    pub fn edge_count(&self) -> usize {
        self.items.values().chain(self.units.values()).chain(self.questions.values()).map(BTreeSet::len).sum()
    }
}

/// One recorded answer to an exam question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamAttempt {
    pub question_id: QuestionId,
    pub correct: bool,
    pub at: DateTime<Utc>,
}

/// Restricts a coverage query. `kinds: None` admits every source kind; the
/// date bounds are inclusive and apply to data points only.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageFilter {
    #[serde(default)]
    pub kinds: Option<BTreeSet<SourceKind>>,
    #[serde(default)]
    pub from: Option<NaiveDate>,
    #[serde(default)]
    pub to: Option<NaiveDate>,
}

impl CoverageFilter {
    pub fn only(kind: SourceKind) -> Self {
        CoverageFilter {
            kinds: Some([kind].into()),
            ..Default::default()
        }
    }

    fn admits_kind(&self, kind: SourceKind) -> bool {
        self.kinds.as_ref().is_none_or(|k| k.contains(&kind))
    }

    fn admits_time(&self, at: DateTime<Utc>) -> bool {
        let day = at.date_naive();
        self.from.is_none_or(|f| day >= f) && self.to.is_none_or(|t| day <= t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub outcome_id: OutcomeId,
    /// Distinct workflow items mapped to the outcome.
    pub wba_items: u64,
    pub teaching_units: u64,
    pub questions: u64,
    /// Observations on mapped workflow items.
    pub wba_observations: u64,
    /// Recorded answers to mapped questions.
    pub question_attempts: u64,
}

impl CoverageRow {
    fn empty(outcome_id: OutcomeId) -> Self {
        CoverageRow {
            outcome_id,
            wba_items: 0,
            teaching_units: 0,
            questions: 0,
            wba_observations: 0,
            question_attempts: 0,
        }
    }

    pub fn observed_data_points(&self) -> u64 {
        self.wba_observations + self.question_attempts
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
}

pub const COVERAGE_TSV_HEADER: &str = "outcome_id\twba_items\tteaching_units\tquestions\tobservations";

impl CoverageReport {
    /// Tab-separated table, one row per outcome. The `observations` column is
    /// the total of observed data points of every admitted source kind.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(COVERAGE_TSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.outcome_id,
                r.wba_items,
                r.teaching_units,
                r.questions,
                r.observed_data_points()
            );
        }
        out
    }

    pub fn row(&self, outcome: &str) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| r.outcome_id.as_str() == outcome)
    }
}

/// Per-outcome counts of mapped sources and the data observed on them.
pub fn coverage_report<'a>(
    registry: &Registry,
    graph: &MappingGraph,
    observations: impl IntoIterator<Item = &'a Observation>,
    attempts: &[ExamAttempt],
    filter: &CoverageFilter,
) -> Result<CoverageReport, MappingError> {
    graph.check(registry)?;
    let mut rows: BTreeMap<OutcomeId, CoverageRow> = registry
        .outcomes()
        .map(|o| (o.id.clone(), CoverageRow::empty(o.id.clone())))
        .collect();
    let mut bump = |targets: &BTreeSet<OutcomeId>, field: fn(&mut CoverageRow) -> &mut u64| {
        for t in targets {
            if let Some(row) = rows.get_mut(t) {
                *field(row) += 1;
            }
        }
    };

    if filter.admits_kind(SourceKind::WorkflowItem) {
        for targets in graph.items.values() {
            bump(targets, |r| &mut r.wba_items);
        }
        for obs in observations {
            if filter.admits_time(obs.timestamp) {
                bump(graph.item_outcomes(obs.workflow_item_id.as_str()), |r| &mut r.wba_observations);
            }
        }
    }
    if filter.admits_kind(SourceKind::TeachingUnit) {
        for targets in graph.units.values() {
            bump(targets, |r| &mut r.teaching_units);
        }
    }
    if filter.admits_kind(SourceKind::ExamQuestion) {
        for targets in graph.questions.values() {
            bump(targets, |r| &mut r.questions);
        }
        for attempt in attempts {
            if filter.admits_time(attempt.at) {
                bump(graph.question_outcomes(attempt.question_id.as_str()), |r| &mut r.question_attempts);
            }
        }
    }
    Ok(CoverageReport {
        rows: rows.into_values().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlueprintConstraint {
    pub outcome_id: OutcomeId,
    pub min_questions: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_questions: Option<u32>,
}

impl BlueprintConstraint {
    pub fn at_least(outcome_id: OutcomeId, min_questions: u32) -> Self {
        BlueprintConstraint {
            outcome_id,
            min_questions,
            max_questions: None,
        }
    }

    pub fn admits(&self, count: u32) -> bool {
        count >= self.min_questions && self.max_questions.is_none_or(|m| count <= m)
    }
}

fn check_constraints(registry: &Registry, constraints: &[BlueprintConstraint]) -> Result<(), MappingError> {
    let mut seen = BTreeSet::new();
    for c in constraints {
        if registry.outcome(c.outcome_id.as_str()).is_none() {
            return Err(MappingError::UnknownOutcome(c.outcome_id.clone()));
        }
        if let Some(max) = c.max_questions {
            if c.min_questions > max {
                return Err(MappingError::InvalidConstraint {
                    outcome: c.outcome_id.clone(),
                    min: c.min_questions,
                    max,
                });
            }
        }
        if !seen.insert(&c.outcome_id) {
            return Err(MappingError::DuplicateConstraint(c.outcome_id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub constraint: BlueprintConstraint,
    pub actual: u32,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlueprintReport {
    pub checks: Vec<ConstraintCheck>,
    pub pass: bool,
}

impl BlueprintReport {
    pub fn violations(&self) -> impl Iterator<Item = &ConstraintCheck> {
        self.checks.iter().filter(|c| !c.satisfied)
    }
}

fn distinct_known(registry: &Registry, exam: &[QuestionId]) -> Result<BTreeSet<QuestionId>, MappingError> {
    exam.iter()
        .map(|q| {
            registry
                .question(q.as_str())
                .map(|_| q.clone())
                .ok_or_else(|| MappingError::UnknownQuestion(q.clone()))
        })
        .collect()
}

/// Counts how many distinct exam questions cover each constrained outcome.
pub fn verify_blueprint(
    registry: &Registry,
    graph: &MappingGraph,
    exam: &[QuestionId],
    constraints: &[BlueprintConstraint],
) -> Result<BlueprintReport, MappingError> {
    check_constraints(registry, constraints)?;
    let questions = distinct_known(registry, exam)?;
    let checks: Vec<ConstraintCheck> = constraints
        .iter()
        .map(|c| {
            let actual = questions
                .iter()
                .filter(|q| graph.question_outcomes(q.as_str()).contains(&c.outcome_id))
                .count() as u32;
            ConstraintCheck {
                constraint: c.clone(),
                actual,
                satisfied: c.admits(actual),
            }
        })
        .collect();
    let pass = checks.iter().all(|c| c.satisfied);
    Ok(BlueprintReport { checks, pass })
}

/// Greedy weighted set multicover over the question bank.
///
/// Each round adds the question that reduces the most outstanding minimum
/// demand without pushing any outcome past its maximum. Ties go to the
/// question used least often historically, then to the smallest id. Questions
/// come back in selection order.
pub fn generate_exam(
    registry: &Registry,
    graph: &MappingGraph,
    bank: &[QuestionId],
    constraints: &[BlueprintConstraint],
    size_limit: usize,
    history: &BTreeMap<QuestionId, u64>,
) -> Result<Vec<QuestionId>, MappingError> {
    if size_limit == 0 {
        return Err(MappingError::InvalidSizeLimit);
    }
    check_constraints(registry, constraints)?;
    let bank = distinct_known(registry, bank)?;

    let infeasible = |c: &BlueprintConstraint, reason: String| MappingError::Infeasible {
        constraint: c.clone(),
        reason,
    };
    for c in constraints {
        let available = bank
            .iter()
            .filter(|q| graph.question_outcomes(q.as_str()).contains(&c.outcome_id))
            .count();
        if (c.min_questions as usize) > available {
            return Err(infeasible(
                c,
                format!("needs {} questions, bank has {available}", c.min_questions),
            ));
        }
        if (c.min_questions as usize) > size_limit {
            return Err(infeasible(
                c,
                format!("needs {} questions, size limit is {size_limit}", c.min_questions),
            ));
        }
    }

    let by_outcome: BTreeMap<&OutcomeId, &BlueprintConstraint> =
        constraints.iter().map(|c| (&c.outcome_id, c)).collect();
    let mut counts: BTreeMap<&OutcomeId, u32> = by_outcome.keys().map(|o| (*o, 0)).collect();
    let outstanding = |counts: &BTreeMap<&OutcomeId, u32>, o: &OutcomeId| {
        by_outcome
            .get(o)
            .is_some_and(|c| counts[o] < c.min_questions)
    };
    let first_unmet = |counts: &BTreeMap<&OutcomeId, u32>| {
        constraints
            .iter()
            .find(|c| counts[&c.outcome_id] < c.min_questions)
            .expect("called only while demand remains")
    };

    let mut remaining: Vec<&QuestionId> = bank.iter().collect();
    let mut exam = Vec::new();
    while constraints.iter().any(|c| counts[&c.outcome_id] < c.min_questions) {
        if exam.len() == size_limit {
            let c = first_unmet(&counts);
            return Err(infeasible(c, format!("still uncovered after {size_limit} questions")));
        }
        let mut best: Option<(usize, u64, &QuestionId, usize)> = None;
        for (pos, q) in remaining.iter().enumerate() {
            let outcomes = graph.question_outcomes(q.as_str());
            let breaks_max = outcomes.iter().any(|o| {
                by_outcome
                    .get(o)
                    .and_then(|c| c.max_questions)
                    .is_some_and(|max| counts[o] + 1 > max)
            });
            if breaks_max {
                continue;
            }
            let gain = outcomes.iter().filter(|o| outstanding(&counts, o)).count();
            if gain == 0 {
                continue;
            }
            let used = history.get(*q).copied().unwrap_or(0);
            let better = match best {
                None => true,
                Some((g, u, id, _)) => (gain, std::cmp::Reverse(used), std::cmp::Reverse(*q))
                    > (g, std::cmp::Reverse(u), std::cmp::Reverse(id)),
            };
            if better {
                best = Some((gain, used, q, pos));
            }
        }
        let Some((_, _, chosen, pos)) = best else {
            let c = first_unmet(&counts);
            return Err(infeasible(c, "no remaining question adds coverage within the maxima".into()));
        };
        for o in graph.question_outcomes(chosen.as_str()) {
            if let Some(n) = counts.get_mut(o) {
                *n += 1;
            }
        }
        exam.push(chosen.clone());
        remaining.remove(pos);
    }
    Ok(exam)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionPerformance {
    pub question_id: QuestionId,
    pub attempts: u64,
    pub correct: u64,
    /// Proportion correct; `None` means no data yet.
    pub difficulty: Option<f64>,
}

/// Running per-question answer statistics, seeded from the registry.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionLedger {
    stats: BTreeMap<QuestionId, UsageStats>,
}

impl QuestionLedger {
    pub fn from_registry(registry: &Registry) -> Self {
        QuestionLedger {
            stats: registry.questions().map(|q| (q.id.clone(), q.usage_stats)).collect(),
        }
    }

    pub fn record_result(&mut self, question: &QuestionId, correct: bool) -> Result<UsageStats, MappingError> {
        let stats = self
            .stats
            .get_mut(question)
            .ok_or_else(|| MappingError::UnknownQuestion(question.clone()))?;
        stats.attempts += 1;
        stats.correct += u64::from(correct);
        Ok(*stats)
    }

    pub fn performance(&self, question: &QuestionId) -> Result<QuestionPerformance, MappingError> {
        let stats = self
            .stats
            .get(question)
            .ok_or_else(|| MappingError::UnknownQuestion(question.clone()))?;
        Ok(QuestionPerformance {
            question_id: question.clone(),
            attempts: stats.attempts,
            correct: stats.correct,
            difficulty: stats.difficulty(),
        })
    }

    /// Attempts per question, the usage history consulted by exam generation.
    pub fn usage_history(&self) -> BTreeMap<QuestionId, u64> {
        self.stats.iter().map(|(q, s)| (q.clone(), s.attempts)).collect()
    }
}
