//! Consistency metrics, barcodes, portfolios and staff calibration.
//!
//! All functions are pure over an [`ObservationLog`] snapshot. The log is kept
//! in chronological order (timestamp, then observation id), so results never
//! depend on the order observations were stored in.
//!
//! Sessional consistency is judged per session: a session *meets* the
//! threshold when the lowest in-scope indicator the student received in it is
//! at or above the threshold. Sessions where the student was not observed on
//! anything in scope are *not applicable* and drop out of both numerator and
//! denominator. A zero denominator is reported as undefined, never as 0.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::Store;
use crate::ids::*;
use crate::mapping::MappingGraph;
use crate::model::{DevelopmentalIndicator, Observation};
use crate::registry::Registry;

pub const DEFAULT_THRESHOLD: DevelopmentalIndicator = match DevelopmentalIndicator::new_const(4) {
    Some(t) => t,
    None => unreachable!(),
};

/// Decides whether a session's in-scope indicators meet the threshold.
pub type SessionRule = fn(&[DevelopmentalIndicator], DevelopmentalIndicator) -> bool;

/// The rule in force: every in-scope skill must reach the threshold.
pub const SESSION_RULE: SessionRule = minimum_meets;

pub fn minimum_meets(indicators: &[DevelopmentalIndicator], threshold: DevelopmentalIndicator) -> bool {
    indicators.iter().min().is_some_and(|m| *m >= threshold)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueryError {
    #[error("threshold {0} is outside the 1-6 scale")]
    Threshold(u8),
    #[error("last-N window needs N >= 1")]
    EmptyWindow,
    #[error("sufficiency threshold {0} is outside [0, 1]")]
    Sufficiency(f64),
    #[error("unparseable scope {0:?}")]
    Scope(String),
}

impl QueryError {
    pub fn code(&self) -> &'static str {
        match self {
            QueryError::Threshold(_) => "scale-violation",
            QueryError::EmptyWindow => "invalid-window",
            QueryError::Sufficiency(_) => "invalid-config",
            QueryError::Scope(_) => "invalid-scope",
        }
    }
}

/// Which observations count towards a metric.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum Scope {
    #[default]
    All,
    Procedure(ProcedureId),
    Item(ItemId),
    Outcome(OutcomeId),
}

impl Scope {
    pub fn matches(&self, obs: &Observation, graph: &MappingGraph) -> bool {
        match self {
            Scope::All => true,
            Scope::Procedure(p) => &obs.procedure_id == p,
            Scope::Item(i) => &obs.workflow_item_id == i,
            Scope::Outcome(o) => graph.item_outcomes(obs.workflow_item_id.as_str()).contains(o),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::All => f.write_str("all"),
            Scope::Procedure(p) => write!(f, "procedure:{p}"),
            Scope::Item(i) => write!(f, "item:{i}"),
            Scope::Outcome(o) => write!(f, "outcome:{o}"),
        }
    }
}

/// `all`, `procedure:<id>`, `item:<id>` or `outcome:<id>`.
impl FromStr for Scope {
    type Err = QueryError;
    fn from_str(s: &str) -> Result<Self, QueryError> {
        let bad = || QueryError::Scope(s.to_owned());
        if s == "all" {
            return Ok(Scope::All);
        }
        let (kind, id) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "procedure" => ProcedureId::new(id).map(Scope::Procedure).map_err(|_| bad()),
            "item" => ItemId::new(id).map(Scope::Item).map_err(|_| bad()),
            "outcome" => OutcomeId::new(id).map(Scope::Outcome).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

/// Which of the student's sessions are considered. A session's time is the
/// student's first observation in it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Window {
    #[default]
    All,
    /// Inclusive calendar-date bounds (UTC).
    Dates {
        from: Option<NaiveDate>,
        to: Option<NaiveDate>,
    },
    /// The N most recent sessions in which the student was observed at all.
    LastSessions { n: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyQuery {
    pub student_id: StudentId,
    pub scope: Scope,
    pub threshold: DevelopmentalIndicator,
    pub window: Window,
}

impl ConsistencyQuery {
    pub fn new(student_id: StudentId, scope: Scope, threshold: u8, window: Window) -> Result<Self, QueryError> {
        let threshold = DevelopmentalIndicator::new(threshold).map_err(|_| QueryError::Threshold(threshold))?;
        if matches!(window, Window::LastSessions { n: 0 }) {
            return Err(QueryError::EmptyWindow);
        }
        Ok(ConsistencyQuery {
            student_id,
            scope,
            threshold,
            window,
        })
    }

    /// Whole-history query at the default threshold.
    pub fn overall(student_id: StudentId, scope: Scope) -> Self {
        ConsistencyQuery {
            student_id,
            scope,
            threshold: DEFAULT_THRESHOLD,
            window: Window::All,
        }
    }
}

/// Chronologically ordered observation snapshot with a per-student index.
#[derive(Debug, Clone, Default)]
pub struct ObservationLog {
    observations: Vec<Observation>,
    by_student: HashMap<StudentId, Vec<usize>>,
}

impl ObservationLog {
    pub fn new(observations: impl IntoIterator<Item = Observation>) -> Self {
        let mut observations: Vec<Observation> = observations.into_iter().collect();
        observations.sort_by(|a, b| a.chronological_key().cmp(&b.chronological_key()));
        let mut by_student: HashMap<StudentId, Vec<usize>> = HashMap::new();
        for (i, o) in observations.iter().enumerate() {
            by_student.entry(o.student_id.clone()).or_default().push(i);
        }
        ObservationLog {
            observations,
            by_student,
        }
    }

    pub fn from_store(store: &Store) -> Self {
        Self::new(store.observations().cloned())
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Observation> {
        self.observations.iter()
    }

    pub fn for_student<'a>(&'a self, student: &str) -> impl Iterator<Item = &'a Observation> + 'a {
        self.by_student
            .get(student)
            .into_iter()
            .flatten()
            .map(|i| &self.observations[*i])
    }

    pub fn students(&self) -> BTreeSet<&StudentId> {
        self.by_student.keys().collect()
    }

    pub fn into_observations(self) -> Vec<Observation> {
        self.observations
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionVerdict {
    Meets,
    Fails,
    NotApplicable,
}

/// Verdict for one student in one session. `observations` may contain other
/// students' observations; they are ignored.
pub fn session_meets<'a>(
    observations: impl IntoIterator<Item = &'a Observation>,
    student: &StudentId,
    scope: &Scope,
    threshold: DevelopmentalIndicator,
    graph: &MappingGraph,
) -> SessionVerdict {
    let indicators: Vec<DevelopmentalIndicator> = observations
        .into_iter()
        .filter(|o| &o.student_id == student && scope.matches(o, graph))
        .map(|o| o.indicator)
        .collect();
    if indicators.is_empty() {
        SessionVerdict::NotApplicable
    } else if SESSION_RULE(&indicators, threshold) {
        SessionVerdict::Meets
    } else {
        SessionVerdict::Fails
    }
}

/// A student's observations in one session, in chronological order.
#[derive(Debug, Clone)]
pub struct StudentSession<'a> {
    pub session_id: &'a SessionId,
    pub started: DateTime<Utc>,
    pub observations: Vec<&'a Observation>,
}

/// The student's sessions selected by `window`, oldest first.
pub fn student_sessions<'a>(log: &'a ObservationLog, student: &StudentId, window: &Window) -> Vec<StudentSession<'a>> {
    let mut sessions: Vec<StudentSession<'a>> = Vec::new();
    let mut index: HashMap<&SessionId, usize> = HashMap::new();
    for o in log.for_student(student.as_str()) {
        match index.get(&o.session_id) {
            Some(&i) => sessions[i].observations.push(o),
            None => {
                index.insert(&o.session_id, sessions.len());
                sessions.push(StudentSession {
                    session_id: &o.session_id,
                    started: o.timestamp,
                    observations: vec![o],
                });
            }
        }
    }
    // Observations arrive chronologically, so first-seen order is start order
    // except for identical start instants.
    sessions.sort_by(|a, b| (a.started, a.session_id).cmp(&(b.started, b.session_id)));
    match window {
        Window::All => sessions,
        Window::Dates { from, to } => sessions
            .into_iter()
            .filter(|s| {
                let day = s.started.date_naive();
                from.is_none_or(|f| day >= f) && to.is_none_or(|t| day <= t)
            })
            .collect(),
        Window::LastSessions { n } => {
            let skip = sessions.len().saturating_sub(*n);
            sessions.into_iter().skip(skip).collect()
        }
    }
}

/// A fraction that may be undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub numerator: u32,
    pub denominator: u32,
    /// `None` when no session was applicable.
    pub value: Option<f64>,
}

impl Consistency {
    pub fn from_counts(numerator: u32, denominator: u32) -> Self {
        Consistency {
            numerator,
            denominator,
            value: (denominator > 0).then(|| f64::from(numerator) / f64::from(denominator)),
        }
    }

    pub fn is_undefined(&self) -> bool {
        self.value.is_none()
    }
}

pub fn sessional_consistency(log: &ObservationLog, graph: &MappingGraph, query: &ConsistencyQuery) -> Consistency {
    let mut meets = 0;
    let mut applicable = 0;
    for s in student_sessions(log, &query.student_id, &query.window) {
        match session_meets(s.observations, &query.student_id, &query.scope, query.threshold, graph) {
            SessionVerdict::Meets => {
                meets += 1;
                applicable += 1;
            }
            SessionVerdict::Fails => applicable += 1,
            SessionVerdict::NotApplicable => {}
        }
    }
    Consistency::from_counts(meets, applicable)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BarcodeCell {
    pub observation_id: ObservationId,
    pub session_id: SessionId,
    pub timestamp: DateTime<Utc>,
    pub workflow_item_id: ItemId,
    pub procedure_id: ProcedureId,
    pub indicator: DevelopmentalIndicator,
    pub meets: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Barcode {
    pub student_id: StudentId,
    pub scope: Scope,
    pub threshold: DevelopmentalIndicator,
    pub cells: Vec<BarcodeCell>,
}

impl Barcode {
    /// One character per cell: `#` meets, `.` fails.
    pub fn strip(&self) -> String {
        self.cells.iter().map(|c| if c.meets { '#' } else { '.' }).collect()
    }

    pub fn all_meet(&self) -> bool {
        self.cells.iter().all(|c| c.meets)
    }
}

/// Every in-scope observation of the student within the window, oldest first.
pub fn barcode(log: &ObservationLog, graph: &MappingGraph, query: &ConsistencyQuery) -> Barcode {
    let mut cells: Vec<BarcodeCell> = student_sessions(log, &query.student_id, &query.window)
        .into_iter()
        .flat_map(|s| s.observations)
        .filter(|o| query.scope.matches(o, graph))
        .map(|o| BarcodeCell {
            observation_id: o.id.clone(),
            session_id: o.session_id.clone(),
            timestamp: o.timestamp,
            workflow_item_id: o.workflow_item_id.clone(),
            procedure_id: o.procedure_id.clone(),
            indicator: o.indicator,
            meets: o.indicator >= query.threshold,
        })
        .collect();
    cells.sort_by(|a, b| (a.timestamp, &a.observation_id).cmp(&(b.timestamp, &b.observation_id)));
    Barcode {
        student_id: query.student_id.clone(),
        scope: query.scope.clone(),
        threshold: query.threshold,
        cells,
    }
}

/// Portfolio thresholds. The defaults are configuration choices, not values
/// with any external standing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PortfolioConfig {
    pub min_experience: u32,
    pub sufficiency_threshold: f64,
    pub indicator_threshold: DevelopmentalIndicator,
}

impl Default for PortfolioConfig {
    fn default() -> Self {
        PortfolioConfig {
            min_experience: 5,
            sufficiency_threshold: 0.8,
            indicator_threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl PortfolioConfig {
    pub fn validate(&self) -> Result<(), QueryError> {
        if (0.0..=1.0).contains(&self.sufficiency_threshold) {
            Ok(())
        } else {
            Err(QueryError::Sufficiency(self.sufficiency_threshold))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioEntry {
    pub procedure_id: ProcedureId,
    /// Sessions in which the student was observed on this procedure.
    pub experience_count: u32,
    pub consistency: Consistency,
    pub sufficient: bool,
}

/// One entry per registry procedure, in id order.
pub fn portfolio(
    log: &ObservationLog,
    registry: &Registry,
    student: &StudentId,
    config: &PortfolioConfig,
) -> Result<Vec<PortfolioEntry>, QueryError> {
    config.validate()?;
    let sessions = student_sessions(log, student, &Window::All);
    let graph = MappingGraph::default();
    Ok(registry
        .procedures()
        .map(|p| {
            let scope = Scope::Procedure(p.id.clone());
            let mut meets = 0;
            let mut applicable = 0;
            for s in &sessions {
                match session_meets(s.observations.iter().copied(), student, &scope, config.indicator_threshold, &graph) {
                    SessionVerdict::Meets => {
                        meets += 1;
                        applicable += 1;
                    }
                    SessionVerdict::Fails => applicable += 1,
                    SessionVerdict::NotApplicable => {}
                }
            }
            let consistency = Consistency::from_counts(meets, applicable);
            let sufficient = applicable >= config.min_experience
                && consistency.value.is_some_and(|v| v >= config.sufficiency_threshold);
            PortfolioEntry {
                procedure_id: p.id.clone(),
                experience_count: applicable,
                consistency,
                sufficient,
            }
        })
        .collect())
}

/// How one staff member uses the scale compared with everyone else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaffCalibration {
    pub staff_id: StaffId,
    /// Counts of indicators 1 through 6.
    pub histogram: [u64; 6],
    pub observations: u64,
    pub distinct_points: u8,
    /// Workflow items this staff member observed that someone else also did.
    pub shared_items: u32,
    /// Own mean indicator on shared items minus everyone else's mean on the
    /// same items, each item weighted by how often this staff member observed
    /// it. Negative means harsher than colleagues.
    pub mean_offset: Option<f64>,
    /// Total-variation distance between own indicator distribution and that
    /// of all other staff combined.
    pub total_variation: Option<f64>,
}

#[derive(Default, Clone, Copy)]
struct Tally {
    sum: u64,
    count: u64,
}

impl Tally {
    fn add(&mut self, v: u64) {
        self.sum += v;
        self.count += 1;
    }
    fn mean(&self) -> f64 {
        self.sum as f64 / self.count as f64
    }
}

/// Calibration row for every registry staff member, in id order. Comparisons
/// always leave the staff member's own observations out of the baseline.
pub fn calibration_report(log: &ObservationLog, registry: &Registry) -> Vec<StaffCalibration> {
    let mut histograms: BTreeMap<&StaffId, [u64; 6]> = registry.staff().map(|s| (&s.id, [0; 6])).collect();
    let mut global = [0u64; 6];
    let mut per_item: HashMap<&ItemId, Tally> = HashMap::new();
    let mut per_staff_item: BTreeMap<&StaffId, BTreeMap<&ItemId, Tally>> = BTreeMap::new();
    for o in log.iter() {
        let v = u64::from(o.indicator.get());
        histograms.entry(&o.staff_id).or_insert([0; 6])[o.indicator.index()] += 1;
        global[o.indicator.index()] += 1;
        per_item.entry(&o.workflow_item_id).or_default().add(v);
        per_staff_item
            .entry(&o.staff_id)
            .or_default()
            .entry(&o.workflow_item_id)
            .or_default()
            .add(v);
    }
    let total: u64 = global.iter().sum();

    histograms
        .into_iter()
        .map(|(staff, histogram)| {
            let own_total: u64 = histogram.iter().sum();
            let mut shared_items = 0u32;
            let mut own_on_shared = Tally::default();
            let mut baseline = 0.0;
            if let Some(items) = per_staff_item.get(staff) {
                for (item, own) in items {
                    let all = per_item[item];
                    let others = Tally {
                        sum: all.sum - own.sum,
                        count: all.count - own.count,
                    };
                    if others.count > 0 {
                        shared_items += 1;
                        own_on_shared.sum += own.sum;
                        own_on_shared.count += own.count;
                        baseline += own.count as f64 * others.mean();
                    }
                }
            }
            let mean_offset =
                (shared_items > 0).then(|| own_on_shared.mean() - baseline / own_on_shared.count as f64);
            let rest_total = total - own_total;
            let total_variation = (own_total > 0 && rest_total > 0).then(|| {
                0.5 * (0..6)
                    .map(|k| {
                        let p = histogram[k] as f64 / own_total as f64;
                        let q = (global[k] - histogram[k]) as f64 / rest_total as f64;
                        (p - q).abs()
                    })
                    .sum::<f64>()
            });
            StaffCalibration {
                staff_id: staff.clone(),
                histogram,
                observations: own_total,
                distinct_points: histogram.iter().filter(|c| **c > 0).count() as u8,
                shared_items,
                mean_offset,
                total_variation,
            }
        })
        .collect()
}
