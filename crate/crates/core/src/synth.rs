//! Deterministic synthetic cohorts.
//!
//! Students rotate through locations in blocks. Each location has a fixed
//! pool of supervising staff, with the occasional cover session by someone
//! from elsewhere. Students attending the same location on the same day are
//! grouped into clinics, and every clinic becomes one committed session.
//!
//! Ability follows a logistic learning curve in the number of clinical
//! sessions the student has already attended, shifted down by a fixed
//! difficulty per procedure:
//!
//! ```text
//! a = a0 + (L - a0) / (1 + exp(-r (t - m))) - difficulty(procedure) + noise
//! indicator = clamp(round(a + strictness(staff)), 1, 6)
//! ```
//!
//! with `L` and `m` jittered per student. Setting `initial_ability` and the
//! difficulty spread to 0 gives the plain logistic form. Because the whole
//! cohort progresses together and every location is occupied in every block,
//! each supervisor sees the same mix of ability over time. The random source is ChaCha8 seeded from
//! the config, so output is identical across platforms.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{self, Write};
use std::ops::Range;
use std::str::FromStr;

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, Utc};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::ObservationLog;
use crate::capture::{CaptureBatch, FeedbackEntry, FeedbackSnapshot};
use crate::ids::*;
use crate::model::*;
use crate::registry::{Registry, RegistryDocument};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid cohort config: {0}")]
    Config(String),
    #[error("unknown anomaly kind {0:?}")]
    UnknownKind(String),
    #[error("invalid anomaly parameters: {0}")]
    Params(String),
}

impl SynthError {
    pub fn code(&self) -> &'static str {
        match self {
            SynthError::Config(_) => "invalid-config",
            SynthError::UnknownKind(_) => "unknown-kind",
            SynthError::Params(_) => "invalid-params",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub seed: u64,
    pub n_students: usize,
    pub n_staff: usize,
    pub n_locations: usize,
    pub n_outcomes: usize,
    pub n_procedures: usize,
    pub items_per_procedure: usize,
    pub n_teaching_units: usize,
    pub n_questions: usize,
    pub procedures_per_location: usize,
    pub staff_per_location: usize,
    /// Probability that a clinic is supervised by someone outside the pool.
    pub cover_rate: f64,
    pub clinic_size: usize,
    pub years: u32,
    pub teaching_weeks_per_year: u32,
    pub blocks_per_year: u32,
    pub sessions_per_student_week: f64,
    pub mean_observations_per_session: f64,
    /// Standard deviation of per-staff strictness, in scale points.
    pub staff_strictness_spread: f64,
    /// Fixed strictness for named staff, replacing the drawn value.
    pub strictness_overrides: BTreeMap<String, f64>,
    pub initial_ability: f64,
    pub ability_ceiling: f64,
    pub ceiling_spread: f64,
    pub learning_rate: f64,
    /// Sessions attended at which a student is halfway up the curve.
    pub learning_midpoint: f64,
    pub midpoint_spread: f64,
    /// Standard deviation of the per-procedure difficulty offset.
    pub difficulty_spread: f64,
    /// Standard deviation of per-observation noise.
    pub noise: f64,
    pub slots_per_procedure: usize,
    pub slot_capacity: u32,
    pub start_date: NaiveDate,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            seed: 1,
            n_students: 300,
            n_staff: 100,
            n_locations: 20,
            n_outcomes: 165,
            n_procedures: 30,
            items_per_procedure: 30,
            n_teaching_units: 40,
            n_questions: 400,
            procedures_per_location: 6,
            staff_per_location: 5,
            cover_rate: 0.01,
            clinic_size: 8,
            years: 5,
            teaching_weeks_per_year: 36,
            blocks_per_year: 2,
            sessions_per_student_week: 1.5625,
            mean_observations_per_session: 18.0,
            staff_strictness_spread: 0.4,
            strictness_overrides: BTreeMap::new(),
            initial_ability: 1.5,
            ability_ceiling: 5.0,
            ceiling_spread: 0.3,
            learning_rate: 0.05,
            learning_midpoint: 60.0,
            midpoint_spread: 10.0,
            difficulty_spread: 0.2,
            noise: 0.5,
            slots_per_procedure: 2,
            slot_capacity: 3,
            start_date: NaiveDate::from_ymd_opt(2020, 9, 7).expect("valid date"),
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: &str| Err(SynthError::Config(m.to_owned()));
        let counts = [
            ("n_students", self.n_students),
            ("n_staff", self.n_staff),
            ("n_locations", self.n_locations),
            ("n_outcomes", self.n_outcomes),
            ("n_procedures", self.n_procedures),
            ("items_per_procedure", self.items_per_procedure),
            ("procedures_per_location", self.procedures_per_location),
            ("staff_per_location", self.staff_per_location),
            ("clinic_size", self.clinic_size),
            ("years", self.years as usize),
            ("teaching_weeks_per_year", self.teaching_weeks_per_year as usize),
            ("blocks_per_year", self.blocks_per_year as usize),
            ("slot_capacity", self.slot_capacity as usize),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(SynthError::Config(format!("{name} must be positive")));
            }
        }
        if self.procedures_per_location > self.n_procedures {
            return fail("procedures_per_location exceeds n_procedures");
        }
        if self.n_students > 99_999 || self.n_staff > 9_999 || self.n_procedures > 999 || self.items_per_procedure > 999 {
            return fail("entity counts exceed the id format");
        }
        if !(0.0..=1.0).contains(&self.cover_rate) {
            return fail("cover_rate must be within [0, 1]");
        }
        if !(0.0..=5.0).contains(&self.sessions_per_student_week) {
            return fail("sessions_per_student_week must be within [0, 5]");
        }
        if !(self.mean_observations_per_session > 0.0 && self.mean_observations_per_session.is_finite()) {
            return fail("mean_observations_per_session must be positive");
        }
        let reals = [
            self.staff_strictness_spread,
            self.ceiling_spread,
            self.midpoint_spread,
            self.difficulty_spread,
            self.noise,
            self.learning_rate,
        ];
        if reals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return fail("spreads, noise and learning rate must be finite and non-negative");
        }
        if ![self.initial_ability, self.ability_ceiling, self.learning_midpoint]
            .iter()
            .all(|v| v.is_finite())
        {
            return fail("learning-curve parameters must be finite");
        }
        if self.strictness_overrides.values().any(|v| !v.is_finite()) {
            return fail("strictness overrides must be finite");
        }
        Ok(())
    }

    pub fn staff_id(index: usize) -> StaffId {
        StaffId::new(format!("SF{:04}", index + 1)).expect("valid id")
    }

    pub fn student_id(index: usize) -> StudentId {
        StudentId::new(format!("ST{:05}", index + 1)).expect("valid id")
    }
}

/// A generated cohort: registry, committed sessions and their observations.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub registry: Registry,
    /// Sessions in generation order, each with the range of its observations.
    pub sessions: Vec<(Session, Range<usize>)>,
    /// Observations grouped by session, in recording order within a session.
    pub observations: Vec<Observation>,
    /// Strictness actually applied to each staff member.
    pub strictness: BTreeMap<StaffId, f64>,
}

pub const SYNTH_CLIENT: &str = "synth";

impl Cohort {
    pub fn log(&self) -> ObservationLog {
        ObservationLog::new(self.observations.iter().cloned())
    }

    pub fn batch(&self, index: usize) -> CaptureBatch {
        let (session, range) = &self.sessions[index];
        let observations = &self.observations[range.clone()];
        let feedback = session
            .students
            .iter()
            .map(|(student, lock)| {
                let LockState::StudentSignedOut { at } = lock else {
                    unreachable!("generated sessions are committed");
                };
                let entries = observations
                    .iter()
                    .filter(|o| &o.student_id == student)
                    .map(FeedbackEntry::from)
                    .collect();
                (
                    student.clone(),
                    FeedbackSnapshot {
                        signed_out_at: *at,
                        entries,
                    },
                )
            })
            .collect();
        CaptureBatch {
            batch_id: BatchId::new(format!("B-{}", session.id)).expect("valid id"),
            client_id: ClientId::new(SYNTH_CLIENT).expect("valid id"),
            session: session.clone(),
            observations: observations.iter().cloned().map(ObservationDraft::from).collect(),
            feedback,
        }
    }

    pub fn batches(&self) -> impl Iterator<Item = CaptureBatch> + '_ {
        (0..self.sessions.len()).map(|i| self.batch(i))
    }

    /// One batch per line.
    pub fn write_batches(&self, mut out: impl Write) -> io::Result<()> {
        for b in self.batches() {
            serde_json::to_writer(&mut out, &b)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn stats(&self) -> CohortStats {
        let mut totals: BTreeMap<&StudentId, u64> = self.registry.students().map(|s| (&s.id, 0)).collect();
        let mut staff: BTreeMap<&StudentId, HashSet<&StaffId>> = BTreeMap::new();
        let mut student_sessions = 0u64;
        for (session, range) in &self.sessions {
            let present: BTreeSet<&StudentId> = self.observations[range.clone()].iter().map(|o| &o.student_id).collect();
            student_sessions += present.len() as u64;
            for s in present {
                staff.entry(s).or_default().insert(&session.staff_id);
            }
        }
        for o in &self.observations {
            *totals.entry(&o.student_id).or_default() += 1;
        }
        let totals: Vec<u64> = totals.into_values().collect();
        let distinct: Vec<u64> = self
            .registry
            .students()
            .map(|s| staff.get(&s.id).map_or(0, |set| set.len() as u64))
            .collect();
        CohortStats {
            students: totals.len(),
            sessions: self.sessions.len(),
            observations: self.observations.len(),
            observations_per_student: Summary::of(&totals),
            distinct_staff_per_student: Summary::of(&distinct),
            mean_observations_per_session: if student_sessions == 0 {
                0.0
            } else {
                self.observations.len() as f64 / student_sessions as f64
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: u64,
    pub max: u64,
    pub mean: f64,
}

impl Summary {
    fn of(values: &[u64]) -> Self {
        Summary {
            min: values.iter().copied().min().unwrap_or(0),
            max: values.iter().copied().max().unwrap_or(0),
            mean: if values.is_empty() {
                0.0
            } else {
                values.iter().sum::<u64>() as f64 / values.len() as f64
            },
        }
    }
}

/// Headline figures of a cohort. The per-session mean is taken per student
/// per session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub students: usize,
    pub sessions: usize,
    pub observations: usize,
    pub observations_per_student: Summary,
    pub distinct_staff_per_student: Summary,
    pub mean_observations_per_session: f64,
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("sd validated")
}

fn build_registry(config: &CohortConfig, rng: &mut ChaCha8Rng) -> RegistryDocument {
    let outcome_id = |i: usize| OutcomeId::new(format!("LO{:03}", i + 1)).expect("valid id");
    let pick_outcomes = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> BTreeSet<OutcomeId> {
        let n = rng.random_range(lo..=hi).min(config.n_outcomes);
        index::sample(rng, config.n_outcomes, n).into_iter().map(outcome_id).collect()
    };
    let mut doc = RegistryDocument::default();
    doc.outcomes = (0..config.n_outcomes)
        .map(|i| LearningOutcome {
            id: outcome_id(i),
            label: format!("Outcome {}", i + 1),
            authority: if i % 5 == 0 { Authority::ExternalStakeholder } else { Authority::Internal },
        })
        .collect();
    for p in 0..config.n_procedures {
        let pid = ProcedureId::new(format!("P{:03}", p + 1)).expect("valid id");
        let mut workflow = Vec::with_capacity(config.items_per_procedure);
        for i in 0..config.items_per_procedure {
            let id = ItemId::new(format!("{pid}-I{:03}", i + 1)).expect("valid id");
            doc.items.push(WorkflowItem {
                id: id.clone(),
                label: format!("Step {} of procedure {}", i + 1, p + 1),
                outcomes: pick_outcomes(rng, 1, 2),
            });
            workflow.push(id);
        }
        doc.procedures.push(Procedure {
            id: pid,
            label: format!("Procedure {}", p + 1),
            workflow,
        });
    }
    doc.teaching_units = (0..config.n_teaching_units)
        .map(|u| TeachingUnit {
            id: TeachingUnitId::new(format!("TU{:03}", u + 1)).expect("valid id"),
            label: format!("Unit {}", u + 1),
            outcomes: pick_outcomes(rng, 3, 6),
        })
        .collect();
    doc.questions = (0..config.n_questions)
        .map(|q| ExamQuestion {
            id: QuestionId::new(format!("Q{:04}", q + 1)).expect("valid id"),
            text: format!("Question {}", q + 1),
            outcome_ids: pick_outcomes(rng, 1, 2),
            usage_stats: UsageStats::default(),
        })
        .collect();
    for l in 0..config.n_locations {
        // Procedure l mod n is always offered somewhere, so every procedure
        // is reachable when there are enough locations.
        let mut offered: BTreeSet<usize> = [l % config.n_procedures].into();
        while offered.len() < config.procedures_per_location {
            offered.insert(rng.random_range(0..config.n_procedures));
        }
        doc.locations.push(Location {
            id: LocationId::new(format!("L{:03}", l + 1)).expect("valid id"),
            name: format!("Clinic {}", l + 1),
            available_procedures: offered.into_iter().map(|p| doc.procedures[p].id.clone()).collect(),
        });
    }
    doc.staff = (0..config.n_staff)
        .map(|s| StaffMember {
            id: CohortConfig::staff_id(s),
            name: format!("Supervisor {}", s + 1),
        })
        .collect();
    doc.students = (0..config.n_students)
        .map(|s| Student {
            id: CohortConfig::student_id(s),
            cohort: format!("synthetic-{}", config.seed),
            enrollment_date: config.start_date,
        })
        .collect();
    let program_end = config.start_date + Duration::weeks(52 * i64::from(config.years));
    for (p, proc) in doc.procedures.iter().enumerate() {
        for k in 0..config.slots_per_procedure {
            doc.slots.push(PatientSlot {
                id: SlotId::new(format!("SL{:03}-{:02}", p + 1, k + 1)).expect("valid id"),
                procedure_id: proc.id.clone(),
                date: program_end + Duration::days(k as i64),
                capacity: config.slot_capacity,
            });
        }
    }
    doc
}

struct Learner {
    ceiling: f64,
    midpoint: f64,
}

pub fn generate(config: &CohortConfig) -> Result<Cohort, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let doc = build_registry(config, &mut rng);

    let mut strictness: Vec<f64> = (0..config.n_staff)
        .map(|_| normal(config.staff_strictness_spread).sample(&mut rng))
        .collect();
    for (id, value) in &config.strictness_overrides {
        let pos = doc.staff.iter().position(|s| s.id.as_str() == id);
        let Some(pos) = pos else {
            return Err(SynthError::Config(format!("strictness override for unknown staff {id}")));
        };
        strictness[pos] = *value;
    }

    let mut staff_order: Vec<usize> = (0..config.n_staff).collect();
    staff_order.shuffle(&mut rng);
    let pools: Vec<Vec<usize>> = (0..config.n_locations)
        .map(|l| {
            (0..config.staff_per_location)
                .map(|j| staff_order[(l * config.staff_per_location + j) % config.n_staff])
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        })
        .collect();

    // Student i in block b is at location rotation[(offset[i] + b) mod n],
    // which visits distinct locations for up to n blocks and keeps numbers
    // per location balanced.
    let mut rotation: Vec<usize> = (0..config.n_locations).collect();
    rotation.shuffle(&mut rng);
    let mut offsets: Vec<usize> = (0..config.n_students).map(|i| i % config.n_locations).collect();
    offsets.shuffle(&mut rng);

    let learners: Vec<Learner> = (0..config.n_students)
        .map(|_| Learner {
            ceiling: config.ability_ceiling + normal(config.ceiling_spread).sample(&mut rng),
            midpoint: config.learning_midpoint + normal(config.midpoint_spread).sample(&mut rng),
        })
        .collect();
    let location_procs: Vec<Vec<usize>> = doc
        .locations
        .iter()
        .map(|l| {
            l.available_procedures
                .iter()
                .map(|p| doc.procedures.iter().position(|q| &q.id == p).expect("registry procedure"))
                .collect()
        })
        .collect();

    let difficulty: Vec<f64> = (0..config.n_procedures)
        .map(|_| normal(config.difficulty_spread).sample(&mut rng))
        .collect();
    let noise = normal(config.noise);
    let per_session = Poisson::new(config.mean_observations_per_session).expect("mean validated");
    let whole = config.sessions_per_student_week.floor() as usize;
    let frac = config.sessions_per_student_week - whole as f64;
    let weeks_per_block = config.teaching_weeks_per_year.div_ceil(config.blocks_per_year);
    let workflow_len = config.items_per_procedure;
    let mut attended = vec![0u32; config.n_students];

    let mut sessions = Vec::new();
    let mut observations = Vec::new();
    let mut obs_counter = 0u64;

    for year in 0..config.years {
        for week in 0..config.teaching_weeks_per_year {
            let block = year * config.blocks_per_year + week / weeks_per_block;
            let monday = config.start_date + Duration::weeks(i64::from(52 * year + week));
            // attendance[day][location] lists students in index order
            let mut attendance = vec![vec![Vec::new(); config.n_locations]; 5];
            for s in 0..config.n_students {
                let n = (whole + usize::from(rng.random_bool(frac))).min(5);
                let loc = rotation[(offsets[s] + block as usize) % config.n_locations];
                for day in index::sample(&mut rng, 5, n) {
                    attendance[day][loc].push(s);
                }
            }
            for (day, by_location) in attendance.iter().enumerate() {
                let date = monday + Duration::days(day as i64);
                for (loc, present) in by_location.iter().enumerate() {
                    for (clinic, group) in present.chunks(config.clinic_size).enumerate() {
                        let staff = if rng.random_bool(config.cover_rate) {
                            rng.random_range(0..config.n_staff)
                        } else {
                            pools[loc][rng.random_range(0..pools[loc].len())]
                        };
                        let opened = DateTime::<Utc>::from_naive_utc_and_offset(
                            date.and_time(NaiveTime::from_hms_opt(8, 0, 0).expect("valid time")),
                            Utc,
                        ) + Duration::hours(3 * clinic as i64);
                        let session_id = SessionId::new(format!("SE{:07}", sessions.len() + 1)).expect("valid id");
                        let start = observations.len();
                        let mut students = BTreeMap::new();
                        for &s in group {
                            let proc = location_procs[loc][rng.random_range(0..location_procs[loc].len())];
                            let t = attended[s];
                            attended[s] += 1;
                            let learner = &learners[s];
                            let curve = config.initial_ability
                                + (learner.ceiling - config.initial_ability)
                                    / (1.0 + (-config.learning_rate * (f64::from(t) - learner.midpoint)).exp())
                                - difficulty[proc];
                            let k = (per_session.sample(&mut rng) as usize).clamp(1, workflow_len);
                            let mut items: Vec<usize> = index::sample(&mut rng, workflow_len, k).into_vec();
                            items.sort_unstable();
                            let procedure = &doc.procedures[proc];
                            let mut last = opened;
                            for (j, item) in items.into_iter().enumerate() {
                                let epsilon = if config.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                                obs_counter += 1;
                                last = opened + Duration::minutes(5 + 6 * j as i64);
                                observations.push(Observation {
                                    id: ObservationId::new(format!("OB{obs_counter:09}")).expect("valid id"),
                                    session_id: session_id.clone(),
                                    student_id: doc.students[s].id.clone(),
                                    staff_id: doc.staff[staff].id.clone(),
                                    workflow_item_id: procedure.workflow[item].clone(),
                                    procedure_id: procedure.id.clone(),
                                    indicator: DevelopmentalIndicator::round_clamped(curve + epsilon + strictness[staff]),
                                    timestamp: last,
                                    comment: None,
                                });
                            }
                            students.insert(
                                doc.students[s].id.clone(),
                                LockState::StudentSignedOut {
                                    at: last + Duration::minutes(2),
                                },
                            );
                        }
                        let closed = students
                            .values()
                            .filter_map(|l| match l {
                                LockState::StudentSignedOut { at } => Some(*at),
                                LockState::Open => None,
                            })
                            .max()
                            .expect("clinics are non-empty")
                            + Duration::minutes(3);
                        sessions.push((
                            Session {
                                id: session_id,
                                location_id: doc.locations[loc].id.clone(),
                                staff_id: doc.staff[staff].id.clone(),
                                offered_procedures: doc.locations[loc].available_procedures.clone(),
                                students,
                                opened_at: opened,
                                closed_at: Some(closed),
                                state: SessionState::Committed,
                            },
                            start..observations.len(),
                        ));
                    }
                }
            }
        }
    }

    let strictness = doc.staff.iter().map(|s| s.id.clone()).zip(strictness).collect();
    let registry = Registry::from_document(doc).map_err(|e| SynthError::Config(e.to_string()))?;
    Ok(Cohort {
        registry,
        sessions,
        observations,
        strictness,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    /// A staff member who only uses a few points of the scale.
    NarrowRater,
    /// A student who alternates between strong and weak sessions.
    InconsistentStudent,
    /// A student whose indicators never rise above a cap.
    NonImprover,
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnomalyKind::NarrowRater => "narrow-rater",
            AnomalyKind::InconsistentStudent => "inconsistent-student",
            AnomalyKind::NonImprover => "non-improver",
        })
    }
}

impl FromStr for AnomalyKind {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self, SynthError> {
        match s {
            "narrow-rater" => Ok(AnomalyKind::NarrowRater),
            "inconsistent-student" => Ok(AnomalyKind::InconsistentStudent),
            "non-improver" => Ok(AnomalyKind::NonImprover),
            other => Err(SynthError::UnknownKind(other.to_owned())),
        }
    }
}

/// Which entities to alter and how. With no targets and a zero count the
/// log is left as it is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalyParams {
    /// Explicit staff or student ids, depending on the kind.
    pub targets: Vec<String>,
    /// Additional targets picked at random.
    pub count: usize,
    /// Scale points a narrow rater uses.
    pub support: Vec<u8>,
    pub low: u8,
    pub high: u8,
    pub cap: u8,
}

impl Default for AnomalyParams {
    fn default() -> Self {
        AnomalyParams {
            targets: Vec::new(),
            count: 0,
            support: vec![3, 4],
            low: 2,
            high: 5,
            cap: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyLabels {
    pub kind: AnomalyKind,
    pub targets: Vec<String>,
}

fn scale_point(v: u8) -> Result<DevelopmentalIndicator, SynthError> {
    DevelopmentalIndicator::new(v).map_err(|e| SynthError::Params(e.to_string()))
}

/// Returns a modified copy of `cohort` and the ids that were altered.
pub fn inject_anomaly(
    cohort: &Cohort,
    kind: AnomalyKind,
    params: &AnomalyParams,
    seed: u64,
) -> Result<(Cohort, AnomalyLabels), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<String> = match kind {
        AnomalyKind::NarrowRater => cohort.registry.staff().map(|s| s.id.to_string()).collect(),
        _ => cohort.registry.students().map(|s| s.id.to_string()).collect(),
    };
    let mut targets: BTreeSet<String> = BTreeSet::new();
    for t in &params.targets {
        if !pool.contains(t) {
            return Err(SynthError::Params(format!("unknown target {t}")));
        }
        targets.insert(t.clone());
    }
    let rest: Vec<&String> = pool.iter().filter(|p| !targets.contains(*p)).collect();
    if params.count > rest.len() {
        return Err(SynthError::Params(format!("cannot pick {} more targets", params.count)));
    }
    for i in index::sample(&mut rng, rest.len(), params.count) {
        targets.insert(rest[i].clone());
    }

    let mut out = cohort.clone();
    match kind {
        AnomalyKind::NarrowRater => {
            let mut support: Vec<DevelopmentalIndicator> =
                params.support.iter().map(|v| scale_point(*v)).collect::<Result<_, _>>()?;
            support.sort();
            support.dedup();
            if support.is_empty() && !targets.is_empty() {
                return Err(SynthError::Params("narrow-rater support is empty".into()));
            }
            for t in &targets {
                narrow(&mut out.observations, t, &support);
            }
        }
        AnomalyKind::InconsistentStudent => {
            let (low, high) = (scale_point(params.low)?, scale_point(params.high)?);
            for t in &targets {
                // Alternate whole sessions, oldest first.
                let mut order: Vec<usize> = out
                    .sessions
                    .iter()
                    .enumerate()
                    .filter(|(_, (s, _))| s.students.contains_key(t.as_str()))
                    .map(|(i, _)| i)
                    .collect();
                order.sort_by_key(|i| out.sessions[*i].0.opened_at);
                for (n, i) in order.into_iter().enumerate() {
                    let value = if n % 2 == 0 { high } else { low };
                    let range = out.sessions[i].1.clone();
                    for o in &mut out.observations[range] {
                        if o.student_id.as_str() == t {
                            o.indicator = value;
                        }
                    }
                }
            }
        }
        AnomalyKind::NonImprover => {
            let cap = scale_point(params.cap)?;
            for o in &mut out.observations {
                if targets.contains(o.student_id.as_str()) {
                    o.indicator = o.indicator.min(cap);
                }
            }
        }
    }
    Ok((
        out,
        AnomalyLabels {
            kind,
            targets: targets.into_iter().collect(),
        },
    ))
}

/// Maps a staff member's indicators onto `support`, nearest point first
/// (ties go down), then makes sure every support point is used when there are
/// enough observations to do so.
fn narrow(observations: &mut [Observation], staff: &str, support: &[DevelopmentalIndicator]) {
    let nearest = |v: DevelopmentalIndicator| {
        *support
            .iter()
            .min_by_key(|p| (p.get().abs_diff(v.get()), p.get()))
            .expect("support is non-empty")
    };
    let mine: Vec<usize> = observations
        .iter()
        .enumerate()
        .filter(|(_, o)| o.staff_id.as_str() == staff)
        .map(|(i, _)| i)
        .collect();
    let original: Vec<DevelopmentalIndicator> = mine.iter().map(|i| observations[*i].indicator).collect();
    let mut used = [0usize; 6];
    for &i in &mine {
        let v = nearest(observations[i].indicator);
        observations[i].indicator = v;
        used[v.index()] += 1;
    }
    for &point in support {
        if used[point.index()] > 0 {
            continue;
        }
        // Move the observation whose original value is closest to the unused
        // point, taking it from a point that is used more than once.
        let candidate = mine
            .iter()
            .zip(&original)
            .filter(|(i, _)| used[observations[**i].indicator.index()] > 1)
            .min_by_key(|(i, orig)| (orig.get().abs_diff(point.get()), **i));
        if let Some((&i, _)) = candidate {
            used[observations[i].indicator.index()] -= 1;
            observations[i].indicator = point;
            used[point.index()] += 1;
        }
    }
}
