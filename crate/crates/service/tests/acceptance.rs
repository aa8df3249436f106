//! Acceptance suite. Runs every criterion in turn and prints one line per
//! criterion; the process fails if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wba_core::analytics::{
    barcode, calibration_report, sessional_consistency, ConsistencyQuery, ObservationLog, Scope, Window,
};
use wba_core::capture::{open_session, ApplyOutcome, CaptureBatch, SessionRecord, Store};
use wba_core::mapping::{
    generate_exam, verify_blueprint, BlueprintConstraint, MappingEdge, MappingError, MappingGraph, SourceRef,
};
use wba_core::registry::RegistryDocument;
use wba_core::scheduler::{plan, priority_score, AnalyticsSnapshot, SchedulerConfig, Standing};
use wba_core::synth::{generate, inject_anomaly, AnomalyKind, AnomalyParams, Cohort, CohortConfig};
use wba_core::*;

type Outcome = Result<String, String>;

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("consistency-oracle", consistency_oracle),
        ("deployment-statistics", deployment_statistics),
        ("barcode-properties", barcode_properties),
        ("calibration-recovery", calibration_recovery),
        ("exam-generation", exam_generation),
        ("lifecycle-state-machine", lifecycle),
        ("sync-idempotency", sync_idempotency),
        ("scheduler", scheduler),
        ("crash-safety", crash_safety),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn small_config(rng: &mut ChaCha8Rng) -> CohortConfig {
    CohortConfig {
        seed: rng.random(),
        n_students: rng.random_range(4..=60),
        n_staff: rng.random_range(4..=10),
        n_locations: rng.random_range(2..=4),
        n_outcomes: rng.random_range(4..=12),
        n_procedures: rng.random_range(2..=5),
        items_per_procedure: rng.random_range(2..=6),
        n_teaching_units: 2,
        n_questions: 10,
        procedures_per_location: 2,
        staff_per_location: 2,
        clinic_size: 4,
        years: 1,
        teaching_weeks_per_year: rng.random_range(2..=16),
        mean_observations_per_session: rng.random_range(2.0..18.0),
        noise: 1.0,
        ..Default::default()
    }
}

fn scopes(registry: &Registry, rng: &mut ChaCha8Rng) -> Vec<Scope> {
    let mut out = vec![Scope::All];
    let procs: Vec<_> = registry.procedures().map(|p| p.id.clone()).collect();
    let items: Vec<_> = registry.items().map(|i| i.id.clone()).collect();
    let outcomes: Vec<_> = registry.outcomes().map(|o| o.id.clone()).collect();
    out.push(Scope::Procedure(procs.choose(rng).unwrap().clone()));
    out.push(Scope::Item(items.choose(rng).unwrap().clone()));
    out.push(Scope::Outcome(outcomes.choose(rng).unwrap().clone()));
    out
}

/// In-scope test written against the registry rather than the mapping graph.
fn in_scope(registry: &Registry, o: &Observation, scope: &Scope) -> bool {
    match scope {
        Scope::All => true,
        Scope::Procedure(p) => &o.procedure_id == p,
        Scope::Item(i) => &o.workflow_item_id == i,
        Scope::Outcome(out) => registry
            .item(o.workflow_item_id.as_str())
            .is_some_and(|item| item.outcomes.contains(out)),
    }
}

/// Groups the raw log by session with a plain scan, then for `student`
/// counts the sessions with in-scope observations and those where all of
/// them reach `threshold`.
fn brute_force(
    registry: &Registry,
    by_session: &BTreeMap<&SessionId, Vec<&Observation>>,
    student: &StudentId,
    scope: &Scope,
    threshold: u8,
) -> (u32, u32) {
    let (mut num, mut den) = (0, 0);
    for obs in by_session.values() {
        let relevant: Vec<_> = obs
            .iter()
            .filter(|o| &o.student_id == student && in_scope(registry, o, scope))
            .collect();
        if relevant.is_empty() {
            continue;
        }
        den += 1;
        if relevant.iter().all(|o| o.indicator.get() >= threshold) {
            num += 1;
        }
    }
    (num, den)
}

fn consistency_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0);
    let mut slowest = 0.0f64;
    let mut largest = 0;
    let mut queries = 0;
    for trial in 0..100 {
        let cohort = loop {
            let c = generate(&small_config(&mut rng)).map_err(|e| e.to_string())?;
            if c.observations.len() <= 10_000 {
                break c;
            }
        };
        largest = largest.max(cohort.observations.len());
        let mut obs = cohort.observations.clone();
        obs.shuffle(&mut rng);
        let graph = MappingGraph::from_registry(&cohort.registry);
        let scopes = scopes(&cohort.registry, &mut rng);

        let started = Instant::now();
        let log = ObservationLog::new(obs.iter().cloned());
        let mut results = Vec::new();
        for s in cohort.registry.students() {
            for scope in &scopes {
                for t in 1..=6 {
                    let q = ConsistencyQuery::new(s.id.clone(), scope.clone(), t, Window::All).unwrap();
                    results.push((s.id.clone(), scope.clone(), t, sessional_consistency(&log, &graph, &q)));
                }
            }
        }
        slowest = slowest.max(started.elapsed().as_secs_f64());

        let mut by_session: BTreeMap<&SessionId, Vec<&Observation>> = BTreeMap::new();
        for o in &obs {
            by_session.entry(&o.session_id).or_default().push(o);
        }
        for (student, scope, t, c) in results {
            queries += 1;
            let (num, den) = brute_force(&cohort.registry, &by_session, &student, &scope, t);
            ensure!(
                (c.numerator, c.denominator) == (num, den),
                "trial {trial}: {student} {scope} t={t} got {}/{} expected {num}/{den}",
                c.numerator,
                c.denominator
            );
            let expected = (den > 0).then(|| f64::from(num) / f64::from(den));
            ensure!(c.value == expected, "trial {trial}: value {:?} expected {expected:?}", c.value);
        }
    }
    ensure!(slowest < 1.0, "slowest log took {slowest:.3}s");
    Ok(format!(
        "100 logs (largest {largest} observations), {queries} queries exact; slowest log {slowest:.3}s"
    ))
}

fn deployment_statistics() -> Outcome {
    let started = Instant::now();
    let cohort = generate(&CohortConfig::default()).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let stats = cohort.stats();
    let (lo, hi) = (5061.0 * 0.9, 5061.0 * 1.1);
    let per = stats.observations_per_student;
    let staff = stats.distinct_staff_per_student;
    ensure!(
        per.min as f64 >= lo && per.max as f64 <= hi,
        "observation totals {}..{} outside {lo:.0}..{hi:.0}",
        per.min,
        per.max
    );
    ensure!(staff.min >= 44 && staff.max <= 60, "distinct staff {}..{} outside 44..60", staff.min, staff.max);
    let m = stats.mean_observations_per_session;
    ensure!((m - 18.0).abs() <= 1.0, "mean observations per session {m:.3}");
    ensure!(secs < 60.0, "generation took {secs:.1}s");
    Ok(format!(
        "totals {}..{} (mean {:.0}), distinct staff {}..{} (mean {:.1}), {m:.2} per session, generated in {secs:.1}s",
        per.min, per.max, per.mean, staff.min, staff.max, staff.mean
    ))
}

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2022, 1, 10, 9, 0, 0).unwrap()
}

/// Random observation log over a handful of students, items and sessions,
/// with a random item to outcome mapping.
fn random_log(rng: &mut ChaCha8Rng) -> (Vec<Observation>, MappingGraph, Vec<Scope>) {
    let n_items = rng.random_range(1..=5);
    let n_outcomes = rng.random_range(1..=3);
    let n_sessions = rng.random_range(1..=12);
    let n = rng.random_range(0..=60);
    let mut edges = Vec::new();
    for i in 0..n_items {
        for o in 0..n_outcomes {
            if rng.random_bool(0.4) {
                edges.push(MappingEdge {
                    source: SourceRef::WorkflowItem(ItemId::new(format!("I{i}")).unwrap()),
                    target: OutcomeId::new(format!("O{o}")).unwrap(),
                });
            }
        }
    }
    let graph = MappingGraph::from_edges(edges).unwrap();
    let obs = (0..n)
        .map(|k| {
            let item = rng.random_range(0..n_items);
            Observation {
                id: ObservationId::new(format!("o{k}")).unwrap(),
                session_id: SessionId::new(format!("s{}", rng.random_range(0..n_sessions))).unwrap(),
                student_id: StudentId::new(format!("st{}", rng.random_range(0..2))).unwrap(),
                staff_id: StaffId::new("sf").unwrap(),
                workflow_item_id: ItemId::new(format!("I{item}")).unwrap(),
                procedure_id: ProcedureId::new(format!("P{}", item % 2)).unwrap(),
                indicator: DevelopmentalIndicator::new(rng.random_range(1..=6)).unwrap(),
                timestamp: t0() + chrono::Duration::minutes(rng.random_range(0..10_000)),
                comment: None,
            }
        })
        .collect();
    let mut scopes = vec![Scope::All, Scope::Procedure(ProcedureId::new("P0").unwrap())];
    scopes.push(Scope::Item(ItemId::new(format!("I{}", rng.random_range(0..n_items))).unwrap()));
    scopes.push(Scope::Outcome(OutcomeId::new(format!("O{}", rng.random_range(0..n_outcomes))).unwrap()));
    (obs, graph, scopes)
}

fn barcode_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBA);
    let mut checks = 0;
    for case in 0..1000 {
        let (obs, graph, scopes) = random_log(&mut rng);
        let log = ObservationLog::new(obs);
        for student in ["st0", "st1"] {
            let student = StudentId::new(student).unwrap();
            for scope in &scopes {
                let window = match rng.random_range(0..3) {
                    0 => Window::All,
                    1 => Window::LastSessions { n: rng.random_range(1..=5) },
                    _ => Window::Dates {
                        from: Some(t0().date_naive() + chrono::Days::new(rng.random_range(0..3))),
                        to: None,
                    },
                };
                let mut previous: Option<Vec<bool>> = None;
                for t in 1..=6 {
                    let q = ConsistencyQuery::new(student.clone(), scope.clone(), t, window.clone()).unwrap();
                    let code = barcode(&log, &graph, &q);
                    let meets: Vec<bool> = code.cells.iter().map(|c| c.meets).collect();
                    if let Some(prev) = &previous {
                        ensure!(prev.len() == meets.len(), "case {case}: cell count changed with threshold");
                        ensure!(
                            prev.iter().zip(&meets).all(|(before, after)| *before || !*after),
                            "case {case}: raising threshold to {t} turned a cell on"
                        );
                    }
                    // Coherence: sessions of the barcode give the consistency.
                    let mut by_session: BTreeMap<&SessionId, bool> = BTreeMap::new();
                    for c in &code.cells {
                        let e = by_session.entry(&c.session_id).or_insert(true);
                        *e &= c.meets;
                    }
                    let c = sessional_consistency(&log, &graph, &q);
                    let all = by_session.values().filter(|m| **m).count() as u32;
                    ensure!(
                        (c.numerator, c.denominator) == (all, by_session.len() as u32),
                        "case {case}: consistency {}/{} but barcode gives {all}/{}",
                        c.numerator,
                        c.denominator,
                        by_session.len()
                    );
                    ensure!(
                        code.all_meet() == (c.denominator > 0 && c.numerator == c.denominator) || code.cells.is_empty(),
                        "case {case}: all-meet disagrees with consistency"
                    );
                    previous = Some(meets);
                    checks += 1;
                }
            }
        }
    }
    Ok(format!("1000 random logs, {checks} barcode/consistency pairs checked"))
}

fn calibration_recovery() -> Outcome {
    let mut errors = Vec::new();
    let mut worst = 0.0f64;
    for seed in 0..30u64 {
        let mut config = CohortConfig {
            seed,
            ..Default::default()
        };
        let ids = [(1, 1.0), (2, -1.0), (3, 1.0), (4, -1.0)];
        for (i, offset) in ids {
            config.strictness_overrides.insert(CohortConfig::staff_id(i).to_string(), offset);
        }
        let cohort = generate(&config).map_err(|e| e.to_string())?;
        let rows = calibration_report(&cohort.log(), &cohort.registry);
        for (i, _) in ids {
            let id = CohortConfig::staff_id(i);
            let row = rows.iter().find(|r| r.staff_id == id).ok_or("missing staff row")?;
            let got = row.mean_offset.ok_or_else(|| format!("seed {seed}: {id} has no shared items"))?;
            let err = (got - cohort.strictness[&id]).abs();
            worst = worst.max(err);
            errors.push(err);
        }
    }
    let mae = errors.iter().sum::<f64>() / errors.len() as f64;
    ensure!(mae <= 0.15, "mean absolute error {mae:.4} over {} raters", errors.len());

    // Narrow raters.
    let base = generate(&CohortConfig {
        years: 1,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let supports: [&[u8]; 5] = [&[4], &[3, 4], &[2, 4, 6], &[1, 2, 3, 5], &[1, 2, 3, 4, 5]];
    for (k, support) in supports.iter().enumerate() {
        let params = AnomalyParams {
            count: 3,
            support: support.to_vec(),
            ..Default::default()
        };
        let (narrowed, labels) =
            inject_anomaly(&base, AnomalyKind::NarrowRater, &params, k as u64).map_err(|e| e.to_string())?;
        let rows = calibration_report(&narrowed.log(), &narrowed.registry);
        for t in &labels.targets {
            let row = rows.iter().find(|r| r.staff_id.as_str() == t).ok_or("missing narrow rater")?;
            ensure!(
                usize::from(row.distinct_points) == support.len(),
                "{t}: {} distinct points for support {support:?}",
                row.distinct_points
            );
        }
    }
    Ok(format!(
        "MAE {mae:.4} (worst {worst:.3}) over {} raters in 30 seeds; narrow-rater support sizes 1..5 recovered",
        errors.len()
    ))
}

fn exam_registry(n_outcomes: usize, questions: &[Vec<usize>]) -> Registry {
    Registry::from_document(RegistryDocument {
        outcomes: (0..n_outcomes)
            .map(|i| LearningOutcome {
                id: OutcomeId::new(format!("O{i}")).unwrap(),
                label: String::new(),
                authority: Authority::default(),
            })
            .collect(),
        questions: questions
            .iter()
            .enumerate()
            .map(|(i, os)| ExamQuestion {
                id: QuestionId::new(format!("Q{i:02}")).unwrap(),
                text: String::new(),
                outcome_ids: os.iter().map(|o| OutcomeId::new(format!("O{o}")).unwrap()).collect(),
                usage_stats: UsageStats::default(),
            })
            .collect(),
        ..Default::default()
    })
    .unwrap()
}

fn oid(i: usize) -> OutcomeId {
    OutcomeId::new(format!("O{i}")).unwrap()
}

/// Smallest passing exam size within `limit`, by enumerating subsets.
fn exhaustive_min(reg: &Registry, graph: &MappingGraph, bank: &[QuestionId], cs: &[BlueprintConstraint], limit: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    for mask in 0u32..(1 << bank.len()) {
        let size = mask.count_ones() as usize;
        if size > limit || best.is_some_and(|b| size >= b) {
            continue;
        }
        let exam: Vec<_> = (0..bank.len()).filter(|i| mask & (1 << i) != 0).map(|i| bank[i].clone()).collect();
        if verify_blueprint(reg, graph, &exam, cs).unwrap().pass {
            best = Some(size);
        }
    }
    best
}

fn exam_generation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE7);
    let history = BTreeMap::new();

    // Feasible by construction: constraints are read off a hidden exam.
    for case in 0..50 {
        let n_out = rng.random_range(3..=15);
        let n_q = rng.random_range(5..=60);
        let qs: Vec<Vec<usize>> = (0..n_q)
            .map(|_| {
                let k = rng.random_range(1..=3usize.min(n_out));
                rand::seq::index::sample(&mut rng, n_out, k).into_vec()
            })
            .collect();
        let reg = exam_registry(n_out, &qs);
        let graph = MappingGraph::from_registry(&reg);
        let bank: Vec<_> = reg.questions().map(|q| q.id.clone()).collect();
        let size = rng.random_range(1..=n_q);
        let hidden = rand::seq::index::sample(&mut rng, n_q, size).into_vec();
        let mut counts = vec![0u32; n_out];
        for q in &hidden {
            for o in &qs[*q] {
                counts[*o] += 1;
            }
        }
        let cs: Vec<_> = counts
            .iter()
            .enumerate()
            .filter_map(|(o, c)| {
                (*c > 0 && rng.random_bool(0.7)).then(|| BlueprintConstraint::at_least(oid(o), rng.random_range(1..=*c)))
            })
            .collect();
        let limit = rng.random_range(hidden.len()..=n_q);
        let exam = generate_exam(&reg, &graph, &bank, &cs, limit, &history)
            .map_err(|e| format!("feasible case {case}: {e}"))?;
        ensure!(exam.len() <= limit, "feasible case {case}: exam over size limit");
        ensure!(
            verify_blueprint(&reg, &graph, &exam, &cs).unwrap().pass,
            "feasible case {case}: generated exam fails its blueprint"
        );
    }

    // Infeasible: one constraint asks for more questions than its outcome has.
    for case in 0..20 {
        let n_out = rng.random_range(2..=8);
        let qs: Vec<Vec<usize>> = (0..rng.random_range(3..=20)).map(|_| vec![rng.random_range(0..n_out)]).collect();
        let reg = exam_registry(n_out, &qs);
        let graph = MappingGraph::from_registry(&reg);
        let bank: Vec<_> = reg.questions().map(|q| q.id.clone()).collect();
        let bad = rng.random_range(0..n_out);
        let available = qs.iter().filter(|q| q[0] == bad).count() as u32;
        let cs: Vec<_> = (0..n_out)
            .map(|o| {
                let have = qs.iter().filter(|q| q[0] == o).count() as u32;
                let min = if o == bad { available + 1 } else { have.min(1) };
                BlueprintConstraint::at_least(oid(o), min)
            })
            .collect();
        match generate_exam(&reg, &graph, &bank, &cs, qs.len(), &history) {
            Err(MappingError::Infeasible { constraint, .. }) => {
                ensure!(constraint.outcome_id == oid(bad), "infeasible case {case}: wrong witness {}", constraint.outcome_id)
            }
            other => return Err(format!("infeasible case {case}: expected infeasible, got {other:?}")),
        }
    }

    // Unit capacity: every question covers exactly one outcome.
    let mut compared = 0;
    let mut instances = 0;
    while instances < 300 {
        let n_out = rng.random_range(1..=5);
        let n_q = rng.random_range(1..=12);
        let qs: Vec<Vec<usize>> = (0..n_q).map(|_| vec![rng.random_range(0..n_out)]).collect();
        let reg = exam_registry(n_out, &qs);
        let graph = MappingGraph::from_registry(&reg);
        let bank: Vec<_> = reg.questions().map(|q| q.id.clone()).collect();
        let cs: Vec<_> = (0..n_out)
            .map(|o| BlueprintConstraint::at_least(oid(o), rng.random_range(0..=3)))
            .collect();
        let limit = rng.random_range(1..=n_q);
        instances += 1;
        let optimum = exhaustive_min(&reg, &graph, &bank, &cs, limit);
        match (generate_exam(&reg, &graph, &bank, &cs, limit, &history), optimum) {
            (Ok(exam), Some(best)) => {
                ensure!(exam.len() == best, "unit instance {instances}: greedy {} vs optimum {best}", exam.len());
                compared += 1;
            }
            (Err(MappingError::Infeasible { .. }), None) => {}
            (got, want) => return Err(format!("unit instance {instances}: greedy {got:?} vs exhaustive {want:?}")),
        }
    }
    Ok(format!(
        "50 feasible exams verified, 20 infeasible with correct witness, {instances} unit-capacity instances match exhaustive ({compared} feasible)"
    ))
}

struct Lifecycle {
    registry: Registry,
    rng: ChaCha8Rng,
    now: DateTime<Utc>,
    active: Vec<SessionRecord>,
    /// Per active session and locked student, the observations at sign-out.
    frozen: BTreeMap<(SessionId, StudentId), Vec<Observation>>,
    committed: Vec<(SessionRecord, CaptureBatch)>,
    store: Store,
    next: usize,
    counts: BTreeMap<&'static str, usize>,
}

impl Lifecycle {
    fn id(&mut self) -> usize {
        self.next += 1;
        self.next
    }

    fn tick(&mut self) {
        self.now += chrono::Duration::seconds(self.rng.random_range(1..120));
    }

    fn count(&mut self, what: &'static str) {
        *self.counts.entry(what).or_insert(0) += 1;
    }

    fn step(&mut self) -> Result<(), String> {
        self.tick();
        let op = self.rng.random_range(0..100);
        if self.active.is_empty() || (op < 5 && self.active.len() < 6) {
            return self.open();
        }
        let k = self.rng.random_range(0..self.active.len());
        match op {
            0..=64 => self.record(k),
            65..=79 => self.sign_out_student(k),
            80..=89 => self.sign_out_staff(k),
            _ => self.touch_committed(),
        }
    }

    fn open(&mut self) -> Result<(), String> {
        let locs: Vec<_> = self.registry.locations().map(|l| l.id.clone()).collect();
        let staff: Vec<_> = self.registry.staff().map(|s| s.id.clone()).collect();
        let students: Vec<_> = self.registry.students().map(|s| s.id.clone()).collect();
        let n = self.rng.random_range(1..=4);
        let chosen: Vec<_> = students.choose_multiple(&mut self.rng, n).cloned().collect();
        let id = SessionId::new(format!("S{}", self.id())).unwrap();
        let loc = locs.choose(&mut self.rng).unwrap().clone();
        let sf = staff.choose(&mut self.rng).unwrap().clone();
        let record = open_session(&self.registry, id, &loc, &sf, chosen, self.now).map_err(|e| e.to_string())?;
        self.active.push(record);
        self.count("open");
        Ok(())
    }

    fn draft(&mut self, k: usize) -> ObservationDraft {
        let session = &self.active[k].session;
        let students: Vec<_> = session.students.keys().cloned().collect();
        let student = if self.rng.random_bool(0.95) {
            students.choose(&mut self.rng).unwrap().clone()
        } else {
            self.registry.students().map(|s| s.id.clone()).collect::<Vec<_>>().choose(&mut self.rng).unwrap().clone()
        };
        let procs: Vec<_> = session.offered_procedures.iter().cloned().collect();
        let proc = if self.rng.random_bool(0.97) {
            procs.choose(&mut self.rng).unwrap().clone()
        } else {
            self.registry.procedures().last().unwrap().id.clone()
        };
        let workflow = &self.registry.procedure(proc.as_str()).unwrap().workflow;
        let item = workflow.choose(&mut self.rng).unwrap().clone();
        let indicator = if self.rng.random_bool(0.98) { self.rng.random_range(1..=6) } else { 7 };
        ObservationDraft {
            id: ObservationId::new(format!("O{}", self.next + 1)).unwrap(),
            session_id: session.id.clone(),
            student_id: student,
            staff_id: session.staff_id.clone(),
            workflow_item_id: item,
            procedure_id: proc,
            indicator,
            timestamp: self.now,
            comment: None,
        }
    }

    fn record(&mut self, k: usize) -> Result<(), String> {
        let draft = self.draft(k);
        self.next += 1;
        let before = self.active[k].observations.len();
        let locked = matches!(
            self.active[k].session.lock_state(&draft.student_id),
            Some(LockState::StudentSignedOut { .. })
        );
        let result = self.active[k].record(&self.registry, &draft).map(|_| ()).map_err(|e| e.code());
        let after = self.active[k].observations.len();
        if locked {
            ensure!(result == Err("locked-record"), "observation on locked record: {result:?}");
            ensure!(after == before, "locked record changed");
            self.count("refused-locked");
        } else if result.is_ok() {
            ensure!(after == before + 1, "accepted observation not stored");
            self.count("recorded");
        } else {
            ensure!(after == before, "rejected observation stored");
            self.count("rejected-invalid");
        }
        Ok(())
    }

    fn sign_out_student(&mut self, k: usize) -> Result<(), String> {
        let students: Vec<_> = self.active[k].session.students.keys().cloned().collect();
        let s = students.choose(&mut self.rng).unwrap().clone();
        let was_open = self.active[k].session.lock_state(&s) == Some(LockState::Open);
        let now = self.now;
        let result = self.active[k].student_signout(&s, now).map(|_| ());
        ensure!(result.is_ok() == was_open, "sign-out result {result:?} for open={was_open}");
        if was_open {
            let obs: Vec<_> = self.active[k].observations_for(&s).cloned().collect();
            self.frozen.insert((self.active[k].id().clone(), s), obs);
            self.count("student-signout");
        }
        Ok(())
    }

    fn sign_out_staff(&mut self, k: usize) -> Result<(), String> {
        let open = self.active[k].session.students.values().any(|s| s.is_open());
        let batch_id = BatchId::new(format!("B{}", self.id())).unwrap();
        let now = self.now;
        let result = self.active[k].staff_signout(&ClientId::new("c").unwrap(), batch_id, now);
        match (open, result) {
            (true, Err(e)) => {
                ensure!(e.code() == "students-still-open", "unexpected {e}");
                // Sign everyone out so the session can close later.
                let students: Vec<_> = self.active[k].session.students.keys().cloned().collect();
                for s in students {
                    if self.active[k].session.lock_state(&s) == Some(LockState::Open) {
                        let obs: Vec<_> = self.active[k].observations_for(&s).cloned().collect();
                        self.active[k].student_signout(&s, now).map_err(|e| e.to_string())?;
                        self.frozen.insert((self.active[k].id().clone(), s), obs);
                    }
                }
                Ok(())
            }
            (false, Ok(batch)) => {
                let record = self.active.swap_remove(k);
                ensure!(record.is_committed(), "staff sign-out did not commit");
                for (student, fb) in &record.feedback {
                    let frozen = &self.frozen[&(record.id().clone(), student.clone())];
                    ensure!(
                        fb.entries.len() == frozen.len() && record.observations_for(student).count() == frozen.len(),
                        "record for {student} changed after sign-out"
                    );
                }
                match self.store.apply(&self.registry, &batch) {
                    Ok(ApplyOutcome::Applied { .. }) => {}
                    other => return Err(format!("committed batch not applied: {other:?}")),
                }
                self.committed.push((record, batch));
                self.count("committed");
                Ok(())
            }
            (open, result) => Err(format!("staff sign-out with open={open} gave {result:?}")),
        }
    }

    /// Attempts to alter a committed session, locally and through sync.
    fn touch_committed(&mut self) -> Result<(), String> {
        if self.committed.is_empty() {
            return Ok(());
        }
        let k = self.rng.random_range(0..self.committed.len());
        let (mut record, batch) = self.committed[k].clone();
        let snapshot = record.clone();
        let mut draft = batch.observations.first().cloned().unwrap_or_else(|| ObservationDraft {
            id: ObservationId::new("X").unwrap(),
            session_id: record.id().clone(),
            student_id: record.session.students.keys().next().unwrap().clone(),
            staff_id: record.session.staff_id.clone(),
            workflow_item_id: self.registry.items().next().unwrap().id.clone(),
            procedure_id: self.registry.procedures().next().unwrap().id.clone(),
            indicator: 3,
            timestamp: self.now,
            comment: None,
        });
        draft.id = ObservationId::new(format!("O{}", self.id())).unwrap();
        let r = record.record(&self.registry, &draft).map(|_| ()).map_err(|e| e.code());
        ensure!(r == Err("already-committed"), "committed session accepted an observation: {r:?}");
        let s = record.session.students.keys().next().unwrap().clone();
        ensure!(record.student_signout(&s, self.now).is_err(), "committed session accepted a sign-out");
        ensure!(record == snapshot, "committed session mutated locally");

        let stored_before = self.store.session(record.id().as_str()).cloned();
        // Hashing the whole store is costly once it holds thousands of sessions.
        let full = self.counts.get("tamper-refused").copied().unwrap_or(0) % 64 == 0;
        let hash = full.then(|| self.store.state_hash());
        let sizes = (self.store.session_count(), self.store.observation_count());
        let mut tampered = batch.clone();
        match self.rng.random_range(0..3) {
            0 => tampered.observations.push(draft),
            1 => {
                if let Some(o) = tampered.observations.first_mut() {
                    o.indicator = o.indicator % 6 + 1;
                } else {
                    tampered.observations.push(draft);
                }
            }
            _ => tampered.batch_id = BatchId::new(format!("B{}", self.id())).unwrap(),
        }
        let result = self.store.apply(&self.registry, &tampered);
        ensure!(result.is_err(), "tampered upload of a committed session accepted: {result:?}");
        ensure!(
            (self.store.session_count(), self.store.observation_count()) == sizes,
            "store grew after a rejected upload"
        );
        if let Some(hash) = hash {
            ensure!(self.store.state_hash() == hash, "store changed by a rejected upload");
        }
        ensure!(
            self.store.session(record.id().as_str()).cloned() == stored_before,
            "stored session mutated"
        );
        self.count("tamper-refused");
        Ok(())
    }
}

fn lifecycle() -> Outcome {
    let cohort = generate(&CohortConfig {
        n_students: 12,
        n_staff: 6,
        n_locations: 3,
        n_procedures: 4,
        items_per_procedure: 6,
        n_outcomes: 10,
        n_teaching_units: 2,
        n_questions: 10,
        procedures_per_location: 2,
        staff_per_location: 2,
        years: 1,
        teaching_weeks_per_year: 1,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let mut machine = Lifecycle {
        registry: cohort.registry,
        rng: ChaCha8Rng::seed_from_u64(0x11FE),
        now: t0(),
        active: Vec::new(),
        frozen: BTreeMap::new(),
        committed: Vec::new(),
        store: Store::new(),
        next: 0,
        counts: BTreeMap::new(),
    };
    const STEPS: usize = 100_000;
    for step in 0..STEPS {
        machine.step().map_err(|e| format!("step {step}: {e}"))?;
        // Locked records never gain observations.
        if step % 97 == 0 {
            for r in &machine.active {
                for (student, state) in &r.session.students {
                    if !state.is_open() {
                        let frozen = &machine.frozen[&(r.id().clone(), student.clone())];
                        ensure!(
                            r.observations_for(student).count() == frozen.len(),
                            "step {step}: locked record for {student} grew"
                        );
                    }
                }
            }
        }
    }
    for (record, _) in &machine.committed {
        ensure!(
            machine.store.session(record.id().as_str()) == Some(record),
            "stored session differs from the committed record"
        );
    }
    let counts: Vec<String> = machine.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    Ok(format!("{STEPS} steps; {}", counts.join(" ")))
}

fn tiny_cohort(seed: u64) -> Cohort {
    generate(&CohortConfig {
        seed,
        n_students: 10,
        n_staff: 4,
        n_locations: 2,
        n_outcomes: 8,
        n_procedures: 3,
        items_per_procedure: 5,
        n_teaching_units: 2,
        n_questions: 12,
        procedures_per_location: 2,
        staff_per_location: 2,
        clinic_size: 4,
        years: 1,
        teaching_weeks_per_year: 4,
        mean_observations_per_session: 5.0,
        ..Default::default()
    })
    .unwrap()
}

fn sync_idempotency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5C);
    let mut trials = 0;
    for seed in 0..10 {
        let cohort = tiny_cohort(seed);
        let all: Vec<CaptureBatch> = cohort.batches().collect();
        for _ in 0..20 {
            let n = rng.random_range(0..=all.len());
            let chosen: Vec<CaptureBatch> = all.choose_multiple(&mut rng, n).cloned().collect();
            let mut reference = Store::new();
            for b in &chosen {
                reference.apply(&cohort.registry, b).map_err(|e| e.to_string())?;
            }
            for _ in 0..5 {
                let mut stream = chosen.clone();
                for _ in 0..rng.random_range(0..=2 * n + 1) {
                    if let Some(b) = chosen.choose(&mut rng) {
                        stream.push(b.clone());
                    }
                }
                stream.shuffle(&mut rng);
                let mut store = Store::new();
                let mut applied = 0;
                for b in &stream {
                    match store.apply(&cohort.registry, b).map_err(|e| e.to_string())? {
                        ApplyOutcome::Applied { .. } => applied += 1,
                        ApplyOutcome::Duplicate { .. } => {}
                    }
                }
                ensure!(applied == n, "{applied} batches applied, expected {n}");
                ensure!(store.state_hash() == reference.state_hash(), "state hash differs after permutation");
                ensure!(store == reference, "store differs after permutation");
                trials += 1;
            }
        }
    }
    Ok(format!("{trials} shuffled and duplicated streams give identical state hashes"))
}

/// Exact maximum total priority over unit slots, by dynamic programming over
/// demands and the set of used slots.
fn exhaustive_priority(demands: &[(usize, f64)], slot_procs: &[usize]) -> f64 {
    let n = slot_procs.len();
    let mut best = vec![0.0f64; 1 << n];
    for &(proc, score) in demands.iter().rev() {
        let prev = best.clone();
        for mask in 0..(1usize << n) {
            let mut v = prev[mask];
            for j in 0..n {
                if mask & (1 << j) == 0 && slot_procs[j] == proc {
                    v = v.max(score + prev[mask | (1 << j)]);
                }
            }
            best[mask] = v;
        }
    }
    best[0]
}

fn sched_instance(
    rng: &mut ChaCha8Rng,
    max_students: usize,
    max_slots: usize,
    unit: bool,
) -> (Vec<StudentId>, Vec<PatientSlot>, AnalyticsSnapshot, Vec<usize>) {
    let n_proc = rng.random_range(1..=3);
    let students: Vec<_> = (0..rng.random_range(1..=max_students))
        .map(|i| StudentId::new(format!("S{i}")).unwrap())
        .collect();
    let slot_procs: Vec<usize> = (0..rng.random_range(0..=max_slots)).map(|_| rng.random_range(0..n_proc)).collect();
    let slots = slot_procs
        .iter()
        .enumerate()
        .map(|(i, p)| PatientSlot {
            id: SlotId::new(format!("L{i:02}")).unwrap(),
            procedure_id: ProcedureId::new(format!("P{p}")).unwrap(),
            date: chrono::NaiveDate::from_ymd_opt(2024, 1, 1 + rng.random_range(0..20)).unwrap(),
            capacity: if unit { 1 } else { rng.random_range(1..=3) },
        })
        .collect();
    let mut snap = AnalyticsSnapshot::default();
    for s in &students {
        for p in 0..n_proc {
            if rng.random_bool(0.7) {
                let consistency = rng.random_bool(0.8).then(|| f64::from(rng.random_range(0..=10u8)) / 10.0);
                let standing = Standing {
                    consistency,
                    experience: rng.random_range(0..12),
                };
                snap.insert(s.clone(), ProcedureId::new(format!("P{p}")).unwrap(), standing);
            }
        }
    }
    (students, slots, snap, slot_procs)
}

fn scheduler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5C4E);
    let config = SchedulerConfig::default();
    let mut held = 0;
    for case in 0..1000 {
        let (students, slots, mut snap, _) = sched_instance(&mut rng, 12, 10, false);
        let p = plan(&students, &slots, &snap, &config).map_err(|e| e.to_string())?;
        let load = p.slot_load();
        for s in &slots {
            ensure!(load.get(&s.id).copied().unwrap_or(0) <= s.capacity, "case {case}: slot {} over capacity", s.id);
        }
        for a in &p.assignments {
            let slot = slots.iter().find(|s| s.id == a.slot_id).ok_or("unknown slot")?;
            ensure!(slot.procedure_id == a.procedure_id, "case {case}: assignment to a slot of another procedure");
        }
        // Holding monotonicity: more consistency never brings a held student back.
        for h in p.holding.clone() {
            let old = snap.standing(&h.student_id, &h.procedure_id);
            let raised = Standing {
                consistency: Some((old.consistency.unwrap_or(0.0) + rng.random_range(0.0..0.5)).min(1.0)),
                experience: old.experience + rng.random_range(0..3),
            };
            snap.insert(h.student_id.clone(), h.procedure_id.clone(), raised);
            let after = plan(&students, &slots, &snap, &config).map_err(|e| e.to_string())?;
            ensure!(
                after.is_holding(&h.student_id, &h.procedure_id),
                "case {case}: {} left holding after improving",
                h.student_id
            );
            ensure!(
                !(after.is_assigned(&h.student_id, &h.procedure_id) && !p.is_assigned(&h.student_id, &h.procedure_id)),
                "case {case}: improving {} gained them a slot",
                h.student_id
            );
            held += 1;
        }
    }

    // Greedy against the exact optimum, holding switched off so every
    // demand competes.
    let open = SchedulerConfig {
        hold_consistency: 1.0,
        hold_min_experience: u32::MAX,
        ..Default::default()
    };
    let mut exact = 0;
    for case in 0..1000 {
        let (students, slots, snap, slot_procs) = sched_instance(&mut rng, 8, 8, true);
        let p = plan(&students, &slots, &snap, &open).map_err(|e| e.to_string())?;
        let procs: BTreeSet<ProcedureId> = slots
            .iter()
            .map(|s| s.procedure_id.clone())
            .chain(snap.procedures().into_iter().cloned())
            .collect();
        let mut demands = Vec::new();
        for s in &students {
            for pr in &procs {
                let k: usize = pr.as_str()[1..].parse().unwrap();
                demands.push((k, priority_score(&snap.standing(s, pr), &open)));
            }
        }
        let best = exhaustive_priority(&demands, &slot_procs);
        ensure!(
            (p.total_priority() - best).abs() < 1e-9,
            "case {case}: greedy {} vs exhaustive {best}",
            p.total_priority()
        );
        exact += 1;
    }
    Ok(format!(
        "1000 instances within capacity, {held} holding checks; {exact} small unit-slot instances match exhaustive"
    ))
}

struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(data: &Path) -> Result<Server, String> {
        let mut child = Command::new(env!("CARGO_BIN_EXE_wba"))
            .args(["--data-dir"])
            .arg(data)
            .args(["serve", "--bind", "127.0.0.1:0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| e.to_string())?;
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .map_err(|e| e.to_string())?;
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .ok_or_else(|| format!("unexpected server output {line:?}"))?
            .to_owned();
        Ok(Server { child, base })
    }

    fn get(&self, path: &str) -> Result<Vec<u8>, String> {
        let resp = reqwest::blocking::get(format!("{}{path}", self.base)).map_err(|e| e.to_string())?;
        let status = resp.status();
        let body = resp.bytes().map_err(|e| e.to_string())?.to_vec();
        ensure!(status.is_success(), "GET {path}: {status} {}", String::from_utf8_lossy(&body));
        Ok(body)
    }

    fn post(&self, path: &str, body: String) -> Result<Vec<u8>, String> {
        let resp = reqwest::blocking::Client::new()
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        let body = resp.bytes().map_err(|e| e.to_string())?.to_vec();
        ensure!(status.is_success(), "POST {path}: {status} {}", String::from_utf8_lossy(&body));
        Ok(body)
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn cli(data: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_wba"))
        .arg("--data-dir")
        .arg(data)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "wba {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    Ok(out.stdout)
}

/// Every report, keyed by request path.
fn reports(server: &Server, students: &[String], staff: &[String]) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut paths = vec![
        "/status".to_owned(),
        "/sessions".to_owned(),
        "/calibration".to_owned(),
        "/calibration?format=tsv".to_owned(),
        "/coverage".to_owned(),
        "/coverage?format=tsv".to_owned(),
        "/plans/PL000001?format=tsv".to_owned(),
        "/questions/Q0001/performance".to_owned(),
    ];
    for s in students {
        for q in ["", "?format=tsv", "?scope=procedure:P001&threshold=5", "?last=3"] {
            paths.push(format!("/students/{s}/consistency{q}"));
        }
        paths.push(format!("/students/{s}/barcode"));
        paths.push(format!("/students/{s}/barcode?format=tsv&threshold=3"));
        paths.push(format!("/students/{s}/portfolio?format=tsv"));
    }
    for s in staff {
        paths.push(format!("/staff/{s}/calibration?format=tsv"));
    }
    paths.into_iter().map(|p| server.get(&p).map(|b| (p, b))).collect()
}

fn crash_safety() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let gen = dir.path().join("gen");
    let data = dir.path().join("data");
    let config = dir.path().join("cohort.toml");
    std::fs::write(
        &config,
        "n_students = 12\nn_staff = 6\nn_locations = 3\nn_outcomes = 12\nn_procedures = 4\nitems_per_procedure = 5\n\
         n_teaching_units = 3\nn_questions = 20\nprocedures_per_location = 2\nstaff_per_location = 2\nyears = 1\n\
         teaching_weeks_per_year = 6\n",
    )
    .map_err(|e| e.to_string())?;
    let cfg = config.to_str().unwrap();
    cli(&data, &["generate-cohort", "--seed", "3", "--out-dir", gen.to_str().unwrap(), "--config", cfg])?;
    cli(&data, &["load-registry", gen.join("registry.toml").to_str().unwrap()])?;

    let lines: Vec<String> = std::fs::read_to_string(gen.join("batches.jsonl"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(str::to_owned)
        .collect();
    let half = lines.len() / 2;
    let first = dir.path().join("first.jsonl");
    std::fs::write(&first, lines[..half].join("\n")).map_err(|e| e.to_string())?;
    cli(&data, &["import-batch", first.to_str().unwrap()])?;

    let registry = Registry::load(&std::fs::read_to_string(gen.join("registry.toml")).unwrap()).unwrap();
    let students: Vec<String> = registry.students().map(|s| s.id.to_string()).collect();
    let staff: Vec<String> = registry.staff().map(|s| s.id.to_string()).collect();

    // Live writes through the service, then a hard kill at a quiescent point.
    let server = Server::start(&data)?;
    for chunk in lines[half..].chunks(7) {
        server.post("/sync", chunk.join("\n"))?;
    }
    server.post("/sync", lines[0].clone())?;
    for (q, correct) in [("Q0001", true), ("Q0001", false), ("Q0002", true)] {
        server.post(&format!("/questions/{q}/results"), format!("{{\"correct\":{correct},\"at\":\"2021-01-01T00:00:00Z\"}}"))?;
    }
    server.post("/plans", String::new())?;
    let before = reports(&server, &students, &staff)?;
    server.kill();

    // The library path over the replayed log gives the same bytes as the API.
    let cal_cli = cli(&data, &["export-report", "calibration"])?;
    ensure!(cal_cli == before["/calibration?format=tsv"], "CLI calibration differs from API");
    let cov_cli = cli(&data, &["export-report", "coverage"])?;
    ensure!(cov_cli == before["/coverage?format=tsv"], "CLI coverage differs from API");

    let server = Server::start(&data)?;
    let after = reports(&server, &students, &staff)?;
    server.kill();
    for (path, bytes) in &before {
        ensure!(after.get(path) == Some(bytes), "{path} differs after kill and replay");
    }

    // Kill again with snapshots removed: a full replay must agree too.
    std::fs::remove_dir_all(data.join("snapshots")).map_err(|e| e.to_string())?;
    let server = Server::start(&data)?;
    std::thread::sleep(Duration::from_millis(50));
    let replayed = reports(&server, &students, &staff)?;
    server.kill();
    ensure!(replayed == before, "full replay without snapshots differs");
    Ok(format!(
        "{} report payloads byte-identical after kill and replay (with and without snapshots)",
        before.len()
    ))
}
