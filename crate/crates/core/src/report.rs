//! Tab-separated exports. Reals are printed with six decimals and undefined
//! values as `NA`, so identical inputs always give identical bytes.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::analytics::{
    portfolio, sessional_consistency, Barcode, Consistency, ConsistencyQuery, ObservationLog, PortfolioConfig,
    PortfolioEntry, QueryError, Scope, StaffCalibration, Window,
};
use crate::ids::StudentId;
use crate::mapping::MappingGraph;
use crate::model::DevelopmentalIndicator;
use crate::registry::Registry;
use crate::scheduler::AllocationPlan;

pub const CONSISTENCY_TSV_HEADER: &str = "student_id\tscope\tthreshold\tmeets\tapplicable\tconsistency";
pub const CALIBRATION_TSV_HEADER: &str =
    "staff_id\tobservations\ti1\ti2\ti3\ti4\ti5\ti6\tdistinct_points\tshared_items\tmean_offset\ttotal_variation";
pub const PORTFOLIO_TSV_HEADER: &str = "student_id\tprocedure_id\texperience\tmeets\tconsistency\tsufficient";
pub const BARCODE_TSV_HEADER: &str =
    "observation_id\tsession_id\ttimestamp\tprocedure_id\tworkflow_item_id\tindicator\tmeets";
pub const PLAN_TSV_HEADER: &str = "kind\tstudent_id\tprocedure_id\tslot_id\tscore\tnote";

fn real(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |v| format!("{v:.6}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub student_id: StudentId,
    pub scope: Scope,
    pub threshold: DevelopmentalIndicator,
    pub consistency: Consistency,
}

/// Consistency for every registry student, in id order.
pub fn consistency_table(
    log: &ObservationLog,
    graph: &MappingGraph,
    registry: &Registry,
    scope: &Scope,
    threshold: u8,
    window: &Window,
) -> Result<Vec<ConsistencyRow>, QueryError> {
    registry
        .students()
        .map(|s| {
            let q = ConsistencyQuery::new(s.id.clone(), scope.clone(), threshold, window.clone())?;
            Ok(ConsistencyRow {
                consistency: sessional_consistency(log, graph, &q),
                student_id: q.student_id,
                scope: q.scope,
                threshold: q.threshold,
            })
        })
        .collect()
}

pub fn consistency_tsv(rows: &[ConsistencyRow]) -> String {
    let mut out = String::from(CONSISTENCY_TSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.student_id,
            r.scope,
            r.threshold,
            r.consistency.numerator,
            r.consistency.denominator,
            real(r.consistency.value)
        );
    }
    out
}

pub fn calibration_tsv(rows: &[StaffCalibration]) -> String {
    let mut out = String::from(CALIBRATION_TSV_HEADER);
    out.push('\n');
    for r in rows {
        let h = &r.histogram;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.staff_id,
            r.observations,
            h[0],
            h[1],
            h[2],
            h[3],
            h[4],
            h[5],
            r.distinct_points,
            r.shared_items,
            real(r.mean_offset),
            real(r.total_variation)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioRow {
    pub student_id: StudentId,
    #[serde(flatten)]
    pub entry: PortfolioEntry,
}

/// Portfolios of every registry student, students then procedures in id order.
pub fn portfolio_table(
    log: &ObservationLog,
    registry: &Registry,
    config: &PortfolioConfig,
) -> Result<Vec<PortfolioRow>, QueryError> {
    let mut rows = Vec::new();
    for s in registry.students() {
        for entry in portfolio(log, registry, &s.id, config)? {
            rows.push(PortfolioRow {
                student_id: s.id.clone(),
                entry,
            });
        }
    }
    Ok(rows)
}

pub fn portfolio_tsv(rows: &[PortfolioRow]) -> String {
    let mut out = String::from(PORTFOLIO_TSV_HEADER);
    out.push('\n');
    for r in rows {
        let e = &r.entry;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.student_id,
            e.procedure_id,
            e.experience_count,
            e.consistency.numerator,
            real(e.consistency.value),
            e.sufficient
        );
    }
    out
}

pub fn barcode_tsv(barcode: &Barcode) -> String {
    let mut out = String::from(BARCODE_TSV_HEADER);
    out.push('\n');
    for c in &barcode.cells {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.observation_id,
            c.session_id,
            c.timestamp.to_rfc3339(),
            c.procedure_id,
            c.workflow_item_id,
            c.indicator,
            c.meets
        );
    }
    out
}

pub fn plan_tsv(plan: &AllocationPlan) -> String {
    let mut out = String::from(PLAN_TSV_HEADER);
    out.push('\n');
    for a in &plan.assignments {
        let kind = if a.surplus { "surplus" } else { "assigned" };
        let _ = writeln!(
            out,
            "{kind}\t{}\t{}\t{}\t{:.6}\t",
            a.student_id, a.procedure_id, a.slot_id, a.score
        );
    }
    for h in &plan.holding {
        let _ = writeln!(out, "holding\t{}\t{}\t\t\t{}", h.student_id, h.procedure_id, h.reason);
    }
    for u in &plan.unassigned {
        let _ = writeln!(out, "unassigned\t{}\t{}\t\t{:.6}\t", u.student_id, u.procedure_id, u.score);
    }
    out
}
