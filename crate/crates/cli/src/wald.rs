//! The reference table of ladder overshoots for five homogeneous walks.
//!
//! Route A is `E[T_1] · E[X_1]` from the branching series, route B is
//! `f_0(1) + 2 f_0(2) = 1 - h` from the root of the characteristic cubic.

use ladderwalk_core::{expected_t1, homogeneous_root, Environment, SiteLaw};
use serde_json::Value;

use crate::output::{num, Table};

pub struct Row {
    pub p1: f64,
    pub p2: f64,
    pub q1: f64,
    pub q2: f64,
    /// Reference values of route A and route B.
    pub reference: (f64, f64),
    pub tolerance: f64,
}

pub const ROWS: [Row; 5] = [
    Row {
        p1: 0.21,
        p2: 0.35,
        q1: 0.36,
        q2: 0.08,
        reference: (1.467727692, 1.467727692),
        tolerance: 1e-6,
    },
    Row {
        p1: 0.30,
        p2: 0.21,
        q1: 0.30,
        q2: 0.19,
        reference: (1.323718710, 1.323718710),
        tolerance: 1e-6,
    },
    Row {
        p1: 0.1789,
        p2: 0.3211,
        q1: 0.1801,
        q2: 0.3199,
        reference: (1.481684406, 1.481684406),
        tolerance: 1e-6,
    },
    Row {
        p1: 0.4998,
        p2: 0.0002,
        q1: 0.4999,
        q2: 0.0001,
        reference: (1.000399840, 1.000399840),
        tolerance: 1e-6,
    },
    // Drift 1e-4 with both jump sizes present: the series needs ~3e5 levels.
    Row {
        p1: 0.3627,
        p2: 0.1373,
        q1: 0.3628,
        q2: 0.1372,
        reference: (1.226498171, 1.226490265),
        tolerance: 1e-4,
    },
];

/// Series tolerance and level cap for route A.
pub const SERIES_TOL: f64 = 1e-15;
pub const MAX_LEVELS: usize = 100_000_000;
/// Rows summing more levels than this are flagged as slowly converging.
const SLOW_LEVELS: usize = 100_000;

pub struct Outcome {
    pub table: Table,
    pub all_ok: bool,
    pub diagnostics: Vec<String>,
}

pub fn run() -> Outcome {
    let mut table = Table::new(&[
        "row",
        "p1",
        "p2",
        "q1",
        "q2",
        "drift",
        "route_a",
        "route_b",
        "delta",
        "reference_a",
        "reference_b",
        "tolerance",
        "levels",
        "slow_convergence",
        "ok",
    ]);
    let mut all_ok = true;
    let mut diagnostics = Vec::new();
    for (n, row) in ROWS.iter().enumerate() {
        let n = n + 1;
        let law = SiteLaw::new(row.q2, row.q1, row.p1, row.p2).expect("table law");
        let drift = law.drift();
        let a = expected_t1(&Environment::homogeneous(law), SERIES_TOL, MAX_LEVELS);
        let b = homogeneous_root(&law);
        let (route_a, levels, converged) = match &a {
            Ok(s) => (s.value * drift, s.levels, s.converged),
            Err(e) => {
                diagnostics.push(format!("row {n}: route A failed: {e}"));
                (f64::NAN, 0, false)
            }
        };
        let route_b = match &b {
            Ok(r) => r.mean_overshoot(),
            Err(e) => {
                diagnostics.push(format!("row {n}: route B failed: {e}"));
                f64::NAN
            }
        };
        let delta = route_a - route_b;
        let ok = converged
            && delta.abs() <= row.tolerance
            && (route_a - row.reference.0).abs() <= row.tolerance
            && (route_b - row.reference.1).abs() <= row.tolerance;
        if !ok {
            diagnostics.push(format!(
                "row {n}: route A {route_a} route B {route_b} (reference {:?}, tolerance {}, converged {converged})",
                row.reference, row.tolerance
            ));
        }
        all_ok &= ok;
        table.push(vec![
            Value::from(n),
            num(row.p1),
            num(row.p2),
            num(row.q1),
            num(row.q2),
            num(drift),
            num(route_a),
            num(route_b),
            num(delta),
            num(row.reference.0),
            num(row.reference.1),
            num(row.tolerance),
            Value::from(levels),
            Value::from(levels > SLOW_LEVELS),
            Value::from(ok),
        ]);
    }
    Outcome {
        table,
        all_ok,
        diagnostics,
    }
}
