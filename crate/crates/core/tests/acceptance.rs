//! End-to-end acceptance gate: runs the selftest suite twice under different
//! worker counts and prints one PASS/FAIL line per criterion. Runs without
//! the libtest harness so the lines are shown even when everything passes.

use std::fs;
use std::path::Path;

use integrator_lab::experiments::{run_suite, selftest_configs, ResultRow, RunReport};

const SEED: u64 = 0;

struct Criterion {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn suite(threads: usize, out: &Path) -> (Vec<RunReport>, f64) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let start = std::time::Instant::now();
    let reports = pool.install(|| run_suite(&selftest_configs(SEED), out)).unwrap();
    (reports, start.elapsed().as_secs_f64())
}

fn report<'a>(reports: &'a [RunReport], scenario: &str) -> &'a RunReport {
    reports.iter().find(|r| r.scenario == scenario).unwrap()
}

fn param(row: &ResultRow, key: &str) -> Option<String> {
    row.parameters
        .split(';')
        .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
        .map(str::to_string)
}

fn param_usize(row: &ResultRow, key: &str) -> Option<usize> {
    param(row, key).and_then(|v| v.parse().ok())
}

/// Selected rows, requiring at least `min_rows` of them and that all pass.
fn check_rows<'a>(
    rep: &'a RunReport,
    min_rows: usize,
    pick: impl Fn(&ResultRow) -> bool,
) -> (bool, Vec<&'a ResultRow>) {
    let rows: Vec<&ResultRow> = rep.rows.iter().filter(|r| pick(r)).collect();
    let ok = rows.len() >= min_rows && rows.iter().all(|r| r.pass);
    (ok, rows)
}

fn summary(rows: &[&ResultRow]) -> String {
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{}[{}] est={} oracle={:?}", r.anchor, r.parameters, r.estimate, r.oracle))
        .collect();
    if failed.is_empty() {
        format!("{} rows pass", rows.len())
    } else {
        format!("{} of {} rows fail: {}", failed.len(), rows.len(), failed.join(", "))
    }
}

fn within_budget(rep: &RunReport, limit: f64) -> (bool, String) {
    (rep.wall_time < limit, format!("runtime {:.1}s (limit {limit}s)", rep.wall_time))
}

fn criterion(id: u32, name: &'static str, parts: &[(bool, String)]) -> Criterion {
    Criterion {
        id,
        name,
        pass: parts.iter().all(|p| p.0),
        detail: parts.iter().map(|p| p.1.as_str()).collect::<Vec<_>>().join("; "),
    }
}

fn gram_identities(reports: &[RunReport]) -> Criterion {
    let rep = report(reports, "gram-fuzz");
    let anchors = ["operator-gram-bound", "projection-identity", "difference-identity", "perturbation-expansion"];
    let (ok, rows) = check_rows(rep, 4, |r| {
        anchors.contains(&r.anchor.as_str()) && param_usize(r, "instances").is_some_and(|n| n >= 10_000)
    });
    criterion(1, "Gram identities over 10^4 fuzz instances", &[(ok, summary(&rows)), within_budget(rep, 60.0)])
}

fn closed_form_chain(reports: &[RunReport]) -> Criterion {
    let rep = report(reports, "quadrature");
    let full = |r: &ResultRow| param_usize(r, "n_samples") == Some(1_000_000);
    let order = |r: &ResultRow| param_usize(r, "p").is_some_and(|p| (1..=5).contains(&p));
    let (wiener, w_rows) = check_rows(rep, 5, |r| {
        r.anchor == "moment-formula-chain" && param(r, "operator").as_deref() == Some("identity") && order(r) && full(r)
    });
    let (bridge, b_rows) = check_rows(rep, 5, |r| {
        r.anchor == "bridge-moment-gamma" && param(r, "operator").as_deref() == Some("bridge") && order(r) && full(r)
    });
    let (weights, v_rows) = check_rows(rep, 5, |r| {
        r.anchor == "dirichlet-simplex" && param(r, "quantity").as_deref() == Some("weight-variance")
    });
    criterion(
        2,
        "quadrature reproduces closed-form moments",
        &[
            (wiener, format!("wiener: {}", summary(&w_rows))),
            (bridge, format!("bridge: {}", summary(&b_rows))),
            (weights, format!("constant weights: {}", summary(&v_rows))),
            within_budget(rep, 120.0),
        ],
    )
}

fn path_level(reports: &[RunReport]) -> Criterion {
    let rep = report(reports, "moments");
    let mut parts = Vec::new();
    for op in ["identity", "bridge"] {
        let (ok, rows) = check_rows(rep, 3, |r| {
            r.anchor == "mollified-local-time"
                && param(r, "operator").as_deref() == Some(op)
                && param_usize(r, "p").is_some_and(|p| p <= 3)
                && param_usize(r, "reps").is_some_and(|n| n >= 10_000)
        });
        parts.push((ok, format!("{op}: {}", summary(&rows))));
    }
    parts.push(within_budget(rep, 180.0));
    criterion(3, "path-level moments match quadrature", &parts)
}

fn moment_bound(reports: &[RunReport]) -> Criterion {
    let rep = report(reports, "bound-2.1");
    let case = |r: &ResultRow, c: &str| param(r, "case").as_deref() == Some(c);
    let (ineq, i_rows) = check_rows(rep, 9, |r| r.anchor == "moment-bound" && case(r, "inequality"));
    let (eq, e_rows) = check_rows(rep, 3, |r| {
        r.anchor == "moment-bound" && case(r, "equality") && param(r, "operator").as_deref() == Some("bridge")
    });
    let jump_counts: Vec<usize> = rep
        .rows
        .iter()
        .filter(|r| r.anchor == "kernel-step-subspace")
        .filter_map(|r| param(r, "jumps"))
        .map(|j| j.trim_matches(['[', ']']).split_whitespace().count())
        .collect();
    let cases = jump_counts.contains(&0) && jump_counts.contains(&1);
    criterion(
        4,
        "moment bound with step-function kernels",
        &[
            (ineq, format!("inequality: {}", summary(&i_rows))),
            (eq, format!("bridge equality: {}", summary(&e_rows))),
            (cases, format!("jump counts {jump_counts:?}")),
            within_budget(rep, 180.0),
        ],
    )
}

fn continuity(reports: &[RunReport]) -> Criterion {
    let rep = report(reports, "continuity");
    let quantity = |r: &ResultRow, q: &str| param(r, "quantity").as_deref() == Some(q);
    let (setup, s_rows) = check_rows(rep, 2, |r| quantity(r, "perturbation-norm") || quantity(r, "sup-inverse-norm"));
    let (drops, d_rows) = check_rows(rep, 1, |r| quantity(r, "min-drop-over-2se") && param(r, "m").as_deref() == Some("2"));
    let (ratio, r_rows) = check_rows(rep, 1, |r| quantity(r, "last-over-first") && param(r, "m").as_deref() == Some("2"));
    let ns: Vec<usize> = rep
        .rows
        .iter()
        .filter(|r| quantity(r, "distance") && param(r, "m").as_deref() == Some("2"))
        .filter_map(|r| param_usize(r, "n"))
        .collect();
    criterion(
        5,
        "coupled local-time distance decreases along I + B/n",
        &[
            (setup, format!("operator setup: {}", summary(&s_rows))),
            (ns == [1, 2, 4, 8, 16], format!("sequence {ns:?}")),
            (drops, format!("strict drops beyond 2 SE: {}", summary(&d_rows))),
            (ratio, format!("n=16 below 25% of n=1: {}", summary(&r_rows))),
            within_budget(rep, 180.0),
        ],
    )
}

fn level_integrated(reports: &[RunReport]) -> Criterion {
    let rep = report(reports, "u-moments");
    let mc = |r: &ResultRow, q: usize| {
        r.anchor == "level-integrated-moments" && param_usize(r, "q") == Some(q) && param(r, "quantity").is_none()
    };
    let (first, f_rows) = check_rows(rep, 1, |r| mc(r, 1) && r.oracle.is_some_and(|o| (o - 1.0).abs() < 1e-9));
    let (second, s_rows) = check_rows(rep, 1, |r| mc(r, 2));
    criterion(
        6,
        "level-integrated moments",
        &[
            (first, format!("q=1: {}", summary(&f_rows))),
            (second, format!("q=2: {}", summary(&s_rows))),
            within_budget(rep, 120.0),
        ],
    )
}

fn csv_bodies(reports: &[RunReport]) -> Vec<(String, Vec<u8>)> {
    reports
        .iter()
        .map(|r| (r.scenario.clone(), fs::read(&r.csv_path).unwrap()))
        .collect()
}

fn main() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (first, first_time) = suite(1, dir_a.path());
    let (second, _) = suite(4, dir_b.path());

    let mut results = vec![
        gram_identities(&first),
        closed_form_chain(&first),
        path_level(&first),
        moment_bound(&first),
        continuity(&first),
        level_integrated(&first),
    ];

    let (a, b) = (csv_bodies(&first), csv_bodies(&second));
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    results.push(criterion(
        7,
        "selftest CSV bodies identical across worker counts",
        &[(
            a.len() == b.len() && differing.is_empty(),
            format!("{} files compared with 1 and 4 workers, differing: {differing:?}", a.len()),
        )],
    ));
    results.push(criterion(
        8,
        "full selftest wall time",
        &[(first_time < 900.0, format!("{first_time:.1}s (limit 900s)"))],
    ));

    for c in &results {
        println!("{} criterion {}: {} ({})", if c.pass { "PASS" } else { "FAIL" }, c.id, c.name, c.detail);
    }
    let failed: Vec<u32> = results.iter().filter(|c| !c.pass).map(|c| c.id).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
