//! Runs every benchmark suite and checks the acceptance criteria, printing
//! one pass/fail line per criterion.
//!
//! The suites run three times: with one worker, with four workers, and once
//! more with one worker, all under the same seed. Timing limits are checked
//! against the first run.

use relinfer::bench::{run_suites, BenchOptions, BenchReport, Suite};
use serde_json::Value;

const SEED: u64 = 42;

struct Criterion {
    id: u32,
    name: &'static str,
    failures: Vec<String>,
}

fn record_failures(report: &BenchReport, suites: &[Suite]) -> Vec<String> {
    suites
        .iter()
        .flat_map(|&s| report.suite(s).flat_map(|r| r.failures()))
        .collect()
}

fn total_ms(report: &BenchReport, suites: &[Suite]) -> f64 {
    suites
        .iter()
        .filter_map(|&s| report.record(s, "suite"))
        .filter_map(|r| r.measured.get("total_ms").and_then(Value::as_f64))
        .sum()
}

fn value<'a>(report: &'a BenchReport, suite: Suite, case: &str, key: &str) -> &'a Value {
    report
        .record(suite, case)
        .and_then(|r| r.values.get(key))
        .unwrap_or(&Value::Null)
}

fn criterion(id: u32, name: &'static str, report: &BenchReport, suites: &[Suite], limit_s: Option<f64>) -> Criterion {
    let mut failures = record_failures(report, suites);
    if suites.iter().any(|&s| report.record(s, "suite").is_none()) {
        failures.push("suite missing from report".into());
    }
    if let Some(limit) = limit_s {
        let secs = total_ms(report, suites) / 1e3;
        if secs >= limit {
            failures.push(format!("runtime {secs:.1}s is not below {limit}s"));
        }
    }
    Criterion { id, name, failures }
}

fn expect(failures: &mut Vec<String>, what: &str, got: &Value, want: Value) {
    if *got != want {
        failures.push(format!("{what}: got {got}, want {want}"));
    }
}

fn main() {
    let opts = |workers| BenchOptions {
        seed: SEED,
        workers,
        work_dir: None,
    };
    let first = run_suites(&Suite::ALL, &opts(1)).expect("suites run with one worker");
    let parallel = run_suites(&Suite::ALL, &opts(4)).expect("suites run with four workers");
    let repeat = run_suites(&Suite::ALL, &opts(1)).expect("suites rerun with one worker");

    let mut criteria = vec![
        criterion(1, "matmul and conv match naive oracles", &first, &[Suite::Matmul, Suite::Conv], Some(120.0)),
        criterion(2, "optimizer picks representations by threshold", &first, &[Suite::Optimizer], None),
        criterion(3, "out-of-core matmul within a 64 MiB pool", &first, &[Suite::Oom], Some(300.0)),
        criterion(4, "linear push-down through a join", &first, &[Suite::Pushdown], Some(300.0)),
        criterion(5, "UDF fusion is bitwise neutral", &first, &[Suite::Fusion], None),
        criterion(6, "inference cache", &first, &[Suite::Cache], Some(300.0)),
        criterion(7, "end-to-end grouped count query", &first, &[Suite::E2e], Some(120.0)),
    ];

    // Exact sizes for the large two-layer model.
    let f = &mut criteria[1].failures;
    let amazon = |k| value(&first, Suite::Optimizer, "amazon_14k_fc", k);
    expect(f, "layer 1 weight bytes", amazon("layer1_weight_bytes"), 4_895_047_680u64.into());
    expect(f, "layer 1 estimate", amazon("layer1_est_bytes"), 9_683_559_680u64.into());
    expect(f, "layer 1 representation", amazon("layer1_repr"), "RELATION".into());
    expect(f, "random plans", value(&first, Suite::Optimizer, "random_plans", "monotone"), 50.into());
    let f = &mut criteria[0].failures;
    expect(f, "matmul cases", value(&first, Suite::Matmul, "summary", "passed"), 200.into());
    expect(f, "conv checks", value(&first, Suite::Conv, "summary", "passed"), 200.into());
    expect(
        &mut criteria[4].failures,
        "bitwise identical instances",
        value(&first, Suite::Fusion, "random_chains", "bitwise_identical"),
        50.into(),
    );

    let mut determinism = Vec::new();
    if first.canonical() != repeat.canonical() {
        determinism.push("two runs with one worker differ".to_string());
    }
    if first.canonical() != parallel.canonical() {
        determinism.push("one and four workers differ".to_string());
    }
    criteria.push(Criterion {
        id: 8,
        name: "reports are deterministic",
        failures: determinism,
    });

    for c in &criteria {
        let verdict = if c.failures.is_empty() { "PASS" } else { "FAIL" };
        println!("criterion {}: {verdict} {}", c.id, c.name);
        for f in &c.failures {
            println!("    {f}");
        }
    }
    println!("canonical report digest {}", first.canonical_digest());
    let failed: Vec<u32> = criteria.iter().filter(|c| !c.failures.is_empty()).map(|c| c.id).collect();
    if !failed.is_empty() {
        eprintln!("criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
