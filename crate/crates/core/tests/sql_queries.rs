use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relinfer::cache::CacheMode;
use relinfer::ir::lower::ExecOp;
use relinfer::ir::{parse_explain, NodeKind};
use relinfer::linalg::BlockSize;
use relinfer::model::Model;
use relinfer::relational::Value;
use relinfer::sql::IngestOptions;
use relinfer::tensor::{ActivationKind, DenseTensor};
use relinfer::{Engine, EngineConfig, Phase};

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseTensor {
    DenseTensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn model(seed: u64, input: usize, hidden: usize) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::dense(
        "m",
        vec![
            (random_matrix(&mut rng, hidden, input), random_matrix(&mut rng, 1, hidden).reshape(vec![hidden]).unwrap(), ActivationKind::Relu),
            (random_matrix(&mut rng, 2, hidden), random_matrix(&mut rng, 1, 2).reshape(vec![2]).unwrap(), ActivationKind::Softmax),
        ],
    )
    .unwrap()
}

/// Rows of `id, day, f0..f{width}` with uniform features.
fn write_csv(path: &Path, rows: usize, width: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::from("id,day");
    for j in 0..width {
        text.push_str(&format!(",f{j}"));
    }
    text.push('\n');
    let mut out = Vec::new();
    for i in 0..rows {
        let day = format!("d{}", rng.random_range(0..5));
        let f: Vec<f64> = (0..width).map(|_| rng.random_range(-2.0..2.0)).collect();
        text.push_str(&format!("{i},{day}"));
        for v in &f {
            text.push_str(&format!(",{v:?}"));
        }
        text.push('\n');
        out.push((day, f));
    }
    fs::write(path, text).unwrap();
    out
}

fn scalar_predict(m: &Model, x: &[f64]) -> i64 {
    let mut h = x.to_vec();
    for layer in m.layers() {
        let relinfer::model::Layer::Dense(d) = layer else { unreachable!() };
        let w = d.weights_t().unwrap();
        let b = d.bias().unwrap();
        let mut y = vec![0.0; d.units];
        for (u, out) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for (k, xk) in h.iter().enumerate() {
                s += xk * w.get2(k, u);
            }
            *out = s + b.data()[u];
        }
        if d.activation == ActivationKind::Relu {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = y;
    }
    i64::from(h[1] > h[0])
}

fn engine(cfg: EngineConfig) -> Engine {
    Engine::new(EngineConfig {
        buffer_pool_bytes: 64 << 20,
        block: BlockSize::new(64, 4),
        ..cfg
    })
    .unwrap()
}

fn counts(result: &relinfer::relational::RowRelation) -> BTreeMap<String, i64> {
    (0..result.len())
        .map(|i| match (result.value(i, 0), result.value(i, 1)) {
            (Value::Str(d), Value::Int(c)) => (d, c),
            other => panic!("unexpected row {other:?}"),
        })
        .collect()
}

const COUNT_QUERY: &str = "SELECT count(*) FROM t WHERE m.predict(*) = True GROUP BY day";

#[test]
fn grouped_count_matches_scalar_pipeline_in_every_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    let rows = write_csv(&csv, 600, 6, 1);
    let m = model(2, 6, 12);
    let mut expected = BTreeMap::new();
    for (day, f) in &rows {
        if scalar_predict(&m, f) == 1 {
            *expected.entry(day.clone()).or_insert(0) += 1;
        }
    }
    let opts = IngestOptions {
        keys: vec!["id".into()],
        ..IngestOptions::default()
    };
    let configs = [
        EngineConfig {
            memory_threshold_bytes: u64::MAX,
            ..EngineConfig::default()
        },
        EngineConfig {
            memory_threshold_bytes: 0,
            ..EngineConfig::default()
        },
        EngineConfig {
            memory_threshold_bytes: 20_000,
            ..EngineConfig::default()
        },
        EngineConfig {
            memory_threshold_bytes: 20_000,
            cache: relinfer::cache::CacheConfig {
                mode: CacheMode::Exact,
                ..Default::default()
            },
            ..EngineConfig::default()
        },
    ];
    for cfg in configs {
        let e = engine(cfg);
        e.ingest_csv("t", &csv, &opts).unwrap();
        e.register_model(m.clone()).unwrap();
        let r = e.run_query(COUNT_QUERY).unwrap();
        assert_eq!(counts(&r.rows), expected, "{}", r.report.to_lines());
        assert_eq!(r.report.inference_rows, 600);
        // A second run is answered from the cache when one is configured.
        let again = e.run_query(COUNT_QUERY).unwrap();
        assert_eq!(counts(&again.rows), expected);
        if e.config().cache.mode == CacheMode::Exact {
            assert_eq!(again.report.inference_rows, 0);
            assert_eq!(again.report.cache.unwrap().hits, 600);
        }
    }
}

#[test]
fn hybrid_plan_mixes_representations() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    write_csv(&csv, 600, 6, 1);
    let e = engine(EngineConfig {
        memory_threshold_bytes: 50_000,
        ..EngineConfig::default()
    });
    let opts = IngestOptions {
        keys: vec!["id".into()],
        ..IngestOptions::default()
    };
    e.ingest_csv("t", &csv, &opts).unwrap();
    e.register_model(model(2, 6, 12)).unwrap();
    let explain = e.explain(COUNT_QUERY).unwrap();
    let lines = parse_explain(&explain).unwrap();
    let reprs: Vec<&str> = lines.iter().map(|l| l.repr.as_str()).collect();
    assert!(reprs.contains(&"RELATION"), "{explain}");
    assert!(reprs.contains(&"UDF"), "{explain}");
    assert_eq!(lines.len(), explain.lines().count());
}

#[test]
fn empty_table_runs_no_inference() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    fs::write(&csv, "id,day,f0,f1,f2,f3,f4,f5\n").unwrap();
    let e = engine(EngineConfig::default());
    let opts = IngestOptions {
        schema: IngestOptions::parse_schema("day:string,f0:float,f1:float,f2:float,f3:float,f4:float,f5:float").unwrap(),
        keys: vec!["id".into()],
    };
    e.ingest_csv("t", &csv, &opts).unwrap();
    e.register_model(model(2, 6, 12)).unwrap();
    let r = e.run_query(COUNT_QUERY).unwrap();
    assert_eq!(r.rows.len(), 0);
    assert_eq!(r.report.inference_rows, 0);
}

#[test]
fn predict_over_joined_tables() {
    let dir = tempfile::tempdir().unwrap();
    let tx = dir.path().join("tx.csv");
    let cust = dir.path().join("c.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut t = String::from("tid,customer_id,a0,a1,a2\n");
    let mut c = String::from("id,b0,b1,b2\n");
    let mut customers = Vec::new();
    for i in 0..20 {
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        c.push_str(&format!("{i},{:?},{:?},{:?}\n", b[0], b[1], b[2]));
        customers.push(b);
    }
    let mut joined = Vec::new();
    for i in 0..100 {
        let cid = rng.random_range(0..20);
        let a: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        t.push_str(&format!("{i},{cid},{:?},{:?},{:?}\n", a[0], a[1], a[2]));
        let mut f = a.clone();
        f.extend(&customers[cid]);
        joined.push((i, f));
    }
    fs::write(&tx, t).unwrap();
    fs::write(&cust, c).unwrap();
    // Four hidden units against six features, so push-down applies.
    let m = model(3, 6, 4);
    for pushdown in [false, true] {
        let e = engine(EngineConfig {
            pushdown,
            ..EngineConfig::default()
        });
        e.ingest_csv("transactions", &tx, &IngestOptions { keys: vec!["tid".into()], ..Default::default() }).unwrap();
        e.ingest_csv("customers", &cust, &IngestOptions { keys: vec!["id".into()], ..Default::default() }).unwrap();
        e.register_model(m.clone()).unwrap();
        // Key columns travel with the prediction.
        let sql = "SELECT m.predict(*) FROM transactions, customers \
                   WHERE transactions.customer_id = customers.id";
        let plan = e.plan(sql).unwrap();
        let split = plan
            .steps
            .iter()
            .filter(|s| match &s.op {
                ExecOp::FusedUdf { ops } => matches!(ops[0], NodeKind::MatMul { cols: Some(_), .. }),
                _ => false,
            })
            .count();
        assert_eq!(split, if pushdown { 2 } else { 0 });
        let r = e.run_query(sql).unwrap();
        assert_eq!(r.rows.len(), 100, "{}", r.report.to_lines());
        let tid = r.rows.schema().index_of("transactions.tid").unwrap();
        let pred = r.rows.schema().index_of("prediction").unwrap();
        for i in 0..r.rows.len() {
            let Value::Int(id) = r.rows.value(i, tid) else { panic!() };
            let (_, f) = &joined[id as usize];
            assert_eq!(r.rows.value(i, pred), Value::Int(scalar_predict(&m, f)), "pushdown={pushdown}");
        }
    }
}

#[test]
fn phases_are_reported() {
    let e = engine(EngineConfig::default());
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    write_csv(&csv, 10, 3, 1);
    e.ingest_csv("t", &csv, &IngestOptions::default()).unwrap();
    e.register_model(model(2, 6, 12)).unwrap();
    assert_eq!(e.run_query("SELECT count(* FROM t").unwrap_err().phase, Phase::Parse);
    assert_eq!(e.run_query("SELECT nope FROM t").unwrap_err().phase, Phase::Bind);
    // Three features against a six-input model.
    let err = e.run_query(COUNT_QUERY).unwrap_err();
    assert!(matches!(err.phase, Phase::Bind | Phase::Plan), "{err}");
    assert_eq!(e.catalog().table_names(), ["t"]);
}
