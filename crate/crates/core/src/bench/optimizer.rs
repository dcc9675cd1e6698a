use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::dense_forward;
use super::{
    context, elapsed_ms, input_relation, random_dense, rel_err, run_model_plan, uniform, BenchOptions, Record, Suite,
};
use crate::catalog::Catalog;
use crate::engine::{Engine, EngineConfig};
use crate::error::Result;
use crate::ir::lower::LowerOptions;
use crate::ir::optimize::DEFAULT_THRESHOLD;
use crate::ir::{lower_plan, model_plan, optimize, parse_explain, select_representation, NodeKind, OptimizerConfig, Plan};
use crate::linalg::{BlockSize, Representation};
use crate::model::{validate_model, LayerSpec, Manifest, Model};
use crate::relational::{Column, DataType, Field, RowRelation, Schema};
use crate::tensor::ActivationKind;

pub const RANDOM_PLANS: usize = 50;
pub const BATCH: u64 = 1000;
pub const TOLERANCE: f64 = 1e-9;

pub const FRAUD_LOWERING: [&str; 6] = ["Scan", "Project", "MapUDF", "Project", "Filter", "GroupAggregate"];
pub const AMAZON_LOWERING: [&str; 7] = [
    "Scan",
    "Project",
    "Partition",
    "BlockJoin",
    "BlockAggregate",
    "Reassemble",
    "MapUDF",
];

/// Shape-only dense model; `layers` is `(units, activation)` per layer.
pub fn shape_model(name: &str, input: usize, layers: &[(usize, ActivationKind)]) -> Result<Model> {
    let manifest = Manifest {
        name: name.into(),
        input_dim: Some(input),
        input_shape: None,
        layers: layers
            .iter()
            .map(|&(units, activation)| LayerSpec::Dense {
                units,
                activation,
                weights: None,
                bias: None,
            })
            .collect(),
    };
    Model::from_manifest(&manifest, None)
}

fn manifest_json(input: usize, layers: &[(usize, ActivationKind)]) -> String {
    let layers: Vec<_> = layers
        .iter()
        .map(|(units, act)| serde_json::json!({"type": "dense", "units": units, "activation": act.as_str()}))
        .collect();
    serde_json::json!({"name": "m", "input_dim": input, "layers": layers}).to_string()
}

/// Matmul estimate from first principles: inputs, weights and output.
fn matmul_est(batch: u64, k: u64, n: u64) -> u64 {
    (batch * k + k * n + batch * n) * 8
}

/// Representation of every linear-algebra node, in plan order.
fn linalg_reprs(plan: &Plan) -> Vec<(u64, Option<Representation>)> {
    plan.nodes
        .iter()
        .filter(|n| n.kind.is_linalg())
        .map(|n| (n.est_bytes, n.repr))
        .collect()
}

fn selection(plan: &Plan, threshold: u64) -> Vec<(u64, Option<Representation>)> {
    let cfg = OptimizerConfig {
        memory_threshold_bytes: threshold,
        ..OptimizerConfig::default()
    };
    linalg_reprs(&select_representation(plan, &cfg))
}

fn all_udf(plan: &Plan) -> bool {
    linalg_reprs(&select_representation(plan, &OptimizerConfig::default()))
        .iter()
        .all(|(_, r)| *r == Some(Representation::Udf))
}

fn fraud_record() -> Result<Record> {
    let layers = [(256, ActivationKind::Relu), (2, ActivationKind::Softmax)];
    let model = Arc::new(shape_model("fraud", 28, &layers)?);
    let plan = model_plan(&model, BATCH);
    let est = plan.nodes.iter().find(|n| matches!(n.kind, NodeKind::MatMul { .. })).map_or(0, |n| n.est_bytes);

    // The same model behind the grouped count query.
    let engine = Engine::new(EngineConfig {
        buffer_pool_bytes: 64 << 20,
        ..EngineConfig::default()
    })?;
    let mut fields = vec![Field::new("id", DataType::Int), Field::new("day", DataType::String)];
    let mut columns = vec![
        Column::Int((0..BATCH as i64).collect()),
        Column::Str((0..BATCH).map(|i| format!("d{}", i % 7)).collect()),
    ];
    for j in 0..28 {
        fields.push(Field::new(format!("f{j}"), DataType::Float));
        columns.push(Column::Float((0..BATCH).map(|i| ((i as usize * 31 + j) % 97) as f64 / 97.0).collect()));
    }
    engine.create_table("transactions", &RowRelation::new(Schema::new(fields), columns, vec![0])?)?;
    engine.create_model("fraud_dnn", &manifest_json(28, &layers))?;
    let exec = engine
        .plan("SELECT count(*) FROM transactions WHERE fraud_dnn.predict(*) = True GROUP BY day")
        .map_err(|e| e.source)?;
    let names = exec.names();
    let sql_udf = exec
        .steps
        .iter()
        .all(|s| s.repr.is_none() || s.repr == Some(Representation::Udf));

    Ok(Record::new(Suite::Optimizer, "fraud_fc_256")
        .config("threshold_bytes", DEFAULT_THRESHOLD)
        .config("batch", BATCH)
        .value("layer1_est_bytes", est)
        .value("lowering", names.join(","))
        .verdict("est_matches_formula", est == matmul_est(BATCH, 28, 256))
        .verdict("all_udf", all_udf(&plan) && sql_udf)
        .verdict("lowering", names == FRAUD_LOWERING))
}

fn encoder_record() -> Result<Record> {
    let model = Arc::new(shape_model(
        "encoder",
        76,
        &[(3072, ActivationKind::Relu), (768, ActivationKind::Identity)],
    )?);
    let plan = model_plan(&model, BATCH);
    let max_est = linalg_reprs(&plan).iter().map(|(e, _)| *e).max().unwrap_or(0);
    Ok(Record::new(Suite::Optimizer, "encoder_fc")
        .config("threshold_bytes", DEFAULT_THRESHOLD)
        .config("batch", BATCH)
        .value("max_est_bytes", max_est)
        .verdict("all_udf", all_udf(&plan)))
}

fn amazon_record() -> Result<Record> {
    let model = Arc::new(shape_model(
        "amazon14k",
        597_540,
        &[(1024, ActivationKind::Relu), (14_588, ActivationKind::Sigmoid)],
    )?);
    let diag = validate_model(&model, BATCH);
    let plan = optimize(&model_plan(&model, BATCH), &OptimizerConfig::default());
    let unfused = selection(&model_plan(&model, BATCH), DEFAULT_THRESHOLD);
    let layer1 = unfused.first().and_then(|(_, r)| *r);
    let rest_udf = unfused[1..].iter().all(|(_, r)| *r == Some(Representation::Udf));
    let hybrid = layer1 == Some(Representation::Relation) && rest_udf;
    let exec = lower_plan(&plan, LowerOptions::default())?;
    let names = exec.names();
    let weight_bytes = diag.layers[0].weight_bytes;
    let est = unfused[0].0;
    Ok(Record::new(Suite::Optimizer, "amazon_14k_fc")
        .config("threshold_bytes", DEFAULT_THRESHOLD)
        .config("batch", BATCH)
        .value("layer1_weight_bytes", weight_bytes)
        .value("layer1_est_bytes", est)
        .value("layer1_repr", layer1.map_or("-".into(), |r| r.to_string()))
        .value("lowering", names.join(","))
        .verdict("weight_bytes_match_formula", weight_bytes == 597_540 * 1024 * 8)
        .verdict("est_matches_formula", est == matmul_est(BATCH, 597_540, 1024))
        .verdict("layer1_relation", layer1 == Some(Representation::Relation) && weight_bytes > DEFAULT_THRESHOLD)
        .verdict("hybrid", hybrid)
        .verdict("lowering", names == AMAZON_LOWERING))
}

#[derive(Default)]
struct RandomTally {
    monotone: usize,
    rule: usize,
    extremes: usize,
    executed: usize,
    explain: usize,
    mixed: usize,
    worst_err: f64,
}

fn random_plan_case(rng: &mut ChaCha8Rng, workers: usize, tally: &mut RandomTally) -> Result<()> {
    const ACTS: [ActivationKind; 4] = [
        ActivationKind::Relu,
        ActivationKind::Sigmoid,
        ActivationKind::Softmax,
        ActivationKind::Identity,
    ];
    let depth = rng.random_range(1..=4);
    let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=16)).collect();
    let acts: Vec<ActivationKind> = (0..depth).map(|_| ACTS[rng.random_range(0..ACTS.len())]).collect();
    let batch = rng.random_range(1..=40usize);
    let block = BlockSize::new(rng.random_range(1..=8), rng.random_range(1..=8));
    let (model, raw) = random_dense(rng, "m", &dims, &acts)?;
    let model = Arc::new(model);
    let rows: Vec<Vec<f64>> = (0..batch).map(|_| uniform(rng, dims[0])).collect();
    let want: Vec<f64> = rows.iter().flat_map(|r| dense_forward(&raw, r)).collect();

    let base = model_plan(&model, batch as u64);
    let mut ests: Vec<u64> = linalg_reprs(&base).iter().map(|(e, _)| *e).collect();
    ests.sort_unstable();
    let mut thresholds = vec![0, u64::MAX];
    for &e in &ests {
        thresholds.extend([e - 1, e, e + 1]);
    }
    thresholds.sort_unstable();
    thresholds.dedup();

    let picks: Vec<_> = thresholds.iter().map(|&t| (t, selection(&base, t))).collect();
    let is_rel = |r: &Option<Representation>| *r == Some(Representation::Relation);
    let monotone = picks.windows(2).all(|w| {
        w[0].1.iter().zip(&w[1].1).all(|(lo, hi)| !is_rel(&hi.1) || is_rel(&lo.1))
    });
    let rule = picks
        .iter()
        .all(|(t, sel)| sel.iter().all(|(e, r)| is_rel(r) == (e > t)));
    let extremes = picks[0].1.iter().all(|(_, r)| is_rel(r)) && picks.last().unwrap().1.iter().all(|(_, r)| !is_rel(r));
    tally.monotone += usize::from(monotone);
    tally.rule += usize::from(rule);
    tally.extremes += usize::from(extremes);

    let ctx = context(64 << 20, workers)?;
    let catalog = Catalog::new();
    catalog.create_table(ctx.pool(), "input", &input_relation(&rows, dims[0])?)?;
    let middle = ests[ests.len() / 2];
    let mut executed = true;
    let mut explain_ok = true;
    for t in [0, middle, u64::MAX] {
        let cfg = OptimizerConfig {
            memory_threshold_bytes: t,
            block,
            ..OptimizerConfig::default()
        };
        let (plan, got) = run_model_plan(&ctx, &catalog, &model, batch as u64, &cfg)?;
        let flat: Vec<f64> = got.into_iter().flatten().collect();
        let err = rel_err(&flat, &want);
        tally.worst_err = tally.worst_err.max(err);
        executed &= err <= TOLERANCE;
        let exec = lower_plan(&plan, LowerOptions { block, cache: false })?;
        explain_ok &= parse_explain(&exec.explain()).is_ok_and(|l| l == exec.explain_lines());
        explain_ok &= parse_explain(&plan.explain()).is_ok_and(|l| l.len() == plan.nodes.len());
    }
    let mid = selection(&base, middle);
    if mid.iter().any(|(_, r)| is_rel(r)) && mid.iter().any(|(_, r)| !is_rel(r)) {
        tally.mixed += 1;
    }
    tally.executed += usize::from(executed);
    tally.explain += usize::from(explain_ok);
    Ok(())
}

pub fn run(opts: &BenchOptions, seed: u64) -> Result<Vec<Record>> {
    let started = Instant::now();
    let mut records = vec![fraud_record()?, encoder_record()?, amazon_record()?];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = RandomTally::default();
    for _ in 0..RANDOM_PLANS {
        random_plan_case(&mut rng, opts.workers, &mut tally)?;
    }
    let n = RANDOM_PLANS;
    records.push(
        Record::new(Suite::Optimizer, "random_plans")
            .config("plans", n as u64)
            .config("tolerance", TOLERANCE)
            .value("monotone", tally.monotone as u64)
            .value("rule_exact", tally.rule as u64)
            .value("extremes", tally.extremes as u64)
            .value("executed_equal", tally.executed as u64)
            .value("explain_round_trip", tally.explain as u64)
            .value("mixed_at_middle", tally.mixed as u64)
            .value("max_rel_err", tally.worst_err)
            .verdict("monotone", tally.monotone == n)
            .verdict("threshold_rule", tally.rule == n)
            .verdict("extremes", tally.extremes == n)
            .verdict("execution_matches_oracle", tally.executed == n)
            .verdict("explain_round_trip", tally.explain == n)
            .timing_ms("elapsed_ms", elapsed_ms(started)),
    );
    Ok(records)
}
