use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{context, elapsed_ms, input_relation, random_dense, run_model_plan, uniform, BenchOptions, FloatDigest, Record, Suite};
use crate::catalog::Catalog;
use crate::error::Result;
use crate::ir::{model_plan, NodeKind, OptimizerConfig};
use crate::linalg::{BlockSize, Representation};
use crate::tensor::ActivationKind;

pub const INSTANCES: usize = 50;

pub fn run(opts: &BenchOptions, seed: u64) -> Result<Vec<Record>> {
    const ACTS: [ActivationKind; 4] = [
        ActivationKind::Relu,
        ActivationKind::Sigmoid,
        ActivationKind::Softmax,
        ActivationKind::Identity,
    ];
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut identical, mut mixed, mut fused_chains) = (0usize, 0usize, 0usize);
    let mut digest = FloatDigest::default();
    for _ in 0..INSTANCES {
        let depth = rng.random_range(2..=5);
        let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=16)).collect();
        let acts: Vec<ActivationKind> = (0..depth).map(|_| ACTS[rng.random_range(0..ACTS.len())]).collect();
        let batch = rng.random_range(1..=40usize);
        let block = BlockSize::new(rng.random_range(1..=8), rng.random_range(1..=8));
        let (model, _) = random_dense(&mut rng, "m", &dims, &acts)?;
        let model = Arc::new(model);
        let rows: Vec<Vec<f64>> = (0..batch).map(|_| uniform(&mut rng, dims[0])).collect();

        // A threshold at one operator's estimate splits the chain.
        let ests: Vec<u64> = model_plan(&model, batch as u64)
            .nodes
            .iter()
            .filter(|n| n.kind.is_linalg())
            .map(|n| n.est_bytes)
            .collect();
        let threshold = ests[rng.random_range(0..ests.len())];

        let ctx = context(16 << 20, opts.workers)?;
        let catalog = Catalog::new();
        catalog.create_table(ctx.pool(), "input", &input_relation(&rows, dims[0])?)?;
        let cfg = |fusion_enabled| OptimizerConfig {
            memory_threshold_bytes: threshold,
            block,
            fusion_enabled,
            ..OptimizerConfig::default()
        };
        let (fused_plan, fused) = run_model_plan(&ctx, &catalog, &model, batch as u64, &cfg(true))?;
        let (plain_plan, plain) = run_model_plan(&ctx, &catalog, &model, batch as u64, &cfg(false))?;

        let bits = |v: &[Vec<f64>]| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        identical += usize::from(bits(&fused) == bits(&plain));
        let reprs: Vec<_> = plain_plan.nodes.iter().filter(|n| n.kind.is_linalg()).map(|n| n.repr).collect();
        if reprs.contains(&Some(Representation::Relation)) && reprs.contains(&Some(Representation::Udf)) {
            mixed += 1;
        }
        fused_chains += fused_plan
            .nodes
            .iter()
            .filter(|n| matches!(&n.kind, NodeKind::MapUdf { ops } if ops.len() > 1))
            .count();
        for r in &fused {
            digest.update(r);
        }
    }
    Ok(vec![Record::new(Suite::Fusion, "random_chains")
        .config("instances", INSTANCES as u64)
        .value("bitwise_identical", identical as u64)
        .value("mixed_instances", mixed as u64)
        .value("fused_chains", fused_chains as u64)
        .value("result_digest", digest.finish())
        .verdict("bitwise_identical", identical == INSTANCES)
        .verdict("covers_mixed_chains", mixed > 0)
        .verdict("fusion_applied", fused_chains > 0)
        .timing_ms("elapsed_ms", elapsed_ms(started))])
}
