use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::naive_matmul;
use super::{context, digest_strings, elapsed_ms, float_digest, rel_err, uniform, BenchOptions, Record, Suite};
use crate::error::Result;
use crate::linalg::matmul_as_join_agg;
use crate::relational::BlockRelation;
use crate::tensor::DenseTensor;

pub const CASES_PER_CLASS: usize = 50;
pub const TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy)]
enum Class {
    /// Every element its own block; dimensions stay small because the join
    /// produces one pair per scalar product.
    Unit,
    Square(usize),
    Ragged,
}

impl Class {
    fn name(self) -> String {
        match self {
            Class::Unit => "block_1".into(),
            Class::Square(b) => format!("block_{b}"),
            Class::Ragged => "mixed_ragged".into(),
        }
    }

    /// `(m, k, n, block_rows_a, block_inner, block_cols_b)`.
    fn draw(self, rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize, usize) {
        let dim = |rng: &mut ChaCha8Rng, max| rng.random_range(1..=max);
        match self {
            Class::Unit => (dim(rng, 24), dim(rng, 24), dim(rng, 24), 1, 1, 1),
            Class::Square(b) => (dim(rng, 300), dim(rng, 300), dim(rng, 300), b, b, b),
            Class::Ragged => (
                dim(rng, 300),
                dim(rng, 300),
                dim(rng, 300),
                dim(rng, 64),
                dim(rng, 64),
                dim(rng, 64),
            ),
        }
    }
}

pub fn run(opts: &BenchOptions, seed: u64) -> Result<Vec<Record>> {
    let ctx = context(256 << 20, opts.workers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut passed_total = 0;
    for class in [Class::Unit, Class::Square(7), Class::Square(64), Class::Ragged] {
        let started = Instant::now();
        let mut worst = 0.0f64;
        let mut passed = 0;
        let mut digests = Vec::new();
        for _ in 0..CASES_PER_CLASS {
            let (m, k, n, br, bk, bc) = class.draw(&mut rng);
            let a = uniform(&mut rng, m * k);
            let b = uniform(&mut rng, k * n);
            let ab = BlockRelation::from_dense(ctx.pool(), &DenseTensor::matrix(m, k, a.clone())?, br, bk)?;
            let bb = BlockRelation::from_dense(ctx.pool(), &DenseTensor::matrix(k, n, b.clone())?, bk, bc)?;
            let got = matmul_as_join_agg(&ctx, &ab, &bb)?.to_dense()?;
            let err = rel_err(got.data(), &naive_matmul(&a, &b, m, k, n));
            worst = worst.max(err);
            passed += usize::from(err <= TOLERANCE);
            digests.push(float_digest(got.data()));
        }
        passed_total += passed;
        records.push(
            Record::new(Suite::Matmul, class.name())
                .config("cases", CASES_PER_CLASS as u64)
                .config("tolerance", TOLERANCE)
                .value("passed", passed as u64)
                .value("max_rel_err", worst)
                .value("result_digest", digest_strings(&digests))
                .verdict("oracle_equal", passed == CASES_PER_CLASS)
                .timing_ms("elapsed_ms", elapsed_ms(started)),
        );
    }
    let total = 4 * CASES_PER_CLASS;
    records.push(
        Record::new(Suite::Matmul, "summary")
            .value("passed", passed_total as u64)
            .value("cases", total as u64)
            .verdict("all_oracle_equal", passed_total == total),
    );
    Ok(records)
}
