use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::direct_conv;
use super::{context, digest_strings, elapsed_ms, float_digest, rel_err, uniform, BenchOptions, Record, Suite};
use crate::error::Result;
use crate::linalg::{conv2d_lowered, BlockSize, Representation};
use crate::tensor::DenseTensor;

pub const CASES: usize = 100;
pub const TOLERANCE: f64 = 1e-9;

pub fn run(opts: &BenchOptions, seed: u64) -> Result<Vec<Record>> {
    let ctx = context(64 << 20, opts.workers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut worst = [0.0f64; 2];
    let mut passed = [0usize; 2];
    let mut digests = [Vec::new(), Vec::new()];
    let started = Instant::now();
    for _ in 0..CASES {
        let kh = rng.random_range(1..=3);
        let kw = rng.random_range(1..=3);
        let h = rng.random_range(kh..=16);
        let w = rng.random_range(kw..=16);
        let c = rng.random_range(1..=4);
        let out_c = rng.random_range(1..=8);
        let block = BlockSize::new(rng.random_range(1..=32), rng.random_range(1..=16));
        let image = uniform(&mut rng, h * w * c);
        let kernels = uniform(&mut rng, out_c * kh * kw * c);
        let bias = uniform(&mut rng, out_c);
        let want = direct_conv(&image, (h, w, c), &kernels, (out_c, kh, kw), &bias);

        let image_t = DenseTensor::new(vec![h, w, c], image)?;
        let kernels_t = DenseTensor::new(vec![out_c, kh, kw, c], kernels)?;
        let bias_t = DenseTensor::new(vec![out_c], bias)?;
        for (i, repr) in [Representation::Udf, Representation::Relation].into_iter().enumerate() {
            let got = conv2d_lowered(&ctx, &image_t, &kernels_t, &bias_t, repr, block)?;
            let shape_ok = got.shape() == [h - kh + 1, w - kw + 1, out_c];
            let err = if shape_ok { rel_err(got.data(), &want) } else { f64::INFINITY };
            worst[i] = worst[i].max(err);
            passed[i] += usize::from(err <= TOLERANCE);
            digests[i].push(float_digest(got.data()));
        }
    }
    let elapsed = elapsed_ms(started);
    for (i, name) in ["udf", "relation"].into_iter().enumerate() {
        records.push(
            Record::new(Suite::Conv, name)
                .config("cases", CASES as u64)
                .config("tolerance", TOLERANCE)
                .value("passed", passed[i] as u64)
                .value("max_rel_err", worst[i])
                .value("result_digest", digest_strings(&digests[i]))
                .verdict("oracle_equal", passed[i] == CASES),
        );
    }
    records.push(
        Record::new(Suite::Conv, "summary")
            .value("passed", (passed[0] + passed[1]) as u64)
            .value("checks", 2 * CASES as u64)
            .verdict("all_oracle_equal", passed == [CASES, CASES])
            .timing_ms("elapsed_ms", elapsed),
    );
    Ok(records)
}
