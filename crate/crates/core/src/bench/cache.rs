use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};

use super::oracle::label;
use super::{context, elapsed_ms, random_dense, uniform, BenchOptions, FloatDigest, Record, Suite};
use crate::cache::{estimate_cache_error, CacheConfig, CacheMode, InferenceCache};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::relational::ExecContext;
use crate::tensor::ActivationKind;

pub const DIM: usize = 32;
pub const CENTERS: usize = 200;
pub const MEMBERS: usize = 10;
pub const NOISE_STD: f64 = 0.03;
pub const ZIPF_EXPONENT: f64 = 1.1;
pub const QUERIES: usize = 20_000;
pub const WARM_QUERIES: usize = 2_000;
pub const TAUS: [f64; 4] = [0.0, 0.1, 0.5, 1.0];
pub const SERVING_TAU: f64 = 0.5;

pub const TRIALS: usize = 100;
pub const TRIAL_ENTRIES: usize = 200;
pub const FLIPPED_FRACTION: f64 = 0.1;
pub const CACHED_DRAW_PROB: f64 = 0.5;
pub const TRIAL_SAMPLES: usize = 1000;
/// Probability a sample hits a flipped entry.
pub const PLANTED_RATE: f64 = CACHED_DRAW_PROB * FLIPPED_FRACTION;
pub const MIN_COVERED: usize = 90;

fn cache(mode: CacheMode) -> Result<InferenceCache> {
    InferenceCache::new(CacheConfig {
        mode,
        ..CacheConfig::default()
    })
}

struct Served {
    answers: Vec<Vec<f64>>,
    hit_rate: f64,
    ms: f64,
}

/// Answers every query in order, consulting the cache first and storing
/// fresh predictions.
fn serve(model: &Model, ctx: &ExecContext, queries: &[&[f64]], mode: CacheMode) -> Result<Served> {
    let c = match mode {
        CacheMode::Off => None,
        m => Some(cache(m)?),
    };
    let started = Instant::now();
    let mut answers = Vec::with_capacity(queries.len());
    for q in queries {
        let hit = match &c {
            Some(c) => c.lookup(q)?,
            None => None,
        };
        let y = match hit {
            Some(y) => y,
            None => {
                let y = model.forward_row(ctx, q)?;
                if let Some(c) = &c {
                    c.put(q, y.clone())?;
                }
                y
            }
        };
        answers.push(y);
    }
    let ms = elapsed_ms(started);
    Ok(Served {
        answers,
        hit_rate: c.map_or(0.0, |c| c.stats().hit_rate),
        ms,
    })
}

fn label_mismatches(a: &[Vec<f64>], b: &[Vec<f64>]) -> usize {
    a.iter().zip(b).filter(|(x, y)| label(x) != label(y)).count()
}

/// Clustered universe: `CENTERS` uniform centres with `MEMBERS` noisy copies
/// each, in shuffled order so Zipf ranks do not follow cluster layout.
fn universe(rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let noise = Normal::new(0.0, NOISE_STD).map_err(|e| Error::invalid(e.to_string()))?;
    let mut items = Vec::with_capacity(CENTERS * MEMBERS);
    for _ in 0..CENTERS {
        let center = uniform(rng, DIM);
        for _ in 0..MEMBERS {
            items.push(center.iter().map(|c| c + noise.sample(rng)).collect());
        }
    }
    items.shuffle(rng);
    Ok(items)
}

fn ci_trials(model: &Model, ctx: &ExecContext, seed: u64) -> Result<(usize, f64)> {
    let mut covered = 0;
    let mut rate_sum = 0.0;
    for t in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let c = cache(CacheMode::Exact)?;
        let flipped = (TRIAL_ENTRIES as f64 * FLIPPED_FRACTION).round() as usize;
        let mut entries = Vec::with_capacity(TRIAL_ENTRIES);
        for i in 0..TRIAL_ENTRIES {
            let x = uniform(&mut rng, DIM);
            let mut y = model.forward_row(ctx, &x)?;
            if i < flipped {
                y.reverse();
            }
            c.put(&x, y)?;
            entries.push(x);
        }
        let sampler = |r: &mut ChaCha8Rng| {
            if r.random_bool(CACHED_DRAW_PROB) {
                entries[r.random_range(0..entries.len())].clone()
            } else {
                uniform(r, DIM)
            }
        };
        let predictor = |x: &[f64]| model.forward_row(ctx, x);
        let est = estimate_cache_error(&predictor, sampler, &c, TRIAL_SAMPLES, rng.random())?;
        covered += usize::from(est.contains(PLANTED_RATE));
        rate_sum += est.error_rate;
    }
    Ok((covered, rate_sum / TRIALS as f64))
}

pub fn run(opts: &BenchOptions, seed: u64) -> Result<Vec<Record>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = context(16 << 20, opts.workers)?;
    let (model, _) = random_dense(
        &mut rng,
        "m",
        &[DIM, 512, 512, 2],
        &[ActivationKind::Relu, ActivationKind::Relu, ActivationKind::Softmax],
    )?;
    let items = universe(&mut rng)?;
    let zipf = Zipf::new(items.len() as f64, ZIPF_EXPONENT).map_err(|e| Error::invalid(e.to_string()))?;
    let queries: Vec<&[f64]> = (0..QUERIES)
        .map(|_| items[zipf.sample(&mut rng) as usize - 1].as_slice())
        .collect();
    let mut records = Vec::new();

    // Serving: every query answered, cache filled on misses.
    let off = serve(&model, &ctx, &queries, CacheMode::Off)?;
    let exact = serve(&model, &ctx, &queries, CacheMode::Exact)?;
    let approx = serve(&model, &ctx, &queries, CacheMode::Approx { tau: SERVING_TAU })?;
    let bits = |v: &[Vec<f64>]| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    let exact_identical = bits(&exact.answers) == bits(&off.answers);
    let mut digest = FloatDigest::default();
    off.answers.iter().for_each(|a| digest.update(a));
    let speedup = off.ms / approx.ms;
    records.push(
        Record::new(Suite::Cache, "serving")
            .config("queries", QUERIES as u64)
            .config("universe", (CENTERS * MEMBERS) as u64)
            .config("zipf_exponent", ZIPF_EXPONENT)
            .config("approx_tau", SERVING_TAU)
            .value("exact_hit_rate", exact.hit_rate)
            .value("approx_hit_rate", approx.hit_rate)
            .value("approx_label_mismatches", label_mismatches(&approx.answers, &off.answers) as u64)
            .value("answer_digest", digest.finish())
            .verdict("exact_answers_identical", exact_identical)
            .verdict("exact_hit_rate_positive", exact.hit_rate > 0.0)
            .timing_ms("off_ms", off.ms)
            .timing_ms("exact_ms", exact.ms)
            .timing_ms("approx_ms", approx.ms)
            .measure("approx_speedup", speedup)
            .measured_verdict("approx_speedup_above_1", speedup > 1.0),
    );

    // Threshold sweep against one fixed cache of the warm-up answers.
    let (warm, rest) = queries.split_at(WARM_QUERIES);
    let truth = &off.answers[WARM_QUERIES..];
    let mut hit_rates = Vec::new();
    let mut sweep = Record::new(Suite::Cache, "tau_sweep")
        .config("warm_queries", WARM_QUERIES as u64)
        .config("lookups", rest.len() as u64);
    for tau in TAUS {
        let c = cache(CacheMode::Approx { tau })?;
        for (q, y) in warm.iter().zip(&off.answers) {
            c.put(q, y.clone())?;
        }
        let mut served = Vec::with_capacity(rest.len());
        for (q, t) in rest.iter().zip(truth) {
            served.push(c.lookup(q)?.unwrap_or_else(|| t.clone()));
        }
        let hr = c.stats().hit_rate;
        let wrong = label_mismatches(&served, truth);
        sweep = sweep
            .value(&format!("hit_rate_tau_{tau}"), hr)
            .value(&format!("accuracy_delta_tau_{tau}"), wrong as f64 / rest.len() as f64);
        hit_rates.push(hr);
    }
    let monotone = hit_rates.windows(2).all(|w| w[0] <= w[1]);
    records.push(sweep.verdict("hit_rate_monotone", monotone));

    let started = Instant::now();
    let (covered, mean_rate) = ci_trials(&model, &ctx, rng.random())?;
    records.push(
        Record::new(Suite::Cache, "error_estimate")
            .config("trials", TRIALS as u64)
            .config("entries", TRIAL_ENTRIES as u64)
            .config("samples", TRIAL_SAMPLES as u64)
            .config("planted_rate", PLANTED_RATE)
            .value("covered", covered as u64)
            .value("mean_error_rate", mean_rate)
            .verdict("ci_coverage", covered >= MIN_COVERED)
            .timing_ms("elapsed_ms", elapsed_ms(started)),
    );
    Ok(records)
}
