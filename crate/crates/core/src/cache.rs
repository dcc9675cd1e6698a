//! Feature-keyed cache of model outputs with exact and nearest-neighbour
//! lookup, and a Monte-Carlo estimate of the answers approximate caching
//! changes.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::class_label;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CacheMode {
    Off,
    /// Hit iff the quantized feature vectors are equal.
    Exact,
    /// Hit iff the nearest entry is within L2 distance `tau`.
    Approx { tau: f64 },
}

impl fmt::Display for CacheMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CacheMode::Off => f.write_str("off"),
            CacheMode::Exact => f.write_str("exact"),
            CacheMode::Approx { tau } => write!(f, "approx:{tau}"),
        }
    }
}

impl FromStr for CacheMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(CacheMode::Off),
            "exact" => Ok(CacheMode::Exact),
            _ => {
                let tau = s
                    .strip_prefix("approx:")
                    .and_then(|t| t.parse::<f64>().ok())
                    .ok_or_else(|| Error::invalid(format!("cache mode `{s}` is not off, exact or approx:TAU")))?;
                if !(tau >= 0.0 && tau.is_finite()) {
                    return Err(Error::invalid(format!("cache threshold {tau} must be finite and >= 0")));
                }
                Ok(CacheMode::Approx { tau })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheConfig {
    pub mode: CacheMode,
    /// Decimal places kept in exact-mode keys.
    pub quantize_decimals: u32,
    pub capacity: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            mode: CacheMode::Off,
            quantize_decimals: 6,
            capacity: 100_000,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::invalid("cache capacity must be at least 1"));
        }
        if let CacheMode::Approx { tau } = self.mode {
            if !(tau >= 0.0 && tau.is_finite()) {
                return Err(Error::invalid(format!("cache threshold {tau} must be finite and >= 0")));
            }
        }
        if self.quantize_decimals > 15 {
            return Err(Error::invalid("at most 15 quantization decimals"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub entries: u64,
    pub hit_rate: f64,
}

#[derive(Debug, Clone)]
struct Entry {
    features: Vec<f64>,
    prediction: Vec<f64>,
    counter: u64,
}

#[derive(Default)]
struct State {
    dim: Option<usize>,
    entries: VecDeque<Entry>,
    /// Quantized key to insertion counter, exact mode only.
    exact: HashMap<Vec<i64>, u64>,
    next: u64,
}

impl State {
    fn entry(&self, counter: u64) -> Option<&Entry> {
        let front = self.entries.front()?.counter;
        self.entries.get(counter.checked_sub(front)? as usize)
    }
}

pub struct InferenceCache {
    config: CacheConfig,
    state: RwLock<State>,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
}

impl fmt::Debug for InferenceCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InferenceCache")
            .field("config", &self.config)
            .field("stats", &self.stats())
            .finish()
    }
}

impl InferenceCache {
    pub fn new(config: CacheConfig) -> Result<Self> {
        config.validate()?;
        Ok(InferenceCache {
            config,
            state: RwLock::new(State::default()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.state.read().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn quantize(&self, x: &[f64]) -> Vec<i64> {
        let scale = 10f64.powi(self.config.quantize_decimals as i32);
        x.iter()
            .map(|v| {
                let q = (v * scale).round();
                // Folds -0.0 into 0 and keeps NaN distinct from numbers.
                if q.is_nan() {
                    i64::MIN
                } else {
                    q as i64
                }
            })
            .collect()
    }

    fn check_dim(state: &State, x: &[f64]) -> Result<()> {
        match state.dim {
            Some(d) if d != x.len() => Err(Error::invalid(format!(
                "cache holds {d}-dimensional vectors, got {}",
                x.len()
            ))),
            _ => Ok(()),
        }
    }

    pub fn put(&self, features: &[f64], prediction: Vec<f64>) -> Result<()> {
        let key = (self.config.mode == CacheMode::Exact).then(|| self.quantize(features));
        let mut st = self.state.write();
        Self::check_dim(&st, features)?;
        st.dim = Some(features.len());
        let counter = st.next;
        st.next += 1;
        if let Some(k) = key {
            st.exact.insert(k, counter);
        }
        st.entries.push_back(Entry {
            features: features.to_vec(),
            prediction,
            counter,
        });
        while st.entries.len() > self.config.capacity {
            let old = st.entries.pop_front().expect("over capacity");
            if self.config.mode == CacheMode::Exact {
                let k = self.quantize(&old.features);
                if st.exact.get(&k) == Some(&old.counter) {
                    st.exact.remove(&k);
                }
            }
            self.evictions.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }

    /// Lookup without touching the statistics.
    pub fn peek(&self, features: &[f64]) -> Result<Option<Vec<f64>>> {
        let st = self.state.read();
        Self::check_dim(&st, features)?;
        Ok(match self.config.mode {
            CacheMode::Off => None,
            CacheMode::Exact => st
                .exact
                .get(&self.quantize(features))
                .and_then(|&c| st.entry(c))
                .map(|e| e.prediction.clone()),
            CacheMode::Approx { tau } => nearest(st.entries.iter().map(|e| (e.features.as_slice(), e)), features)
                .filter(|(d, _)| *d <= tau)
                .map(|(_, e)| e.prediction.clone()),
        })
    }

    pub fn lookup(&self, features: &[f64]) -> Result<Option<Vec<f64>>> {
        let found = self.peek(features)?;
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        Ok(found)
    }

    pub fn stats(&self) -> CacheStats {
        let (hits, misses) = (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed));
        CacheStats {
            hits,
            misses,
            evictions: self.evictions.load(Ordering::Relaxed),
            entries: self.len() as u64,
            hit_rate: if hits + misses == 0 { 0.0 } else { hits as f64 / (hits + misses) as f64 },
        }
    }

    pub fn reset_stats(&self) {
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
        self.evictions.store(0, Ordering::Relaxed);
    }
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Nearest item by L2 distance; the first one wins ties.
fn nearest<'a, T>(items: impl Iterator<Item = (&'a [f64], T)>, q: &[f64]) -> Option<(f64, T)> {
    let mut best: Option<(f64, T)> = None;
    for (x, item) in items {
        let d = l2_distance(x, q);
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, item));
        }
    }
    best
}

/// Full inference for one feature vector.
pub trait Predictor {
    fn predict(&self, features: &[f64]) -> Result<Vec<f64>>;
}

impl<F: Fn(&[f64]) -> Result<Vec<f64>>> Predictor for F {
    fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        self(features)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorEstimate {
    pub samples: usize,
    pub mismatches: usize,
    pub error_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl ErrorEstimate {
    /// Rate with a normal-approximation 95% interval clamped to `[0, 1]`.
    pub fn from_counts(mismatches: usize, samples: usize) -> Result<Self> {
        if samples < 30 {
            return Err(Error::invalid(format!("error estimate needs at least 30 samples, got {samples}")));
        }
        let p = mismatches as f64 / samples as f64;
        let half = 1.96 * (p * (1.0 - p) / samples as f64).sqrt();
        Ok(ErrorEstimate {
            samples,
            mismatches,
            error_rate: p,
            ci_low: (p - half).max(0.0),
            ci_high: (p + half).min(1.0),
        })
    }

    pub fn contains(&self, rate: f64) -> bool {
        self.ci_low <= rate && rate <= self.ci_high
    }
}

/// Draws `n` queries from `sample` and compares the cached answer's class
/// with full inference. Misses fall through to inference and so agree. The
/// cache is only read.
pub fn estimate_cache_error(
    model: &impl Predictor,
    mut sample: impl FnMut(&mut ChaCha8Rng) -> Vec<f64>,
    cache: &InferenceCache,
    n: usize,
    seed: u64,
) -> Result<ErrorEstimate> {
    if n < 30 {
        return Err(Error::invalid(format!("error estimate needs at least 30 samples, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..n {
        let x = sample(&mut rng);
        if let Some(cached) = cache.peek(&x)? {
            if class_label(&cached) != class_label(&model.predict(&x)?) {
                mismatches += 1;
            }
        }
    }
    ErrorEstimate::from_counts(mismatches, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cache(mode: CacheMode, capacity: usize) -> InferenceCache {
        InferenceCache::new(CacheConfig {
            mode,
            capacity,
            ..CacheConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn exact_put_then_lookup() {
        let c = cache(CacheMode::Exact, 10);
        assert_eq!(c.lookup(&[1.0, 2.0]).unwrap(), None);
        c.put(&[1.0, 2.0], vec![0.3, 0.7]).unwrap();
        assert_eq!(c.lookup(&[1.0, 2.0]).unwrap(), Some(vec![0.3, 0.7]));
        assert_eq!(c.lookup(&[1.0, 2.1]).unwrap(), None);
        assert_eq!(c.lookup(&[-0.0 + 1.0, 2.0000000001]).unwrap(), Some(vec![0.3, 0.7]));
        let s = c.stats();
        assert_eq!((s.hits, s.misses), (2, 2));
    }

    #[test]
    fn fifo_eviction() {
        for mode in [CacheMode::Exact, CacheMode::Approx { tau: 0.0 }] {
            let c = cache(mode, 2);
            c.put(&[1.0], vec![1.0]).unwrap();
            c.put(&[2.0], vec![2.0]).unwrap();
            c.put(&[3.0], vec![3.0]).unwrap();
            assert_eq!(c.lookup(&[1.0]).unwrap(), None);
            assert_eq!(c.lookup(&[2.0]).unwrap(), Some(vec![2.0]));
            assert_eq!(c.stats().evictions, 1);
        }
    }

    #[test]
    fn entry_count_is_bounded_by_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for cap in [1, 10, 500, 5000] {
            let c = cache(CacheMode::Exact, cap);
            for _ in 0..1000 {
                c.put(&[rng.random(), rng.random()], vec![0.0]).unwrap();
            }
            assert_eq!(c.len(), 1000.min(cap));
        }
    }

    #[test]
    fn dimension_mismatch() {
        let c = cache(CacheMode::Exact, 4);
        c.put(&[1.0, 2.0], vec![0.0]).unwrap();
        assert!(matches!(c.put(&[1.0], vec![0.0]), Err(Error::InvalidArgument(_))));
        assert!(matches!(c.lookup(&[1.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn approx_returns_nearest_within_tau() {
        let c = cache(CacheMode::Approx { tau: 1.0 }, 10);
        c.put(&[1.5, 0.0], vec![2.0]).unwrap();
        c.put(&[0.5, 0.0], vec![1.0]).unwrap();
        assert_eq!(c.lookup(&[0.0, 0.0]).unwrap(), Some(vec![1.0]));
        let far = cache(CacheMode::Approx { tau: 0.4 }, 10);
        far.put(&[0.5, 0.0], vec![1.0]).unwrap();
        assert_eq!(far.lookup(&[0.0, 0.0]).unwrap(), None);
    }

    #[test]
    fn approx_ties_prefer_oldest() {
        let c = cache(CacheMode::Approx { tau: 5.0 }, 10);
        c.put(&[1.0], vec![1.0]).unwrap();
        c.put(&[-1.0], vec![2.0]).unwrap();
        assert_eq!(c.lookup(&[0.0]).unwrap(), Some(vec![1.0]));
    }

    #[test]
    fn zero_tau_matches_exact_duplicates() {
        let c = cache(CacheMode::Approx { tau: 0.0 }, 10);
        c.put(&[0.25, 0.5], vec![1.0]).unwrap();
        assert_eq!(c.lookup(&[0.25, 0.5]).unwrap(), Some(vec![1.0]));
        assert_eq!(c.lookup(&[0.25, 0.5 + 1e-12]).unwrap(), None);
    }

    #[test]
    fn closed_form_interval() {
        let e = ErrorEstimate::from_counts(7, 100).unwrap();
        assert!((e.error_rate - 0.07).abs() < 1e-15);
        assert!((e.ci_low - 0.02).abs() < 0.001, "{e:?}");
        assert!((e.ci_high - 0.12).abs() < 0.001, "{e:?}");
        let z = ErrorEstimate::from_counts(0, 50).unwrap();
        assert_eq!((z.ci_low, z.ci_high), (0.0, 0.0));
        assert!(ErrorEstimate::from_counts(1, 29).is_err());
    }

    #[test]
    fn exact_mode_is_lossless() {
        let model = |x: &[f64]| -> Result<Vec<f64>> { Ok(vec![x[0], 1.0 - x[0]]) };
        let c = cache(CacheMode::Exact, 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random::<f64>()]).collect();
        for x in &pool {
            c.put(x, model(x).unwrap()).unwrap();
        }
        let est = estimate_cache_error(&model, |r| pool[r.random_range(0..pool.len())].clone(), &c, 200, 3).unwrap();
        assert_eq!((est.error_rate, est.ci_low, est.ci_high), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("off".parse::<CacheMode>().unwrap(), CacheMode::Off);
        assert_eq!("approx:0.5".parse::<CacheMode>().unwrap(), CacheMode::Approx { tau: 0.5 });
        assert!("approx:-1".parse::<CacheMode>().is_err());
        assert!("fuzzy".parse::<CacheMode>().is_err());
    }

    proptest! {
        #[test]
        fn approx_agrees_with_linear_scan(
            entries in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..40),
            q in prop::collection::vec(-3.0f64..3.0, 3),
            tau in 0.0f64..4.0,
        ) {
            let c = cache(CacheMode::Approx { tau }, 100);
            for (i, e) in entries.iter().enumerate() {
                c.put(e, vec![i as f64]).unwrap();
            }
            let mut best: Option<(f64, usize)> = None;
            for (i, e) in entries.iter().enumerate() {
                let d = e.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, i));
                }
            }
            let want = best.filter(|(d, _)| *d <= tau).map(|(_, i)| vec![i as f64]);
            prop_assert_eq!(c.lookup(&q).unwrap(), want);
        }

        #[test]
        fn hit_count_monotone_in_tau(
            entries in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 1..20),
            queries in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 1..20),
        ) {
            let mut last = 0;
            for tau in [0.0, 0.1, 0.5, 1.0, 2.0] {
                let c = cache(CacheMode::Approx { tau }, 100);
                for e in &entries {
                    c.put(e, vec![0.0]).unwrap();
                }
                let hits = queries.iter().filter(|q| c.peek(q).unwrap().is_some()).count();
                prop_assert!(hits >= last);
                last = hits;
            }
        }
    }
}
