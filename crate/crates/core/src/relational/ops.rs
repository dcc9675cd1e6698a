//! Relational operators.
//!
//! The generic forms work over any tuple type with key-extractor closures;
//! block relations and row relations both go through them. Output order is
//! always canonical so results never depend on hashing or worker count.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use rayon::prelude::*;

use super::value::{KeyValue, RowRef, RowRelation, Schema};
use crate::error::{Error, Result};

/// Hash equi-join. Emits `combiner(l, r)` for every key-equal pair, ordered
/// by key, then left index, then right index.
pub fn equi_join<L, R, K, O>(
    left: &[L],
    right: &[R],
    left_key: impl Fn(&L) -> K,
    right_key: impl Fn(&R) -> K,
    combiner: impl Fn(&L, &R) -> Result<O>,
) -> Result<Vec<O>>
where
    K: Hash + Ord,
{
    join_pairs(left, right, left_key, right_key)
        .into_iter()
        .map(|(l, r)| combiner(&left[l], &right[r]))
        .collect()
}

/// Matching index pairs of an equi-join in canonical order.
pub fn join_pairs<L, R, K>(
    left: &[L],
    right: &[R],
    left_key: impl Fn(&L) -> K,
    right_key: impl Fn(&R) -> K,
) -> Vec<(usize, usize)>
where
    K: Hash + Ord,
{
    if left.is_empty() || right.is_empty() {
        return Vec::new();
    }
    let mut build: HashMap<K, Vec<usize>> = HashMap::with_capacity(right.len());
    for (i, r) in right.iter().enumerate() {
        build.entry(right_key(r)).or_default().push(i);
    }
    let mut matched: Vec<(&K, usize, usize)> = Vec::new();
    for (li, l) in left.iter().enumerate() {
        if let Some((k, rs)) = build.get_key_value(&left_key(l)) {
            matched.extend(rs.iter().map(|&ri| (k, li, ri)));
        }
    }
    matched.sort_unstable_by(|a, b| a.0.cmp(b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    matched.into_iter().map(|(_, l, r)| (l, r)).collect()
}

/// Grouped fold. Groups come out in ascending key order; inside a group the
/// reducer sees rows in ascending `tiebreak` order (input order on ties), so
/// floating-point folds are reproducible. Groups are folded in parallel on
/// the current rayon pool.
pub fn group_aggregate<T, K, B, A>(
    rows: &[T],
    key: impl Fn(&T) -> K,
    tiebreak: impl Fn(&T) -> B + Sync,
    initial: A,
    reducer: impl Fn(A, &T) -> Result<A> + Sync,
) -> Result<Vec<(K, A)>>
where
    T: Sync,
    K: Ord + Send + Sync + Clone,
    B: Ord,
    A: Clone + Send + Sync,
{
    group_aggregate_with(rows, key, tiebreak, initial, reducer, |k, a| Ok((k.clone(), a)))
}

/// [`group_aggregate`] with a per-group `finish` step applied as soon as a
/// group's fold completes.
pub fn group_aggregate_with<T, K, B, A, O>(
    rows: &[T],
    key: impl Fn(&T) -> K,
    tiebreak: impl Fn(&T) -> B + Sync,
    initial: A,
    reducer: impl Fn(A, &T) -> Result<A> + Sync,
    finish: impl Fn(&K, A) -> Result<O> + Sync,
) -> Result<Vec<O>>
where
    T: Sync,
    K: Ord + Send + Sync,
    B: Ord,
    A: Clone + Send + Sync,
    O: Send,
{
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        groups.entry(key(r)).or_default().push(i);
    }
    let groups: Vec<(K, Vec<usize>)> = groups.into_iter().collect();
    groups
        .into_par_iter()
        .map(|(k, mut members)| {
            members.sort_by_key(|&i| tiebreak(&rows[i]));
            let acc = members
                .iter()
                .try_fold(initial.clone(), |acc, &i| reducer(acc, &rows[i]))?;
            finish(&k, acc)
        })
        .collect()
}

/// Selection preserving input order.
pub fn filter<T: Clone>(rows: &[T], predicate: impl Fn(&T) -> bool) -> Vec<T> {
    rows.iter().filter(|r| predicate(r)).cloned().collect()
}

/// Applies an opaque per-row function. A failure is reported with the index
/// of the row it happened on.
pub fn map_udf<T, U>(rows: &[T], udf: impl Fn(&T) -> Result<U>) -> Result<Vec<U>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            udf(r).map_err(|e| Error::Udf {
                row: i,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Equi-join of two row relations on the given key columns. Returns the
/// matching `(left_row, right_row)` pairs in canonical order.
pub fn join_rows(
    left: &RowRelation,
    right: &RowRelation,
    left_key: &[usize],
    right_key: &[usize],
) -> Result<Vec<(usize, usize)>> {
    if left_key.len() != right_key.len() || left_key.is_empty() {
        return Err(Error::invalid("join needs equally many key columns on both sides"));
    }
    for (&l, &r) in left_key.iter().zip(right_key) {
        let (lt, rt) = (left.schema().field(l).dtype, right.schema().field(r).dtype);
        if lt != rt {
            return Err(Error::invalid(format!(
                "join key type mismatch: `{}` is {lt}, `{}` is {rt}",
                left.schema().field(l).name,
                right.schema().field(r).name
            )));
        }
    }
    let key_of = |rel: &RowRelation, cols: &[usize], i: usize| -> Vec<KeyValue> {
        cols.iter().map(|&c| rel.column(c).key(i)).collect()
    };
    let l_idx: Vec<usize> = (0..left.len()).collect();
    let r_idx: Vec<usize> = (0..right.len()).collect();
    Ok(join_pairs(
        &l_idx,
        &r_idx,
        |&i| key_of(left, left_key, i),
        |&i| key_of(right, right_key, i),
    ))
}

/// Concatenated output rows for join pairs.
pub fn join_output(left: &RowRelation, right: &RowRelation, pairs: &[(usize, usize)]) -> Result<RowRelation> {
    let (li, ri): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    RowRelation::hconcat(left.gather(&li, false), right.gather(&ri, false))
}

/// Indices of rows satisfying `predicate`, in input order.
pub fn filter_rows(rel: &RowRelation, predicate: impl Fn(RowRef<'_>) -> bool) -> Vec<usize> {
    (0..rel.len()).filter(|&i| predicate(rel.row_ref(i))).collect()
}

/// Row-at-a-time UDF producing rows of `out_schema`.
pub fn map_rows(
    rel: &RowRelation,
    out_schema: Schema,
    udf: impl Fn(RowRef<'_>) -> Result<Vec<super::Value>>,
) -> Result<RowRelation> {
    let idx: Vec<usize> = (0..rel.len()).collect();
    let rows = map_udf(&idx, |&i| udf(rel.row_ref(i)))?;
    RowRelation::from_rows(out_schema, rows)
}

/// `count(*)` grouped by one column, in ascending key order.
pub fn count_by(rel: &RowRelation, col: usize) -> Result<Vec<(KeyValue, i64)>> {
    let idx: Vec<usize> = (0..rel.len()).collect();
    group_aggregate(&idx, |&i| rel.column(col).key(i), |&i| i, 0i64, |n, _| Ok(n + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relational::{DataType, Field, Value};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn int_rel(name: &str, vals: &[i64]) -> RowRelation {
        let schema = Schema::new(vec![Field::new(name, DataType::Int)]);
        RowRelation::from_rows(schema, vals.iter().map(|&v| vec![Value::Int(v)]).collect()).unwrap()
    }

    #[test]
    fn duplicate_keys_produce_all_pairs() {
        let l = int_rel("a", &[1, 2, 2]);
        let r = int_rel("b", &[2, 2, 3]);
        let pairs = join_rows(&l, &r, &[0], &[0]).unwrap();
        assert_eq!(pairs, vec![(1, 0), (1, 1), (2, 0), (2, 1)]);
    }

    #[test]
    fn join_with_empty_side() {
        let l = int_rel("a", &[1, 2]);
        let r = int_rel("b", &[]);
        assert!(join_rows(&l, &r, &[0], &[0]).unwrap().is_empty());
    }

    #[test]
    fn join_key_type_mismatch() {
        let l = int_rel("a", &[1]);
        let schema = Schema::new(vec![Field::new("b", DataType::String)]);
        let r = RowRelation::from_rows(schema, vec![vec![Value::Str("1".into())]]).unwrap();
        assert!(matches!(join_rows(&l, &r, &[0], &[0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn random_joins_match_nested_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let l: Vec<i64> = (0..rng.random_range(0..200)).map(|_| rng.random_range(0..30)).collect();
            let r: Vec<i64> = (0..rng.random_range(0..200)).map(|_| rng.random_range(0..30)).collect();
            let got = join_rows(&int_rel("a", &l), &int_rel("b", &r), &[0], &[0]).unwrap();
            let mut want = Vec::new();
            for (i, a) in l.iter().enumerate() {
                for (j, b) in r.iter().enumerate() {
                    if a == b {
                        want.push((*a, i, j));
                    }
                }
            }
            want.sort();
            let want: Vec<_> = want.into_iter().map(|(_, i, j)| (i, j)).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn single_group_sum() {
        let vals = [1.0, 2.0, 3.0];
        let out = group_aggregate(&vals, |_| 0, |_| 0, 0.0, |a, v| Ok(a + v)).unwrap();
        assert_eq!(out, vec![(0, 6.0)]);
    }

    #[test]
    fn counts_match_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals: Vec<i64> = (0..100).map(|_| rng.random_range(0..3)).collect();
        let rel = int_rel("g", &vals);
        let counts = count_by(&rel, 0).unwrap();
        for (k, n) in counts {
            let KeyValue::Int(k) = k else { unreachable!() };
            assert_eq!(n, vals.iter().filter(|&&v| v == k).count() as i64);
        }
    }

    #[test]
    fn fold_order_follows_tiebreak() {
        let rows = [(0, 3, "c"), (0, 1, "a"), (1, 0, "z"), (0, 2, "b")];
        let out = group_aggregate(
            &rows,
            |r| r.0,
            |r| r.1,
            String::new(),
            |mut acc, r| {
                acc.push_str(r.2);
                Ok(acc)
            },
        )
        .unwrap();
        assert_eq!(out, vec![(0, "abc".to_string()), (1, "z".to_string())]);
    }

    #[test]
    fn float_sums_are_identical_across_worker_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<(u8, usize, f64)> =
            (0..1000).map(|i| (rng.random_range(0..7), i, rng.random_range(-1e6..1e6))).collect();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| group_aggregate(&rows, |r| r.0, |r| r.1, 0.0, |a, r| Ok(a + r.2)).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert!(a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1.to_bits() == y.1.to_bits()));
    }

    #[test]
    fn filter_and_map() {
        let rel = int_rel("v", &[1, 0, 1, 1, 0]);
        assert_eq!(filter_rows(&rel, |_| true).len(), 5);
        let ones = filter_rows(&rel, |r| r.value(0) == Value::Int(1));
        assert_eq!(ones, vec![0, 2, 3]);
        let doubled = map_rows(&rel, rel.schema().clone(), |r| {
            let Value::Int(v) = r.value(0) else { unreachable!() };
            Ok(vec![Value::Int(v * 2)])
        })
        .unwrap();
        for i in 0..5 {
            assert_eq!(doubled.value(i, 0), Value::Int(2 * if [0, 2, 3].contains(&i) { 1 } else { 0 }));
        }
        assert_eq!(map_rows(&rel, rel.schema().clone(), |r| Ok(r.values())).unwrap(), rel);
    }

    #[test]
    fn udf_error_names_row() {
        let err = map_udf(&[1, 2, 3], |&v| if v == 2 { Err(Error::invalid("boom")) } else { Ok(v) });
        assert!(matches!(err, Err(Error::Udf { row: 1, .. })));
    }
}
