//! Byte-budgeted LRU buffer pool with spill-to-disk.
//!
//! A page is one tensor block or one batch of rows. When a put or a reload
//! would push resident bytes over the budget, least recently used unpinned
//! pages are dropped; dirty ones are first written to the spill directory.
//!
//! Tensor blocks spill to `<spill_dir>/<relation>_<block_row>_<block_col>.blk`
//! as two little-endian `u64` dimensions (rows, cols) followed by the raw
//! little-endian `f64` payload. Row batches spill to
//! `<spill_dir>/<relation>_<batch>.rows`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;

use super::value::{Column, DataType, Field, RowRelation, Schema};
use crate::error::{Error, Result};
use crate::tensor::TensorBlock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PageKey {
    pub relation: u64,
    pub row: u64,
    pub col: u64,
}

impl PageKey {
    pub fn new(relation: u64, row: u64, col: u64) -> Self {
        PageKey { relation, row, col }
    }
}

#[derive(Debug, Clone)]
pub enum Page {
    Block(Arc<TensorBlock>),
    Rows(Arc<RowRelation>),
}

impl Page {
    pub fn size_bytes(&self) -> u64 {
        match self {
            Page::Block(b) => b.data.len() as u64 * 8,
            Page::Rows(r) => r.size_bytes(),
        }
    }

    fn kind(&self) -> PageKind {
        match self {
            Page::Block(_) => PageKind::Block,
            Page::Rows(_) => PageKind::Rows,
        }
    }

    pub fn into_block(self) -> Result<Arc<TensorBlock>> {
        match self {
            Page::Block(b) => Ok(b),
            Page::Rows(_) => Err(Error::CorruptRelation("expected a block page".into())),
        }
    }

    pub fn into_rows(self) -> Result<Arc<RowRelation>> {
        match self {
            Page::Rows(r) => Ok(r),
            Page::Block(_) => Err(Error::CorruptRelation("expected a row page".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PageKind {
    Block,
    Rows,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PoolStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub spills: u64,
    pub resident_bytes: u64,
    pub peak_resident_bytes: u64,
    pub budget_bytes: u64,
}

struct Frame {
    page: Page,
    bytes: u64,
    pins: u32,
    tick: u64,
}

#[derive(Default)]
struct PoolState {
    resident: HashMap<PageKey, Frame>,
    lru: BTreeMap<u64, PageKey>,
    /// Pages with a valid copy in the spill directory.
    on_disk: HashMap<PageKey, PageKind>,
    tick: u64,
    used: u64,
    stats: PoolStats,
}

pub struct BufferPool {
    budget: u64,
    spill_dir: PathBuf,
    owns_dir: bool,
    next_relation: AtomicU64,
    state: Mutex<PoolState>,
}

impl std::fmt::Debug for BufferPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BufferPool")
            .field("budget", &self.budget)
            .field("spill_dir", &self.spill_dir)
            .finish()
    }
}

impl BufferPool {
    pub fn new(budget_bytes: u64, spill_dir: impl Into<PathBuf>) -> Result<Self> {
        if budget_bytes == 0 {
            return Err(Error::invalid("buffer pool budget must be positive"));
        }
        let spill_dir = spill_dir.into();
        fs::create_dir_all(&spill_dir)?;
        Ok(BufferPool {
            budget: budget_bytes,
            spill_dir,
            owns_dir: false,
            next_relation: AtomicU64::new(1),
            state: Mutex::new(PoolState {
                stats: PoolStats {
                    budget_bytes,
                    ..PoolStats::default()
                },
                ..PoolState::default()
            }),
        })
    }

    /// Pool spilling into a fresh directory under the system temp dir, removed
    /// when the pool is dropped.
    pub fn temporary(budget_bytes: u64) -> Result<Self> {
        static SEQ: AtomicU64 = AtomicU64::new(0);
        let dir = std::env::temp_dir().join(format!(
            "relinfer-spill-{}-{}",
            std::process::id(),
            SEQ.fetch_add(1, Ordering::Relaxed)
        ));
        let mut pool = Self::new(budget_bytes, dir)?;
        pool.owns_dir = true;
        Ok(pool)
    }

    pub fn budget_bytes(&self) -> u64 {
        self.budget
    }

    pub fn spill_dir(&self) -> &Path {
        &self.spill_dir
    }

    /// Fresh relation id for page keys.
    pub fn next_relation_id(&self) -> u64 {
        self.next_relation.fetch_add(1, Ordering::Relaxed)
    }

    pub fn stats(&self) -> PoolStats {
        let st = self.state.lock();
        PoolStats {
            resident_bytes: st.used,
            ..st.stats
        }
    }

    /// Zeroes the counters and restarts peak tracking from the current
    /// residency.
    pub fn reset_stats(&self) {
        let mut st = self.state.lock();
        st.stats = PoolStats {
            budget_bytes: self.budget,
            peak_resident_bytes: st.used,
            ..PoolStats::default()
        };
    }

    pub fn resident_bytes(&self) -> u64 {
        self.state.lock().used
    }

    pub fn put(&self, key: PageKey, page: Page) -> Result<()> {
        let bytes = page.size_bytes();
        if bytes > self.budget {
            return Err(Error::Capacity(format!(
                "page of {bytes} bytes exceeds buffer pool budget of {} bytes",
                self.budget
            )));
        }
        let mut st = self.state.lock();
        let old = st.resident.remove(&key);
        if let Some(f) = &old {
            st.lru.remove(&f.tick);
            st.used -= f.bytes;
        }
        if let Err(e) = self.make_room(&mut st, bytes) {
            if let Some(f) = old {
                st.lru.insert(f.tick, key);
                st.used += f.bytes;
                st.resident.insert(key, f);
            }
            return Err(e);
        }
        self.invalidate_disk(&mut st, key);
        let pins = old.map_or(0, |f| f.pins);
        self.insert(&mut st, key, page, bytes, pins);
        Ok(())
    }

    pub fn get(&self, key: PageKey) -> Result<Page> {
        let mut st = self.state.lock();
        self.fetch(&mut st, key)
    }

    pub fn contains(&self, key: PageKey) -> bool {
        let st = self.state.lock();
        st.resident.contains_key(&key) || st.on_disk.contains_key(&key)
    }

    pub fn is_resident(&self, key: PageKey) -> bool {
        self.state.lock().resident.contains_key(&key)
    }

    /// Loads the page if needed and protects it from eviction.
    pub fn pin(&self, key: PageKey) -> Result<()> {
        let mut st = self.state.lock();
        self.fetch(&mut st, key)?;
        st.resident.get_mut(&key).expect("fetched").pins += 1;
        Ok(())
    }

    pub fn unpin(&self, key: PageKey) -> Result<()> {
        let mut st = self.state.lock();
        let frame = st
            .resident
            .get_mut(&key)
            .ok_or_else(|| Error::NotFound(format!("page {key:?} is not resident")))?;
        if frame.pins == 0 {
            return Err(Error::invalid(format!("page {key:?} is not pinned")));
        }
        frame.pins -= 1;
        Ok(())
    }

    pub fn remove(&self, key: PageKey) {
        let mut st = self.state.lock();
        if let Some(f) = st.resident.remove(&key) {
            st.lru.remove(&f.tick);
            st.used -= f.bytes;
        }
        self.invalidate_disk(&mut st, key);
    }

    /// Drops every page of a relation, resident or spilled.
    pub fn drop_relation(&self, relation: u64) {
        let mut st = self.state.lock();
        let keys: Vec<PageKey> = st
            .resident
            .keys()
            .chain(st.on_disk.keys())
            .filter(|k| k.relation == relation)
            .copied()
            .collect();
        for key in keys {
            if let Some(f) = st.resident.remove(&key) {
                st.lru.remove(&f.tick);
                st.used -= f.bytes;
            }
            self.invalidate_disk(&mut st, key);
        }
    }

    fn fetch(&self, st: &mut PoolState, key: PageKey) -> Result<Page> {
        if st.resident.contains_key(&key) {
            st.stats.hits += 1;
            let tick = Self::next_tick(st);
            let frame = st.resident.get_mut(&key).expect("checked");
            let old = std::mem::replace(&mut frame.tick, tick);
            let page = frame.page.clone();
            st.lru.remove(&old);
            st.lru.insert(tick, key);
            return Ok(page);
        }
        let kind = *st
            .on_disk
            .get(&key)
            .ok_or_else(|| Error::NotFound(format!("page {key:?}")))?;
        st.stats.misses += 1;
        let page = self.read_spill(key, kind)?;
        let bytes = page.size_bytes();
        self.make_room(st, bytes)?;
        self.insert(st, key, page.clone(), bytes, 0);
        Ok(page)
    }

    fn next_tick(st: &mut PoolState) -> u64 {
        st.tick += 1;
        st.tick
    }

    fn insert(&self, st: &mut PoolState, key: PageKey, page: Page, bytes: u64, pins: u32) {
        let tick = Self::next_tick(st);
        st.lru.insert(tick, key);
        st.resident.insert(
            key,
            Frame {
                page,
                bytes,
                pins,
                tick,
            },
        );
        st.used += bytes;
        st.stats.peak_resident_bytes = st.stats.peak_resident_bytes.max(st.used);
    }

    fn make_room(&self, st: &mut PoolState, bytes: u64) -> Result<()> {
        while st.used + bytes > self.budget {
            let victim = st
                .lru
                .values()
                .copied()
                .find(|k| st.resident[k].pins == 0)
                .ok_or_else(|| {
                    Error::Capacity(format!(
                        "pinned pages hold {} of {} bytes; cannot fit {bytes} more",
                        st.used, self.budget
                    ))
                })?;
            let frame = st.resident.remove(&victim).expect("lru entry is resident");
            st.lru.remove(&frame.tick);
            st.used -= frame.bytes;
            st.stats.evictions += 1;
            if !st.on_disk.contains_key(&victim) {
                self.write_spill(victim, &frame.page)?;
                st.on_disk.insert(victim, frame.page.kind());
                st.stats.spills += 1;
            }
        }
        Ok(())
    }

    fn invalidate_disk(&self, st: &mut PoolState, key: PageKey) {
        if let Some(kind) = st.on_disk.remove(&key) {
            let _ = fs::remove_file(self.spill_path(key, kind));
        }
    }

    fn spill_path(&self, key: PageKey, kind: PageKind) -> PathBuf {
        let name = match kind {
            PageKind::Block => format!("{}_{}_{}.blk", key.relation, key.row, key.col),
            PageKind::Rows => format!("{}_{}.rows", key.relation, key.row),
        };
        self.spill_dir.join(name)
    }

    fn write_spill(&self, key: PageKey, page: &Page) -> Result<()> {
        let path = self.spill_path(key, page.kind());
        let mut w = BufWriter::new(fs::File::create(&path)?);
        match page {
            Page::Block(b) => write_block(&mut w, b)?,
            Page::Rows(r) => write_rows(&mut w, r)?,
        }
        w.flush()?;
        Ok(())
    }

    fn read_spill(&self, key: PageKey, kind: PageKind) -> Result<Page> {
        let path = self.spill_path(key, kind);
        let mut r = BufReader::new(fs::File::open(&path)?);
        Ok(match kind {
            PageKind::Block => {
                let (rows, cols, data) = read_block(&mut r)?;
                Page::Block(Arc::new(TensorBlock::new(
                    key.row as usize,
                    key.col as usize,
                    rows,
                    cols,
                    data,
                )?))
            }
            PageKind::Rows => Page::Rows(Arc::new(read_rows(&mut r)?)),
        })
    }
}

impl Drop for BufferPool {
    fn drop(&mut self) {
        let on_disk = std::mem::take(&mut self.state.get_mut().on_disk);
        for (key, kind) in on_disk {
            let _ = fs::remove_file(self.spill_path(key, kind));
        }
        if self.owns_dir {
            let _ = fs::remove_dir_all(&self.spill_dir);
        }
    }
}

/// Writes a block in the spill format: `u64 rows, u64 cols, f64 * rows*cols`,
/// all little-endian.
pub fn write_block(w: &mut impl Write, b: &TensorBlock) -> Result<()> {
    w.write_all(&(b.rows as u64).to_le_bytes())?;
    w.write_all(&(b.cols as u64).to_le_bytes())?;
    write_f64s(w, &b.data)
}

pub fn read_block(r: &mut impl Read) -> Result<(usize, usize, Vec<f64>)> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let data = read_f64s(r, rows * cols)?;
    Ok((rows, cols, data))
}

pub(crate) fn write_f64s(w: &mut impl Write, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len().min(1 << 16) * 8);
    for chunk in data.chunks(1 << 16) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u64(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::CorruptRelation(format!("spilled string: {e}")))
}

fn write_rows(w: &mut impl Write, rel: &RowRelation) -> Result<()> {
    w.write_all(&(rel.schema().len() as u64).to_le_bytes())?;
    w.write_all(&(rel.len() as u64).to_le_bytes())?;
    w.write_all(&(rel.keys().len() as u64).to_le_bytes())?;
    for &k in rel.keys() {
        w.write_all(&(k as u64).to_le_bytes())?;
    }
    for (field, col) in rel.schema().fields.iter().zip(rel.columns()) {
        write_str(w, &field.name)?;
        match col {
            Column::Int(v) => {
                w.write_all(&[0])?;
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Column::Float(v) => {
                w.write_all(&[1])?;
                write_f64s(w, v)?;
            }
            Column::Str(v) => {
                w.write_all(&[2])?;
                for s in v {
                    write_str(w, s)?;
                }
            }
        }
    }
    Ok(())
}

fn read_rows(r: &mut impl Read) -> Result<RowRelation> {
    let ncols = read_u64(r)? as usize;
    let nrows = read_u64(r)? as usize;
    let nkeys = read_u64(r)? as usize;
    let keys = (0..nkeys)
        .map(|_| read_u64(r).map(|k| k as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut fields = Vec::with_capacity(ncols);
    let mut columns = Vec::with_capacity(ncols);
    for _ in 0..ncols {
        let name = read_str(r)?;
        let mut tag = [0u8];
        r.read_exact(&mut tag)?;
        let (dtype, col) = match tag[0] {
            0 => (
                DataType::Int,
                Column::Int((0..nrows).map(|_| read_u64(r).map(|v| v as i64)).collect::<Result<_>>()?),
            ),
            1 => (DataType::Float, Column::Float(read_f64s(r, nrows)?)),
            2 => (
                DataType::String,
                Column::Str((0..nrows).map(|_| read_str(r)).collect::<Result<_>>()?),
            ),
            t => return Err(Error::CorruptRelation(format!("unknown column tag {t}"))),
        };
        fields.push(Field::new(name, dtype));
        columns.push(col);
    }
    RowRelation::new(Schema::new(fields), columns, keys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relational::Value;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(fill: f64, n: usize) -> Page {
        Page::Block(Arc::new(TensorBlock::new(0, 0, n, n, vec![fill; n * n]).unwrap()))
    }

    fn data(p: &Page) -> Vec<f64> {
        match p {
            Page::Block(b) => b.data.clone(),
            Page::Rows(_) => unreachable!(),
        }
    }

    #[test]
    fn scripted_lru_trace() {
        let dir = tempfile::tempdir().unwrap();
        let page = 4 * 4 * 8;
        let pool = BufferPool::new(2 * page, dir.path()).unwrap();
        let (a, b, c) = (PageKey::new(1, 0, 0), PageKey::new(1, 0, 1), PageKey::new(1, 1, 0));
        pool.put(a, block(1.0, 4)).unwrap();
        pool.put(b, block(2.0, 4)).unwrap();
        pool.put(c, block(3.0, 4)).unwrap();
        assert!(!pool.is_resident(a));
        assert!(dir.path().join("1_0_0.blk").exists());
        assert_eq!(pool.stats().spills, 1);

        let got = pool.get(a).unwrap();
        assert_eq!(data(&got), vec![1.0; 16]);
        assert!(!pool.is_resident(b));
        assert!(dir.path().join("1_0_1.blk").exists());
        let s = pool.stats();
        assert_eq!((s.spills, s.evictions, s.misses), (2, 2, 1));
        assert!(s.peak_resident_bytes <= 2 * page);
    }

    #[test]
    fn spill_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let pool = BufferPool::new(40, dir.path()).unwrap();
        let blk = TensorBlock::new(3, 4, 1, 2, vec![1.5, -2.0]).unwrap();
        pool.put(PageKey::new(7, 3, 4), Page::Block(Arc::new(blk))).unwrap();
        pool.put(PageKey::new(7, 0, 0), block(0.0, 2)).unwrap();
        let bytes = fs::read(dir.path().join("7_3_4.blk")).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.5f64.to_le_bytes());
        want.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn absent_key_and_oversized_page() {
        let dir = tempfile::tempdir().unwrap();
        let pool = BufferPool::new(64, dir.path()).unwrap();
        assert!(matches!(pool.get(PageKey::new(1, 0, 0)), Err(Error::NotFound(_))));
        assert!(matches!(pool.put(PageKey::new(1, 0, 0), block(0.0, 3)), Err(Error::Capacity(_))));
    }

    #[test]
    fn pinned_pages_are_never_evicted() {
        let dir = tempfile::tempdir().unwrap();
        let pool = BufferPool::new(2 * 32, dir.path()).unwrap();
        let (a, b, c) = (PageKey::new(1, 0, 0), PageKey::new(1, 0, 1), PageKey::new(1, 0, 2));
        pool.put(a, block(1.0, 2)).unwrap();
        pool.put(b, block(2.0, 2)).unwrap();
        pool.pin(a).unwrap();
        pool.put(c, block(3.0, 2)).unwrap();
        assert!(pool.is_resident(a));
        assert!(!pool.is_resident(b));
        pool.pin(c).unwrap();
        assert!(matches!(pool.get(b), Err(Error::Capacity(_))));
        pool.unpin(c).unwrap();
        assert_eq!(data(&pool.get(b).unwrap()), vec![2.0; 4]);
        assert!(pool.is_resident(a));
        assert!(pool.unpin(c).is_err());
    }

    #[test]
    fn row_pages_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let schema = Schema::new(vec![
            Field::new("id", DataType::Int),
            Field::new("x", DataType::Float),
            Field::new("s", DataType::String),
        ]);
        let rows = (0..10)
            .map(|i| vec![Value::Int(i), Value::Float(i as f64 / 3.0), Value::Str(format!("r\"{i}"))])
            .collect();
        let rel = RowRelation::from_rows(schema, rows).unwrap().with_keys(vec![0]).unwrap();
        let size = rel.size_bytes();
        let pool = BufferPool::new(size, dir.path()).unwrap();
        pool.put(PageKey::new(2, 0, 0), Page::Rows(Arc::new(rel.clone()))).unwrap();
        pool.put(PageKey::new(2, 1, 0), Page::Rows(Arc::new(rel.clone()))).unwrap();
        assert!(dir.path().join("2_0.rows").exists());
        let back = pool.get(PageKey::new(2, 0, 0)).unwrap().into_rows().unwrap();
        assert_eq!(*back, rel);
    }

    #[test]
    fn drop_relation_clears_disk() {
        let dir = tempfile::tempdir().unwrap();
        let pool = BufferPool::new(32, dir.path()).unwrap();
        pool.put(PageKey::new(5, 0, 0), block(1.0, 2)).unwrap();
        pool.put(PageKey::new(5, 0, 1), block(1.0, 2)).unwrap();
        pool.drop_relation(5);
        assert_eq!(pool.resident_bytes(), 0);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn random_trace_against_map_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let budget = 5 * 8 * 16;
        let pool = BufferPool::new(budget, dir.path()).unwrap();
        let mut oracle: HashMap<PageKey, Vec<f64>> = HashMap::new();
        let mut pins: HashMap<PageKey, u32> = HashMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for step in 0..10_000 {
            let key = PageKey::new(1, rng.random_range(0..12), 0);
            match rng.random_range(0..10) {
                0..=3 => {
                    let n = rng.random_range(1..=16);
                    let vals: Vec<f64> = (0..n).map(|_| rng.random()).collect();
                    let blk = TensorBlock::new(key.row as usize, 0, 1, n, vals.clone()).unwrap();
                    match pool.put(key, Page::Block(Arc::new(blk))) {
                        Ok(()) => {
                            oracle.insert(key, vals);
                        }
                        Err(Error::Capacity(_)) => {}
                        Err(e) => panic!("step {step}: {e}"),
                    }
                }
                4..=7 => match (pool.get(key), oracle.get(&key)) {
                    (Ok(p), Some(want)) => assert_eq!(&data(&p), want, "step {step}"),
                    (Err(Error::NotFound(_)), None) => {}
                    (Err(Error::Capacity(_)), Some(_)) => {}
                    (got, want) => panic!("step {step}: {got:?} vs {want:?}"),
                },
                8 => {
                    let pinned: u32 = pins.values().sum();
                    if oracle.contains_key(&key) && pinned < 3 && pool.pin(key).is_ok() {
                        *pins.entry(key).or_default() += 1;
                    }
                }
                _ => {
                    if let Some(n) = pins.get_mut(&key).filter(|n| **n > 0) {
                        pool.unpin(key).unwrap();
                        *n -= 1;
                    }
                }
            }
            assert!(pool.resident_bytes() <= budget, "step {step}");
            for (k, n) in &pins {
                if *n > 0 {
                    assert!(pool.is_resident(*k), "step {step}: pinned page evicted");
                }
            }
        }
    }
}
