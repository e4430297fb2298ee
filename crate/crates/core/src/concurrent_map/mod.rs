//! Single-node concurrent hash map with non-blocking inserts.
//!
//! The map has a *data portion* made of `S` segments, each a
//! [`ProbingTable`] guarded by its own latch and owning one contiguous slice
//! of the 64-bit hash space, and a *thread cache portion* holding one private
//! table per registered worker thread.
//!
//! An insert try-acquires the latch of the key's segment. If another thread
//! holds it, the entry is merged into the caller's thread cache instead, so
//! an insert never waits. [`ConcurrentMap::sync`] folds every cache back into
//! the segments; reads are only guaranteed complete after a sync.

mod table;

pub use table::ProbingTable;

use std::ops::Range;
use std::thread;

use crossbeam_utils::CachePadded;
use parking_lot::{Mutex, MutexGuard};
use thiserror::Error;

use crate::hash::{hash_key, HashValue};
use crate::reducer::Reducer;

/// Initial capacity of each thread cache.
const CACHE_CAPACITY: usize = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{what} must be a power of two, got {value}")]
    NotPowerOfTwo { what: &'static str, value: usize },
    #[error("{what} must be at least {min}, got {value}")]
    TooSmall {
        what: &'static str,
        value: usize,
        min: usize,
    },
}

/// Index of the segment whose hash range contains `hash`: the top
/// `log2(num_segments)` bits.
///
/// `num_segments` must be a power of two.
#[inline]
pub fn segment_of(hash: HashValue, num_segments: usize) -> usize {
    debug_assert!(num_segments.is_power_of_two());
    segment_index(hash, num_segments.trailing_zeros())
}

#[inline]
fn segment_index(hash: HashValue, bits: u32) -> usize {
    if bits == 0 {
        0
    } else {
        (hash.0 >> (64 - bits)) as usize
    }
}

/// Per-thread overflow table plus the thread's counters.
struct ThreadCache<V> {
    table: ProbingTable<V>,
    emits: u64,
    cache_flushes: u64,
}

/// Insert counters summed over all thread caches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    /// Calls to `async_set`.
    pub emits: u64,
    /// Calls that found their segment latched and went to the thread cache.
    pub cache_flushes: u64,
}

pub struct ConcurrentMap<V> {
    segments: Box<[CachePadded<Mutex<ProbingTable<V>>>]>,
    caches: Box<[CachePadded<Mutex<ThreadCache<V>>>]>,
    segment_bits: u32,
    cache_watermark: Option<usize>,
}

impl<V> ConcurrentMap<V> {
    /// Creates an empty map with `num_segments` segments of initial capacity
    /// `segment_capacity` and one thread cache per worker thread.
    pub fn new(
        num_segments: usize,
        segment_capacity: usize,
        num_threads: usize,
    ) -> Result<Self, ConfigError> {
        if !num_segments.is_power_of_two() {
            return Err(ConfigError::NotPowerOfTwo {
                what: "segment count",
                value: num_segments,
            });
        }
        if segment_capacity < 2 {
            return Err(ConfigError::TooSmall {
                what: "segment capacity",
                value: segment_capacity,
                min: 2,
            });
        }
        if !segment_capacity.is_power_of_two() {
            return Err(ConfigError::NotPowerOfTwo {
                what: "segment capacity",
                value: segment_capacity,
            });
        }
        if num_threads == 0 {
            return Err(ConfigError::TooSmall {
                what: "thread count",
                value: 0,
                min: 1,
            });
        }
        let segments = (0..num_segments)
            .map(|_| CachePadded::new(Mutex::new(ProbingTable::with_capacity(segment_capacity))))
            .collect();
        let caches = (0..num_threads)
            .map(|_| {
                CachePadded::new(Mutex::new(ThreadCache {
                    table: ProbingTable::with_capacity(CACHE_CAPACITY),
                    emits: 0,
                    cache_flushes: 0,
                }))
            })
            .collect();
        Ok(ConcurrentMap {
            segments,
            caches,
            segment_bits: num_segments.trailing_zeros(),
            cache_watermark: None,
        })
    }

    /// Flushes a thread's cache into the segments once it holds more than
    /// `limit` entries. That flush takes segment latches with a blocking
    /// acquire. Off by default.
    pub fn with_cache_watermark(mut self, limit: Option<usize>) -> Self {
        self.cache_watermark = limit;
        self
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn num_threads(&self) -> usize {
        self.caches.len()
    }

    /// Half-open hash range `[lo, hi)` owned by segment `index`.
    pub fn segment_range(&self, index: usize) -> Range<u128> {
        let width = (1u128 << 64) >> self.segment_bits;
        let lo = width * index as u128;
        lo..lo + width
    }

    /// Takes exclusive use of `thread`'s cache for a run of inserts.
    ///
    /// # Panics
    ///
    /// If `thread` was not registered at construction, or if a writer for the
    /// same thread is already live.
    pub fn writer<'a, R>(&'a self, thread: usize, reducer: &'a R) -> Writer<'a, V, R>
    where
        R: Reducer<V> + ?Sized,
    {
        let slot = self.caches.get(thread).unwrap_or_else(|| {
            panic!(
                "thread {thread} not registered ({} threads)",
                self.caches.len()
            )
        });
        let cache = slot
            .try_lock()
            .unwrap_or_else(|| panic!("thread cache {thread} already has a live writer"));
        Writer {
            map: self,
            cache,
            reducer,
        }
    }

    /// Merges `(key, value)` into the map on behalf of worker `thread`.
    ///
    /// Never blocks on a segment latch. Prefer [`ConcurrentMap::writer`] for
    /// bulk work; this re-acquires the thread cache on every call.
    pub fn async_set<R>(&self, thread: usize, key: &[u8], value: V, reducer: &R)
    where
        R: Reducer<V> + ?Sized,
    {
        self.writer(thread, reducer).insert(key, value);
    }

    /// Reads a key from the data portion. Entries still sitting in thread
    /// caches are not visible until the next [`ConcurrentMap::sync`].
    pub fn get(&self, key: &[u8]) -> Option<V>
    where
        V: Clone,
    {
        let h = hash_key(key);
        self.segments[segment_index(h, self.segment_bits)]
            .lock()
            .get(h, key)
            .cloned()
    }

    /// Read access to segment `index`, holding its latch until the guard is
    /// dropped. Inserts routed to that segment meanwhile go to thread caches.
    pub fn segment(&self, index: usize) -> SegmentGuard<'_, V> {
        SegmentGuard(self.segments[index].lock())
    }

    /// Number of entries in the data portion.
    pub fn size(&self) -> usize {
        self.segments.iter().map(|s| s.lock().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.size() == 0
    }

    /// Entries currently held in `thread`'s cache.
    pub fn cache_len(&self, thread: usize) -> usize {
        self.caches[thread].lock().table.len()
    }

    pub fn stats(&self) -> CacheStats {
        self.caches.iter().fold(CacheStats::default(), |acc, c| {
            let c = c.lock();
            CacheStats {
                emits: acc.emits + c.emits,
                cache_flushes: acc.cache_flushes + c.cache_flushes,
            }
        })
    }

    /// Iterates the data portion in unspecified order.
    pub fn entries(&mut self) -> impl Iterator<Item = (&[u8], &V)> + '_ {
        self.segments
            .iter_mut()
            .flat_map(|s| s.get_mut().iter().map(|(_, k, v)| (k, v)))
    }

    /// Segment tables in index order, for inspection at quiescent points.
    pub fn segment_tables(&mut self) -> impl Iterator<Item = &ProbingTable<V>> + '_ {
        self.segments.iter_mut().map(|s| &*s.get_mut())
    }

    /// Removes every entry of the data portion. Counters are kept.
    pub fn drain(&mut self) -> impl Iterator<Item = (HashValue, Box<[u8]>, V)> + '_ {
        self.segments.iter_mut().flat_map(|s| s.get_mut().drain())
    }
}

impl<V: Send> ConcurrentMap<V> {
    /// Folds every thread cache into its owning segments and empties the
    /// caches. Uses one worker per registered thread.
    pub fn sync<R>(&mut self, reducer: &R)
    where
        R: Reducer<V> + ?Sized,
    {
        let mut pending = Vec::new();
        for cache in self.caches.iter_mut() {
            pending.extend(cache.get_mut().table.drain());
        }
        if pending.is_empty() {
            return;
        }
        let threads = self.caches.len();
        self.bulk_insert_hashed(pending, reducer, threads);
    }

    /// Inserts `entries` using up to `num_threads` workers.
    ///
    /// Entries are bucketed by segment and each worker owns a disjoint set of
    /// segments, so no latches are taken. The result is the same as calling
    /// `async_set` for each entry and then `sync`.
    pub fn parallel_bulk_insert<I, K, R>(&mut self, entries: I, reducer: &R, num_threads: usize)
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<[u8]> + Into<Box<[u8]>> + Send,
        R: Reducer<V> + ?Sized,
    {
        let hashed: Vec<_> = entries
            .into_iter()
            .map(|(k, v)| (hash_key(k.as_ref()), k, v))
            .collect();
        self.bulk_insert_hashed(hashed, reducer, num_threads);
    }

    pub(crate) fn bulk_insert_hashed<K, R>(
        &mut self,
        entries: Vec<(HashValue, K, V)>,
        reducer: &R,
        num_threads: usize,
    ) where
        K: AsRef<[u8]> + Into<Box<[u8]>> + Send,
        R: Reducer<V> + ?Sized,
    {
        if entries.is_empty() {
            return;
        }
        let bits = self.segment_bits;
        let workers = num_threads.clamp(1, self.segments.len());
        if workers == 1 {
            for (h, k, v) in entries {
                self.segments[segment_index(h, bits)]
                    .get_mut()
                    .probe_insert(h, k, v, reducer);
            }
            return;
        }

        let mut buckets: Vec<Vec<(HashValue, K, V)>> =
            (0..self.segments.len()).map(|_| Vec::new()).collect();
        for e in entries {
            buckets[segment_index(e.0, bits)].push(e);
        }
        let mut groups: Vec<Vec<_>> = (0..workers).map(|_| Vec::new()).collect();
        for (i, work) in self.segments.iter_mut().zip(buckets).enumerate() {
            groups[i % workers].push(work);
        }
        thread::scope(|scope| {
            for group in groups {
                scope.spawn(move || {
                    for (segment, bucket) in group {
                        let table = segment.get_mut();
                        for (h, k, v) in bucket {
                            table.probe_insert(h, k, v, reducer);
                        }
                    }
                });
            }
        });
    }
}

impl<V> std::fmt::Debug for ConcurrentMap<V> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConcurrentMap")
            .field("segments", &self.segments.len())
            .field("threads", &self.caches.len())
            .finish()
    }
}

pub struct SegmentGuard<'a, V>(MutexGuard<'a, ProbingTable<V>>);

impl<V> std::ops::Deref for SegmentGuard<'_, V> {
    type Target = ProbingTable<V>;

    fn deref(&self) -> &ProbingTable<V> {
        &self.0
    }
}

/// A worker thread's insert handle into a [`ConcurrentMap`].
///
/// Holds the thread's cache for its lifetime; at most one writer per thread
/// can exist at a time.
pub struct Writer<'a, V, R: ?Sized> {
    map: &'a ConcurrentMap<V>,
    cache: MutexGuard<'a, ThreadCache<V>>,
    reducer: &'a R,
}

impl<V, R> Writer<'_, V, R>
where
    R: Reducer<V> + ?Sized,
{
    #[inline]
    pub fn insert(&mut self, key: &[u8], value: V) {
        self.insert_hashed(hash_key(key), key, value);
    }

    /// Like [`Writer::insert`] with a precomputed hash of `key`.
    #[inline]
    pub fn insert_hashed(&mut self, hash: HashValue, key: &[u8], value: V) {
        self.cache.emits += 1;
        let segment = &self.map.segments[segment_index(hash, self.map.segment_bits)];
        if let Some(mut table) = segment.try_lock() {
            table.probe_insert(hash, key, value, self.reducer);
            return;
        }
        self.cache.cache_flushes += 1;
        self.cache
            .table
            .probe_insert(hash, key, value, self.reducer);
        if let Some(limit) = self.map.cache_watermark {
            if self.cache.table.len() > limit {
                self.flush();
            }
        }
    }

    /// Moves this thread's cached entries into the segments, blocking on
    /// latches as needed.
    pub fn flush(&mut self) {
        let bits = self.map.segment_bits;
        for (h, k, v) in self.cache.table.drain() {
            self.map.segments[segment_index(h, bits)]
                .lock()
                .probe_insert(h, k, v, self.reducer);
        }
    }

    pub fn cached(&self) -> usize {
        self.cache.table.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reducer::Sum;
    use std::sync::Barrier;

    #[test]
    fn create_partitions_hash_space() {
        let m = ConcurrentMap::<i64>::new(4, 16, 2).unwrap();
        assert_eq!(m.num_segments(), 4);
        assert_eq!(m.num_threads(), 2);
        let q = 1u128 << 62;
        assert_eq!(m.segment_range(0), 0..q);
        assert_eq!(m.segment_range(1), q..2 * q);
        assert_eq!(m.segment_range(2), 2 * q..3 * q);
        assert_eq!(m.segment_range(3), 3 * q..4 * q);

        let one = ConcurrentMap::<i64>::new(1, 2, 1).unwrap();
        assert_eq!(one.segment_range(0), 0..1u128 << 64);
    }

    #[test]
    fn create_rejects_bad_config() {
        assert_eq!(
            ConcurrentMap::<i64>::new(3, 16, 1).unwrap_err(),
            ConfigError::NotPowerOfTwo {
                what: "segment count",
                value: 3
            }
        );
        assert!(ConcurrentMap::<i64>::new(0, 16, 1).is_err());
        assert!(ConcurrentMap::<i64>::new(4, 12, 1).is_err());
        assert!(ConcurrentMap::<i64>::new(4, 1, 1).is_err());
        assert!(ConcurrentMap::<i64>::new(4, 16, 0).is_err());
    }

    #[test]
    fn segment_of_uses_top_bits() {
        assert_eq!(segment_of(HashValue(0), 4), 0);
        assert_eq!(segment_of(HashValue(u64::MAX), 4), 3);
        assert_eq!(segment_of(HashValue(0x4000_0000_0000_0000), 4), 1);
        assert_eq!(segment_of(HashValue(u64::MAX), 1), 0);
    }

    #[test]
    fn repeated_sets_combine() {
        let mut m = ConcurrentMap::new(4, 16, 1).unwrap();
        for _ in 0..3 {
            m.async_set(0, b"a", 1i64, &Sum);
        }
        m.sync(&Sum);
        assert_eq!(m.get(b"a"), Some(3));
        assert_eq!(m.get(b"b"), None);
        assert_eq!(m.stats().emits, 3);
    }

    #[test]
    fn uncontended_set_goes_to_segment() {
        let m = ConcurrentMap::new(4, 16, 1).unwrap();
        m.async_set(0, b"x", 7i64, &Sum);
        assert_eq!(m.size(), 1);
        assert_eq!(m.cache_len(0), 0);
        assert_eq!(m.get(b"x"), Some(7));
    }

    #[test]
    fn latched_segment_routes_to_cache() {
        let mut m = ConcurrentMap::new(1, 16, 2).unwrap();
        m.async_set(0, b"a", 3i64, &Sum);
        {
            let _held = m.segment(0);
            let mut w = m.writer(1, &Sum);
            w.insert(b"a", 2);
            assert_eq!(w.cached(), 1);
        }
        // Eventual consistency: the cached part is invisible until sync.
        assert_eq!(m.get(b"a"), Some(3));
        assert_eq!(m.stats().cache_flushes, 1);
        m.sync(&Sum);
        assert_eq!(m.get(b"a"), Some(5));
        assert_eq!(m.cache_len(1), 0);
        assert_eq!(m.size(), 1);
    }

    #[test]
    fn sync_on_empty_caches_is_noop() {
        let mut m = ConcurrentMap::new(2, 4, 2).unwrap();
        m.async_set(0, b"k", 1i64, &Sum);
        m.sync(&Sum);
        m.sync(&Sum);
        assert_eq!(m.size(), 1);
        assert_eq!(m.get(b"k"), Some(1));
    }

    #[test]
    fn watermark_flushes_cache() {
        let m = ConcurrentMap::new(1, 16, 2)
            .unwrap()
            .with_cache_watermark(Some(2));
        let locked = Barrier::new(2);
        thread::scope(|s| {
            s.spawn(|| {
                let held = m.segment(0);
                locked.wait();
                thread::sleep(std::time::Duration::from_millis(50));
                drop(held);
            });
            locked.wait();
            let mut w = m.writer(1, &Sum);
            w.insert(b"a", 1i64);
            w.insert(b"b", 1);
            assert_eq!(w.cached(), 2);
            // Third entry crosses the watermark; flush waits for the latch.
            w.insert(b"c", 1);
            assert_eq!(w.cached(), 0);
        });
        assert_eq!(m.size(), 3);
        assert_eq!(m.stats().cache_flushes, 3);
    }

    #[test]
    #[should_panic(expected = "already has a live writer")]
    fn duplicate_writer_panics() {
        let m = ConcurrentMap::<i64>::new(1, 4, 1).unwrap();
        let _a = m.writer(0, &Sum);
        let _b = m.writer(0, &Sum);
    }

    #[test]
    fn bulk_insert() {
        let mut m = ConcurrentMap::new(4, 4, 2).unwrap();
        m.parallel_bulk_insert(Vec::<(Vec<u8>, i64)>::new(), &Sum, 4);
        assert_eq!(m.size(), 0);
        m.parallel_bulk_insert(vec![(&b"a"[..], 1i64), (&b"a"[..], 1)], &Sum, 4);
        assert_eq!(m.get(b"a"), Some(2));
        assert_eq!(m.size(), 1);
    }

    #[test]
    fn entries_and_size() {
        let mut m = ConcurrentMap::<i64>::new(2, 4, 1).unwrap();
        assert_eq!(m.size(), 0);
        assert_eq!(m.entries().count(), 0);
        m.async_set(0, b"a", 1, &Sum);
        m.async_set(0, b"b", 2, &Sum);
        m.sync(&Sum);
        assert_eq!(m.size(), 2);
        let mut got: Vec<_> = m.entries().map(|(k, v)| (k.to_vec(), *v)).collect();
        got.sort();
        assert_eq!(got, vec![(b"a".to_vec(), 1), (b"b".to_vec(), 2)]);
    }

    #[test]
    fn contended_single_segment_conserves_total() {
        const THREADS: usize = 4;
        const PER_THREAD: i64 = 100_000;
        let mut m = ConcurrentMap::new(1, 16, THREADS).unwrap();
        let start = Barrier::new(THREADS);
        thread::scope(|s| {
            for t in 0..THREADS {
                let (m, start) = (&m, &start);
                s.spawn(move || {
                    let mut w = m.writer(t, &Sum);
                    start.wait();
                    for _ in 0..PER_THREAD {
                        w.insert(b"k", 1i64);
                    }
                });
            }
        });
        m.sync(&Sum);
        assert_eq!(m.get(b"k"), Some(THREADS as i64 * PER_THREAD));
        assert_eq!(m.stats().emits, THREADS as u64 * PER_THREAD as u64);
    }
}
