//! Node-partitioned hash map with eventual consistency.
//!
//! Each node keeps one *main* [`ConcurrentMap`] for the keys it owns and one
//! *pending* `ConcurrentMap` per remote node for keys owned elsewhere. Every
//! insert is merged locally with the reducer, so repeated keys collapse
//! before they ever leave the node. [`DistMap::sync`] then ships each pending
//! map to its owner in a single all-to-all round and the owner merges what it
//! receives into its main map in parallel.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::concurrent_map::{ConcurrentMap, ConfigError, Writer};
use crate::hash::{hash_key, HashValue};
use crate::reducer::Reducer;
use crate::transport::codec::{encode_entry, CodecError, EntryIter, FixedWidth};
use crate::transport::{all_reduce_sum, Cluster, NodeId, TransportError};

/// Node that owns keys with hash `hash` in an `n`-node cluster: `hash mod n`.
#[inline]
pub fn owner(hash: HashValue, n: usize) -> NodeId {
    NodeId((hash.0 % n as u64) as usize)
}

#[derive(Debug, Error)]
pub enum DistMapError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("bad shuffle payload from {from}: {source}")]
    Codec {
        from: NodeId,
        #[source]
        source: CodecError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Map,
    Barrier,
    CacheSync,
    Shuffle,
    Merge,
}

/// Per-node counters for one job. All counters only grow.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MapMetrics {
    /// Inserts issued by mappers on this node.
    pub emits: u64,
    /// Inserts diverted to a thread cache because the segment was latched.
    pub cache_flushes: u64,
    /// Entries sent to remote nodes.
    pub shuffled_entries: u64,
    /// Payload bytes sent to remote nodes, excluding frame headers.
    pub shuffled_bytes: u64,
    /// Entries sent, by destination node. The self slot stays zero.
    pub shuffled_entries_to: Vec<u64>,
    pub map_time: Duration,
    pub cache_sync_time: Duration,
    pub shuffle_time: Duration,
    pub merge_time: Duration,
    /// Phases in the order they ran.
    pub phases: Vec<Phase>,
}

impl MapMetrics {
    /// Counters and timings as little-endian `u64`s. Phase order is not
    /// carried.
    pub fn encode(&self) -> Vec<u8> {
        let mut fields = vec![
            self.emits,
            self.cache_flushes,
            self.shuffled_entries,
            self.shuffled_bytes,
            self.map_time.as_nanos() as u64,
            self.cache_sync_time.as_nanos() as u64,
            self.shuffle_time.as_nanos() as u64,
            self.merge_time.as_nanos() as u64,
        ];
        fields.extend(&self.shuffled_entries_to);
        fields.iter().flat_map(|f| f.to_le_bytes()).collect()
    }

    pub fn decode(bytes: &[u8]) -> Option<MapMetrics> {
        if !bytes.len().is_multiple_of(8) || bytes.len() < 64 {
            return None;
        }
        let f: Vec<u64> = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Some(MapMetrics {
            emits: f[0],
            cache_flushes: f[1],
            shuffled_entries: f[2],
            shuffled_bytes: f[3],
            map_time: Duration::from_nanos(f[4]),
            cache_sync_time: Duration::from_nanos(f[5]),
            shuffle_time: Duration::from_nanos(f[6]),
            merge_time: Duration::from_nanos(f[7]),
            shuffled_entries_to: f[8..].to_vec(),
            phases: Vec::new(),
        })
    }
}

/// Creation parameters for a [`DistMap`].
#[derive(Debug, Clone)]
pub struct DistMapConfig {
    pub segments: usize,
    pub segment_capacity: usize,
    pub threads: usize,
    pub cache_watermark: Option<usize>,
}

impl Default for DistMapConfig {
    fn default() -> Self {
        DistMapConfig {
            segments: 64,
            segment_capacity: 1024,
            threads: 1,
            cache_watermark: None,
        }
    }
}

/// The maps one node holds: `main` plus one pending map per remote node.
///
/// Split out from [`DistMap`] so mapper threads can share it without
/// sharing the cluster handle.
pub struct NodeMaps<V> {
    me: usize,
    main: ConcurrentMap<V>,
    // Indexed by node id; `None` at our own index.
    pending: Vec<Option<ConcurrentMap<V>>>,
}

impl<V> NodeMaps<V> {
    /// Takes `thread`'s caches in the main and every pending map.
    pub fn writer<'a, R>(&'a self, thread: usize, reducer: &'a R) -> DistWriter<'a, V, R>
    where
        R: Reducer<V> + ?Sized,
    {
        let writers = self
            .pending
            .iter()
            .map(|p| match p {
                Some(map) => map.writer(thread, reducer),
                None => self.main.writer(thread, reducer),
            })
            .collect();
        DistWriter { writers }
    }

    pub fn main(&self) -> &ConcurrentMap<V> {
        &self.main
    }

    /// The pending map for keys owned by `node`; `None` for this node.
    pub fn pending(&self, node: NodeId) -> Option<&ConcurrentMap<V>> {
        self.pending[node.index()].as_ref()
    }

    fn all_maps(&self) -> impl Iterator<Item = &ConcurrentMap<V>> {
        std::iter::once(&self.main).chain(self.pending.iter().flatten())
    }
}

/// A mapper thread's insert handle into a [`DistMap`].
pub struct DistWriter<'a, V, R: ?Sized> {
    writers: Vec<Writer<'a, V, R>>,
}

impl<V, R> DistWriter<'_, V, R>
where
    R: Reducer<V> + ?Sized,
{
    /// Merges `(key, value)` into the main map if this node owns the key,
    /// otherwise into the owner's pending map.
    #[inline]
    pub fn emit(&mut self, key: &[u8], value: V) {
        let h = hash_key(key);
        let dest = owner(h, self.writers.len());
        self.writers[dest.index()].insert_hashed(h, key, value);
    }
}

pub struct DistMap<V, C> {
    cluster: C,
    maps: NodeMaps<V>,
    threads: usize,
    metrics: MapMetrics,
}

impl<V, C: Cluster> DistMap<V, C> {
    /// Creates this node's share of the map. Pending maps get half the
    /// segments of the main map (at least one).
    pub fn new(cluster: C, config: &DistMapConfig) -> Result<Self, ConfigError> {
        let n = cluster.size();
        let me = cluster.self_id().index();
        let build = |segments| {
            ConcurrentMap::new(segments, config.segment_capacity, config.threads)
                .map(|m| m.with_cache_watermark(config.cache_watermark))
        };
        let main = build(config.segments)?;
        let pending_segments = (config.segments / 2).max(1);
        let pending = (0..n)
            .map(|j| (j != me).then(|| build(pending_segments)).transpose())
            .collect::<Result<_, _>>()?;
        Ok(DistMap {
            cluster,
            maps: NodeMaps { me, main, pending },
            threads: config.threads,
            metrics: MapMetrics {
                shuffled_entries_to: vec![0; n],
                ..MapMetrics::default()
            },
        })
    }

    pub fn cluster(&self) -> &C {
        &self.cluster
    }

    pub fn cluster_mut(&mut self) -> &mut C {
        &mut self.cluster
    }

    pub fn into_cluster(self) -> C {
        self.cluster
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn maps(&self) -> &NodeMaps<V> {
        &self.maps
    }

    pub fn metrics(&self) -> &MapMetrics {
        &self.metrics
    }

    pub(crate) fn metrics_mut(&mut self) -> &mut MapMetrics {
        &mut self.metrics
    }

    pub fn writer<'a, R>(&'a self, thread: usize, reducer: &'a R) -> DistWriter<'a, V, R>
    where
        R: Reducer<V> + ?Sized,
    {
        self.maps.writer(thread, reducer)
    }

    /// Single-insert convenience over [`DistMap::writer`].
    pub fn async_set<R>(&self, thread: usize, key: &[u8], value: V, reducer: &R)
    where
        R: Reducer<V> + ?Sized,
    {
        self.writer(thread, reducer).emit(key, value);
    }

    /// Extension point for exchanging pending entries while mappers are
    /// still running. Only end-of-phase exchange via [`DistMap::sync`] is
    /// implemented, so this does nothing.
    pub fn poll_periodic_sync(&self) {}

    /// Reads a key from this node's main map. Keys owned by other nodes are
    /// never found here.
    pub fn get_local(&self, key: &[u8]) -> Option<V>
    where
        V: Clone,
    {
        self.maps.main.get(key)
    }

    pub fn local_size(&self) -> usize {
        self.maps.main.size()
    }

    pub fn local_entries(&mut self) -> impl Iterator<Item = (&[u8], &V)> + '_ {
        self.maps.main.entries()
    }

    /// Total entries across the cluster. Collective.
    pub fn global_size(&mut self) -> Result<u64, TransportError> {
        let local = self.local_size() as u64;
        all_reduce_sum(&mut self.cluster, local)
    }
}

impl<V, C> DistMap<V, C>
where
    V: FixedWidth + Send,
    C: Cluster,
{
    /// Makes every node's main map hold exactly the keys it owns, with all
    /// values merged. Collective; mapper threads must be idle.
    pub fn sync<R>(&mut self, reducer: &R) -> Result<(), DistMapError>
    where
        R: Reducer<V> + ?Sized,
    {
        let n = self.cluster.size();
        let me = self.maps.me;

        let started = Instant::now();
        self.maps.main.sync(reducer);
        for p in self.maps.pending.iter_mut().flatten() {
            p.sync(reducer);
        }
        let (emits, flushes) = self.maps.all_maps().fold((0, 0), |(e, f), m| {
            let s = m.stats();
            (e + s.emits, f + s.cache_flushes)
        });
        self.metrics.emits = emits;
        self.metrics.cache_flushes = flushes;
        self.metrics.cache_sync_time += started.elapsed();
        self.metrics.phases.push(Phase::CacheSync);

        let started = Instant::now();
        let mut outgoing = vec![Vec::new(); n];
        for (dest, p) in self.maps.pending.iter_mut().enumerate() {
            let Some(p) = p else { continue };
            let buf = &mut outgoing[dest];
            let mut count = 0u64;
            for (_, key, value) in p.drain() {
                encode_entry(buf, &key, &value);
                count += 1;
            }
            self.metrics.shuffled_entries_to[dest] += count;
            self.metrics.shuffled_entries += count;
            self.metrics.shuffled_bytes += buf.len() as u64;
        }
        let incoming = self.cluster.all_to_all(outgoing)?;
        self.metrics.shuffle_time += started.elapsed();
        self.metrics.phases.push(Phase::Shuffle);

        let started = Instant::now();
        let mut received = Vec::new();
        for (src, payload) in incoming.iter().enumerate() {
            if src == me {
                continue;
            }
            for entry in EntryIter::<V>::new(payload) {
                let entry = entry.map_err(|source| DistMapError::Codec {
                    from: NodeId(src),
                    source,
                })?;
                received.push(entry);
            }
        }
        self.maps
            .main
            .parallel_bulk_insert(received, reducer, self.threads);
        self.metrics.merge_time += started.elapsed();
        self.metrics.phases.push(Phase::Merge);
        Ok(())
    }

    /// Collects every node's entries on node 0. Other nodes get an empty
    /// vector. Collective; call after [`DistMap::sync`].
    pub fn gather_to_root(&mut self) -> Result<Vec<(Vec<u8>, V)>, DistMapError> {
        let n = self.cluster.size();
        let mut outgoing = vec![Vec::new(); n];
        for (k, v) in self.maps.main.entries() {
            encode_entry(&mut outgoing[0], k, v);
        }
        let incoming = self.cluster.all_to_all(outgoing)?;
        if self.cluster.self_id() != NodeId(0) {
            return Ok(Vec::new());
        }
        let mut all = Vec::new();
        for (src, payload) in incoming.iter().enumerate() {
            for entry in EntryIter::<V>::new(payload) {
                let (k, v) = entry.map_err(|source| DistMapError::Codec {
                    from: NodeId(src),
                    source,
                })?;
                all.push((k.to_vec(), v));
            }
        }
        Ok(all)
    }
}
