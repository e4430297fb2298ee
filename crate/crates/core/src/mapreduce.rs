//! Index ranges distributed over nodes and threads, and the MapReduce driver.

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Instant;

use thiserror::Error;

use crate::dist_map::{DistMap, DistMapError, DistWriter, Phase};
use crate::reducer::Reducer;
use crate::transport::codec::FixedWidth;
use crate::transport::panic_message;
use crate::transport::{Cluster, NodeId, TransportError};

pub const DEFAULT_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum MapReduceError {
    #[error("range step must be positive, got {0}")]
    InvalidStep(i64),
    #[error("chunk size must be at least 1")]
    InvalidChunk,
    #[error("mapper panicked on worker thread {thread}: {message}")]
    MapperPanicked { thread: usize, message: String },
    #[error("transport failed at the map barrier: {0}")]
    Barrier(#[source] TransportError),
    #[error("sync failed: {0}")]
    Sync(#[from] DistMapError),
}

/// The integers `start, start + step, ...` strictly below `end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DistRange {
    start: i64,
    end: i64,
    step: i64,
}

impl DistRange {
    pub fn new(start: i64, end: i64, step: i64) -> Result<Self, MapReduceError> {
        if step <= 0 {
            return Err(MapReduceError::InvalidStep(step));
        }
        Ok(DistRange { start, end, step })
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    pub fn end(&self) -> i64 {
        self.end
    }

    pub fn step(&self) -> i64 {
        self.step
    }

    pub fn len(&self) -> usize {
        if self.start >= self.end {
            return 0;
        }
        let span = (self.end as i128 - self.start as i128) as u128;
        span.div_ceil(self.step as u128) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The index at `ordinal` position. Panics if out of range.
    #[inline]
    pub fn get(&self, ordinal: usize) -> i64 {
        assert!(ordinal < self.len(), "ordinal {ordinal} out of range");
        self.start + ordinal as i64 * self.step
    }

    pub fn iter(&self) -> impl Iterator<Item = i64> {
        let r = *self;
        (0..r.len()).map(move |i| r.start + i as i64 * r.step)
    }

    /// The contiguous block of this range handled by `node`.
    ///
    /// With `L` indices, node `k` gets ordinals
    /// `[k * ceil(L/n), min((k+1) * ceil(L/n), L))`.
    pub fn node_partition(&self, node: NodeId, n: usize) -> DistRange {
        let len = self.len();
        let block = len.div_ceil(n.max(1));
        let lo = (node.index() * block).min(len);
        let hi = ((node.index() + 1) * block).min(len);
        let start = self.start + lo as i64 * self.step;
        DistRange {
            start,
            end: start + (hi - lo) as i64 * self.step,
            step: self.step,
        }
    }

    /// Runs `mapper` over this node's block of the range, emitting into
    /// `target`, then synchronizes `target` across the cluster. Collective.
    pub fn mapreduce<V, C, R, M>(
        &self,
        mapper: M,
        reducer: &R,
        target: &mut DistMap<V, C>,
    ) -> Result<(), MapReduceError>
    where
        V: FixedWidth + Send,
        C: Cluster,
        R: Reducer<V>,
        M: Fn(i64, &mut DistWriter<'_, V, R>) + Sync,
    {
        self.mapreduce_with(mapper, reducer, target, DEFAULT_CHUNK)
    }

    /// [`DistRange::mapreduce`] with an explicit scheduling chunk size.
    pub fn mapreduce_with<V, C, R, M>(
        &self,
        mapper: M,
        reducer: &R,
        target: &mut DistMap<V, C>,
        chunk: usize,
    ) -> Result<(), MapReduceError>
    where
        V: FixedWidth + Send,
        C: Cluster,
        R: Reducer<V>,
        M: Fn(i64, &mut DistWriter<'_, V, R>) + Sync,
    {
        if chunk == 0 {
            return Err(MapReduceError::InvalidChunk);
        }
        let node = target.cluster().self_id();
        let block = self.node_partition(node, target.cluster().size());

        let started = Instant::now();
        let maps = target.maps();
        let mapper = &mapper;
        thread_schedule(block.len(), target.threads(), chunk, |thread, cursor| {
            let mut out = maps.writer(thread, reducer);
            while let Some(ordinals) = cursor.next_chunk() {
                for i in ordinals {
                    mapper(block.get(i), &mut out);
                }
            }
        })?;
        let metrics = target.metrics_mut();
        metrics.map_time += started.elapsed();
        metrics.phases.push(Phase::Map);

        target
            .cluster_mut()
            .barrier()
            .map_err(MapReduceError::Barrier)?;
        target.metrics_mut().phases.push(Phase::Barrier);

        target.sync(reducer)?;
        Ok(())
    }
}

/// Shared cursor handing out ordinal chunks to worker threads.
pub struct ChunkCursor {
    next: AtomicUsize,
    len: usize,
    chunk: usize,
}

impl ChunkCursor {
    pub fn new(len: usize, chunk: usize) -> Self {
        assert!(chunk > 0, "chunk size must be at least 1");
        ChunkCursor {
            next: AtomicUsize::new(0),
            len,
            chunk,
        }
    }

    /// The next unclaimed chunk, or `None` when the range is exhausted.
    #[inline]
    pub fn next_chunk(&self) -> Option<Range<usize>> {
        let lo = self.next.fetch_add(self.chunk, Ordering::Relaxed);
        if lo >= self.len {
            return None;
        }
        Some(lo..(lo + self.chunk).min(self.len))
    }
}

/// Runs `worker(thread_id, cursor)` on `num_threads` threads that pull
/// chunks of `chunk` ordinals from a shared cursor over `0..len`.
///
/// Every ordinal is claimed exactly once. A panicking worker is reported as
/// [`MapReduceError::MapperPanicked`] after all workers have stopped.
pub fn thread_schedule<W>(
    len: usize,
    num_threads: usize,
    chunk: usize,
    worker: W,
) -> Result<(), MapReduceError>
where
    W: Fn(usize, &ChunkCursor) + Sync,
{
    if chunk == 0 {
        return Err(MapReduceError::InvalidChunk);
    }
    let cursor = ChunkCursor::new(len, chunk);
    let (cursor, worker) = (&cursor, &worker);
    thread::scope(|scope| {
        let handles: Vec<_> = (0..num_threads.max(1))
            .map(|t| {
                thread::Builder::new()
                    .name(format!("mapper-{t}"))
                    .spawn_scoped(scope, move || worker(t, cursor))
                    .expect("failed to spawn mapper thread")
            })
            .collect();
        let mut failure = None;
        for (t, h) in handles.into_iter().enumerate() {
            if let Err(payload) = h.join() {
                failure.get_or_insert(MapReduceError::MapperPanicked {
                    thread: t,
                    message: panic_message(&*payload),
                });
            }
        }
        failure.map_or(Ok(()), Err)
    })
}
