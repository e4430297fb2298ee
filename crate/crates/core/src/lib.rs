//! In-memory MapReduce over a segmented concurrent hash map.
//!
//! The engine has three layers:
//!
//! * [`ConcurrentMap`]: a single-node map whose inserts never block. Each
//!   segment is a linear-probing table behind a try-lock; inserts that find
//!   the latch taken land in a per-thread cache that is merged at sync.
//! * [`DistMap`]: one main map per node plus one pending map per remote node,
//!   so values are combined locally before a single all-to-all shuffle.
//! * [`DistRange`]: an index range split across nodes and threads that drives
//!   a mapper into a `DistMap` and synchronizes it.
//!
//! Nodes talk through the [`Cluster`] trait, implemented by an in-process
//! simulated cluster and by a TCP mesh. The [`wordcount`] module builds the
//! word-count benchmark on top of all of this.
//!
//! ```
//! use mpmr::{spawn_local_cluster, DistMap, DistMapConfig, DistRange, Sum};
//!
//! let totals = spawn_local_cluster(2, |cluster| {
//!     let mut target = DistMap::<i64, _>::new(cluster, &DistMapConfig::default()).unwrap();
//!     DistRange::new(0, 100, 1)
//!         .unwrap()
//!         .mapreduce(|i, out| out.emit(b"total", i), &Sum, &mut target)
//!         .unwrap();
//!     target.gather_to_root().unwrap()
//! })
//! .unwrap();
//! assert_eq!(totals[0], vec![(b"total".to_vec(), 4950)]);
//! ```

pub mod concurrent_map;
pub mod dist_map;
pub mod hash;
pub mod mapreduce;
pub mod reducer;
pub mod transport;
pub mod wordcount;

pub use concurrent_map::{segment_of, ConcurrentMap, ConfigError, ProbingTable};
pub use dist_map::{owner, DistMap, DistMapConfig, DistMapError, DistWriter, MapMetrics, Phase};
pub use hash::{hash_key, HashValue};
pub use mapreduce::{thread_schedule, DistRange, MapReduceError};
pub use reducer::{Max, Reducer, Sum};
pub use transport::{
    spawn_local_cluster, Cluster, LocalCluster, NodeId, SocketCluster, TransportError,
};
