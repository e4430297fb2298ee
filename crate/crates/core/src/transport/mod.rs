//! Cluster membership and collective exchange.
//!
//! A [`Cluster`] is one node's handle onto an `n`-node job. Two
//! implementations exist: [`LocalCluster`], which runs every node as a thread
//! of the current process over in-memory channels, and [`SocketCluster`],
//! which connects separate processes over a full TCP mesh.

pub mod codec;
mod local;
mod socket;

pub(crate) use local::panic_message;
pub use local::{spawn_local_cluster, LocalCluster};
pub use socket::{read_endpoints, FrameHeader, SocketCluster, FRAME_HEADER_LEN};

use std::fmt;
use std::io;

use thiserror::Error;

/// Position of a node in the cluster, in `[0, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub usize);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node {}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("{peer} disconnected")]
    PeerDisconnected { peer: NodeId },
    #[error("malformed frame from {peer}: {reason}")]
    Malformed { peer: NodeId, reason: String },
    #[error("i/o error with {peer}: {source}")]
    Io {
        peer: NodeId,
        #[source]
        source: io::Error,
    },
    #[error("all_to_all needs one payload per node ({expected}), got {got}")]
    RowLength { expected: usize, got: usize },
    #[error("{node} panicked: {message}")]
    NodePanicked { node: NodeId, message: String },
    #[error("invalid cluster configuration: {0}")]
    Config(String),
}

/// One node's view of the cluster.
///
/// Collective calls (`all_to_all`, `barrier`) must be made by every node in
/// the same order; a node blocks until all peers have joined the round.
pub trait Cluster: Send {
    fn self_id(&self) -> NodeId;

    fn size(&self) -> usize;

    /// Number of completed collective rounds.
    fn round(&self) -> u64;

    /// Sends `outgoing[j]` to node `j` and returns `incoming` where
    /// `incoming[j]` is what node `j` sent to this node. The self slot is
    /// passed through locally.
    fn all_to_all(&mut self, outgoing: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>, TransportError>;

    fn barrier(&mut self) -> Result<(), TransportError> {
        let n = self.size();
        self.all_to_all(vec![Vec::new(); n]).map(drop)
    }
}

impl<C: Cluster + ?Sized> Cluster for &mut C {
    fn self_id(&self) -> NodeId {
        (**self).self_id()
    }
    fn size(&self) -> usize {
        (**self).size()
    }
    fn round(&self) -> u64 {
        (**self).round()
    }
    fn all_to_all(&mut self, outgoing: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>, TransportError> {
        (**self).all_to_all(outgoing)
    }
    fn barrier(&mut self) -> Result<(), TransportError> {
        (**self).barrier()
    }
}

impl<C: Cluster + ?Sized> Cluster for Box<C> {
    fn self_id(&self) -> NodeId {
        (**self).self_id()
    }
    fn size(&self) -> usize {
        (**self).size()
    }
    fn round(&self) -> u64 {
        (**self).round()
    }
    fn all_to_all(&mut self, outgoing: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>, TransportError> {
        (**self).all_to_all(outgoing)
    }
    fn barrier(&mut self) -> Result<(), TransportError> {
        (**self).barrier()
    }
}

/// Sends the same payload to every node; returns every node's payload.
pub fn all_gather<C: Cluster + ?Sized>(
    cluster: &mut C,
    payload: Vec<u8>,
) -> Result<Vec<Vec<u8>>, TransportError> {
    let n = cluster.size();
    cluster.all_to_all(vec![payload; n])
}

/// Sums one `u64` per node across the cluster, exchanged as 8-byte
/// little-endian counts.
pub fn all_reduce_sum<C: Cluster + ?Sized>(
    cluster: &mut C,
    value: u64,
) -> Result<u64, TransportError> {
    let incoming = all_gather(cluster, value.to_le_bytes().to_vec())?;
    incoming
        .iter()
        .enumerate()
        .try_fold(0u64, |acc, (src, bytes)| {
            let count: [u8; 8] =
                bytes
                    .as_slice()
                    .try_into()
                    .map_err(|_| TransportError::Malformed {
                        peer: NodeId(src),
                        reason: format!("expected an 8-byte count, got {} bytes", bytes.len()),
                    })?;
            Ok(acc.wrapping_add(u64::from_le_bytes(count)))
        })
}

fn check_row(n: usize, outgoing: &[Vec<u8>]) -> Result<(), TransportError> {
    if outgoing.len() != n {
        return Err(TransportError::RowLength {
            expected: n,
            got: outgoing.len(),
        });
    }
    Ok(())
}
