use std::any::Any;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::{check_row, Cluster, NodeId, TransportError};

/// How often a waiting node re-checks whether its peers are still alive.
const LIVENESS_POLL: Duration = Duration::from_millis(20);

struct Envelope {
    round: u64,
    source: usize,
    payload: Vec<u8>,
}

/// A node of an in-process cluster. Created by [`spawn_local_cluster`].
pub struct LocalCluster {
    id: usize,
    peers: Vec<Option<Sender<Envelope>>>,
    inbox: Receiver<Envelope>,
    // Messages from peers that are already one round ahead.
    early: Vec<Envelope>,
    round: u64,
    alive: Arc<[AtomicBool]>,
}

impl LocalCluster {
    fn place(&self, incoming: &mut [Option<Vec<u8>>], env: Envelope) -> Result<(), TransportError> {
        let peer = NodeId(env.source);
        if env.round != self.round {
            return Err(TransportError::Malformed {
                peer,
                reason: format!("round {} arrived during round {}", env.round, self.round),
            });
        }
        if incoming[env.source].replace(env.payload).is_some() {
            return Err(TransportError::Malformed {
                peer,
                reason: format!("duplicate payload in round {}", self.round),
            });
        }
        Ok(())
    }

    fn accept(
        &mut self,
        incoming: &mut [Option<Vec<u8>>],
        env: Envelope,
    ) -> Result<(), TransportError> {
        if env.round > self.round {
            self.early.push(env);
            Ok(())
        } else {
            self.place(incoming, env)
        }
    }
}

impl Cluster for LocalCluster {
    fn self_id(&self) -> NodeId {
        NodeId(self.id)
    }

    fn size(&self) -> usize {
        self.peers.len()
    }

    fn round(&self) -> u64 {
        self.round
    }

    fn all_to_all(&mut self, outgoing: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>, TransportError> {
        let n = self.size();
        check_row(n, &outgoing)?;
        let mut incoming: Vec<Option<Vec<u8>>> = vec![None; n];
        for (dest, payload) in outgoing.into_iter().enumerate() {
            match &self.peers[dest] {
                None => incoming[dest] = Some(payload),
                Some(tx) => tx
                    .send(Envelope {
                        round: self.round,
                        source: self.id,
                        payload,
                    })
                    .map_err(|_| TransportError::PeerDisconnected { peer: NodeId(dest) })?,
            }
        }

        let (ready, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.early)
            .into_iter()
            .partition(|e| e.round == self.round);
        self.early = later;
        for env in ready {
            self.place(&mut incoming, env)?;
        }

        while let Some(missing) = incoming.iter().position(Option::is_none) {
            match self.inbox.recv_timeout(LIVENESS_POLL) {
                Ok(env) => self.accept(&mut incoming, env)?,
                Err(RecvTimeoutError::Timeout) => {
                    if !self.alive[missing].load(Ordering::Acquire) {
                        // It may have sent before leaving.
                        while let Ok(env) = self.inbox.try_recv() {
                            self.accept(&mut incoming, env)?;
                        }
                        if incoming[missing].is_none() {
                            return Err(TransportError::PeerDisconnected {
                                peer: NodeId(missing),
                            });
                        }
                    }
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(TransportError::PeerDisconnected {
                        peer: NodeId(missing),
                    })
                }
            }
        }
        self.round += 1;
        Ok(incoming.into_iter().map(Option::unwrap).collect())
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        self.alive[self.id].store(false, Ordering::Release);
    }
}

/// Runs `node_main` once per node on `n` threads, each with its own
/// [`LocalCluster`] handle, and returns the results in node order.
///
/// A node that panics or returns early makes its peers' pending collective
/// calls fail with [`TransportError::PeerDisconnected`].
pub fn spawn_local_cluster<R, F>(n: usize, node_main: F) -> Result<Vec<R>, TransportError>
where
    F: Fn(LocalCluster) -> R + Sync,
    R: Send,
{
    if n == 0 {
        return Err(TransportError::Config(
            "cluster needs at least one node".into(),
        ));
    }
    let alive: Arc<[AtomicBool]> = (0..n).map(|_| AtomicBool::new(true)).collect();
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..n).map(|_| mpsc::channel()).unzip();
    let nodes: Vec<LocalCluster> = receivers
        .into_iter()
        .enumerate()
        .map(|(id, inbox)| LocalCluster {
            id,
            peers: senders
                .iter()
                .enumerate()
                .map(|(j, tx)| (j != id).then(|| tx.clone()))
                .collect(),
            inbox,
            early: Vec::new(),
            round: 0,
            alive: Arc::clone(&alive),
        })
        .collect();
    drop(senders);

    let node_main = &node_main;
    thread::scope(|scope| {
        let handles: Vec<_> = nodes
            .into_iter()
            .map(|node| {
                thread::Builder::new()
                    .name(format!("node-{}", node.id))
                    .spawn_scoped(scope, move || node_main(node))
                    .expect("failed to spawn node thread")
            })
            .collect();
        let mut results = Vec::with_capacity(n);
        let mut failure = None;
        for (id, h) in handles.into_iter().enumerate() {
            match h.join() {
                Ok(r) => results.push(r),
                Err(payload) => {
                    failure.get_or_insert(TransportError::NodePanicked {
                        node: NodeId(id),
                        message: panic_message(&*payload),
                    });
                }
            }
        }
        match failure {
            Some(e) => Err(e),
            None => Ok(results),
        }
    })
}

pub(crate) fn panic_message(payload: &(dyn Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".to_string()
    }
}
