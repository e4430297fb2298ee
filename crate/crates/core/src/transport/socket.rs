use std::fs;
use std::io::{self, ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use super::{check_row, Cluster, NodeId, TransportError};

/// Bytes in a frame header: round (`u32`), source (`u32`), payload length (`u64`).
pub const FRAME_HEADER_LEN: usize = 16;

const RETRY_INTERVAL: Duration = Duration::from_millis(25);

/// Header preceding every payload on the wire. All fields little-endian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub round: u32,
    pub source: u32,
    pub len: u64,
}

impl FrameHeader {
    pub fn to_bytes(self) -> [u8; FRAME_HEADER_LEN] {
        let mut b = [0u8; FRAME_HEADER_LEN];
        b[0..4].copy_from_slice(&self.round.to_le_bytes());
        b[4..8].copy_from_slice(&self.source.to_le_bytes());
        b[8..16].copy_from_slice(&self.len.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; FRAME_HEADER_LEN]) -> Self {
        FrameHeader {
            round: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            source: u32::from_le_bytes(b[4..8].try_into().unwrap()),
            len: u64::from_le_bytes(b[8..16].try_into().unwrap()),
        }
    }
}

/// Reads a one-endpoint-per-line file. Blank lines and `#` comments are
/// skipped; line order defines node ids.
pub fn read_endpoints(path: &Path) -> io::Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// A node of a multi-process cluster connected by a full TCP mesh.
pub struct SocketCluster {
    id: usize,
    streams: Vec<Option<TcpStream>>,
    round: u64,
}

impl SocketCluster {
    /// Joins the cluster described by `endpoints` as node `self_id`.
    ///
    /// Binds `endpoints[self_id]`, dials every lower-numbered node and
    /// accepts a connection from every higher-numbered one. Each dialer
    /// announces its id with a little-endian `u32`. Fails if the mesh is not
    /// complete within `timeout`.
    pub fn connect(
        endpoints: &[String],
        self_id: usize,
        timeout: Duration,
    ) -> Result<Self, TransportError> {
        let n = endpoints.len();
        if self_id >= n {
            return Err(TransportError::Config(format!(
                "self id {self_id} out of range for {n} endpoints"
            )));
        }
        let me = NodeId(self_id);
        let listener = TcpListener::bind(&endpoints[self_id])
            .map_err(|source| TransportError::Io { peer: me, source })?;
        Self::with_listener(listener, endpoints, self_id, timeout)
    }

    /// Like [`SocketCluster::connect`] with an already-bound listener for
    /// this node's endpoint.
    pub fn with_listener(
        listener: TcpListener,
        endpoints: &[String],
        self_id: usize,
        timeout: Duration,
    ) -> Result<Self, TransportError> {
        let n = endpoints.len();
        let deadline = Instant::now() + timeout;
        let mut streams: Vec<Option<TcpStream>> = (0..n).map(|_| None).collect();

        for (peer, addr) in endpoints.iter().enumerate().take(self_id) {
            let mut stream = dial(addr, NodeId(peer), deadline)?;
            let io_err = |source| TransportError::Io {
                peer: NodeId(peer),
                source,
            };
            stream.set_nodelay(true).map_err(io_err)?;
            stream
                .write_all(&(self_id as u32).to_le_bytes())
                .map_err(io_err)?;
            streams[peer] = Some(stream);
        }

        let me = NodeId(self_id);
        listener
            .set_nonblocking(true)
            .map_err(|source| TransportError::Io { peer: me, source })?;
        let mut expected = n - 1 - self_id;
        while expected > 0 {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream
                        .set_nonblocking(false)
                        .and_then(|_| stream.set_nodelay(true))
                        .map_err(|source| TransportError::Io { peer: me, source })?;
                    stream
                        .set_read_timeout(Some(
                            deadline
                                .saturating_duration_since(Instant::now())
                                .max(RETRY_INTERVAL),
                        ))
                        .map_err(|source| TransportError::Io { peer: me, source })?;
                    let mut id = [0u8; 4];
                    stream
                        .read_exact(&mut id)
                        .map_err(|source| TransportError::Io { peer: me, source })?;
                    stream
                        .set_read_timeout(None)
                        .map_err(|source| TransportError::Io { peer: me, source })?;
                    let peer = u32::from_le_bytes(id) as usize;
                    if peer <= self_id || peer >= n || streams[peer].is_some() {
                        return Err(TransportError::Malformed {
                            peer: NodeId(peer),
                            reason: format!("unexpected handshake id {peer}"),
                        });
                    }
                    streams[peer] = Some(stream);
                    expected -= 1;
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        let peer = (self_id + 1..n).find(|&j| streams[j].is_none()).unwrap();
                        return Err(TransportError::Io {
                            peer: NodeId(peer),
                            source: io::Error::new(ErrorKind::TimedOut, "peer never connected"),
                        });
                    }
                    thread::sleep(RETRY_INTERVAL);
                }
                Err(source) => return Err(TransportError::Io { peer: me, source }),
            }
        }

        Ok(SocketCluster {
            id: self_id,
            streams,
            round: 0,
        })
    }

    fn read_frame(&self, peer: usize) -> Result<Vec<u8>, TransportError> {
        let p = NodeId(peer);
        let mut stream = self.streams[peer].as_ref().expect("peer stream");
        let mut header = [0u8; FRAME_HEADER_LEN];
        read_exact_or_disconnect(&mut stream, &mut header, p)?;
        let header = FrameHeader::from_bytes(&header);
        if header.round != self.round as u32 || header.source as usize != peer {
            return Err(TransportError::Malformed {
                peer: p,
                reason: format!(
                    "expected round {} from {}, got round {} from {}",
                    self.round as u32, peer, header.round, header.source
                ),
            });
        }
        let len = usize::try_from(header.len).map_err(|_| TransportError::Malformed {
            peer: p,
            reason: format!("payload length {} does not fit in memory", header.len),
        })?;
        let mut payload = Vec::new();
        let got = (&mut stream)
            .take(header.len)
            .read_to_end(&mut payload)
            .map_err(|source| classify(p, source))?;
        if got != len {
            return Err(TransportError::PeerDisconnected { peer: p });
        }
        Ok(payload)
    }
}

fn dial(addr: &str, peer: NodeId, deadline: Instant) -> Result<TcpStream, TransportError> {
    loop {
        let attempt = addr.to_socket_addrs().and_then(|mut addrs| {
            addrs
                .next()
                .ok_or_else(|| {
                    io::Error::new(ErrorKind::InvalidInput, "endpoint resolves to nothing")
                })
                .and_then(TcpStream::connect)
        });
        match attempt {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() < deadline && e.kind() != ErrorKind::InvalidInput => {
                thread::sleep(RETRY_INTERVAL)
            }
            Err(source) => return Err(TransportError::Io { peer, source }),
        }
    }
}

fn read_exact_or_disconnect(
    stream: &mut &TcpStream,
    buf: &mut [u8],
    peer: NodeId,
) -> Result<(), TransportError> {
    stream
        .read_exact(buf)
        .map_err(|source| classify(peer, source))
}

fn classify(peer: NodeId, source: io::Error) -> TransportError {
    match source.kind() {
        ErrorKind::UnexpectedEof
        | ErrorKind::BrokenPipe
        | ErrorKind::ConnectionReset
        | ErrorKind::ConnectionAborted => TransportError::PeerDisconnected { peer },
        _ => TransportError::Io { peer, source },
    }
}

fn write_frame(mut stream: &TcpStream, header: FrameHeader, payload: &[u8]) -> io::Result<()> {
    stream.write_all(&header.to_bytes())?;
    stream.write_all(payload)?;
    stream.flush()
}

impl Cluster for SocketCluster {
    fn self_id(&self) -> NodeId {
        NodeId(self.id)
    }

    fn size(&self) -> usize {
        self.streams.len()
    }

    fn round(&self) -> u64 {
        self.round
    }

    fn all_to_all(&mut self, mut outgoing: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>, TransportError> {
        let n = self.size();
        check_row(n, &outgoing)?;
        let own = std::mem::take(&mut outgoing[self.id]);
        let round = self.round as u32;
        let source = self.id as u32;

        // Writers run on their own threads so that two nodes sending large
        // rows to each other cannot both stall on full socket buffers.
        let incoming = thread::scope(|scope| {
            let writers: Vec<_> = outgoing
                .iter()
                .enumerate()
                .filter(|&(dest, _)| dest != self.id)
                .map(|(dest, payload)| {
                    let stream = self.streams[dest].as_ref().expect("peer stream");
                    let header = FrameHeader {
                        round,
                        source,
                        len: payload.len() as u64,
                    };
                    (
                        dest,
                        scope.spawn(move || write_frame(stream, header, payload)),
                    )
                })
                .collect();

            let mut incoming = Vec::with_capacity(n);
            let mut first_err = None;
            for peer in 0..n {
                if peer == self.id {
                    incoming.push(Vec::new());
                    continue;
                }
                match self.read_frame(peer) {
                    Ok(p) => incoming.push(p),
                    Err(e) => {
                        first_err = Some(e);
                        break;
                    }
                }
            }
            for (dest, w) in writers {
                let res = w.join().expect("writer thread panicked");
                if let (Err(source), None) = (res, &first_err) {
                    first_err = Some(classify(NodeId(dest), source));
                }
            }
            match first_err {
                Some(e) => Err(e),
                None => Ok(incoming),
            }
        });
        let mut incoming = incoming?;
        incoming[self.id] = own;
        self.round += 1;
        Ok(incoming)
    }
}
