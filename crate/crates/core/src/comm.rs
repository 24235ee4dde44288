//! Data and image partitioning, the segment allgather, and the analytical
//! per-node memory and communication models.

use std::collections::VecDeque;
use std::io::Write;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::quantizers::{CodecError, QuantizedMessage, HEADER_BYTES};

/// Round-robin assignment of projection angles to nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnglePartition {
    pub assignment: Vec<Vec<usize>>,
}

impl AnglePartition {
    pub fn nodes(&self) -> usize {
        self.assignment.len()
    }
}

/// Node `m` receives angle indices `m, m + M, m + 2M, …`.
pub fn partition_angles(n_angles: usize, nodes: usize) -> Result<AnglePartition> {
    if nodes == 0 || nodes > n_angles {
        return Err(Error::Config(format!(
            "cannot split {n_angles} angles over {nodes} nodes"
        )));
    }
    let assignment = (0..nodes)
        .map(|m| (m..n_angles).step_by(nodes).collect())
        .collect();
    Ok(AnglePartition { assignment })
}

/// Contiguous row-block segments of the flattened image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentPartition {
    pub width: usize,
    pub ranges: Vec<Range<usize>>,
}

impl SegmentPartition {
    pub fn nodes(&self) -> usize {
        self.ranges.len()
    }

    /// `(rows, cols)` of segment `m`.
    pub fn block_shape(&self, m: usize) -> (usize, usize) {
        (self.ranges[m].len() / self.width, self.width)
    }
}

/// Splits `n` pixels of rows `width` long into `nodes` row blocks whose
/// heights differ by at most one, taller blocks first.
pub fn partition_image(n: usize, width: usize, nodes: usize) -> Result<SegmentPartition> {
    if width == 0 || !n.is_multiple_of(width) {
        return Err(Error::Config(format!(
            "{n} pixels do not form rows of width {width}"
        )));
    }
    let height = n / width;
    if nodes == 0 || nodes > height {
        return Err(Error::Config(format!(
            "cannot split {height} image rows over {nodes} nodes"
        )));
    }
    let (base, extra) = (height / nodes, height % nodes);
    let mut ranges = Vec::with_capacity(nodes);
    let mut row = 0;
    for m in 0..nodes {
        let rows = base + usize::from(m < extra);
        ranges.push(row * width..(row + rows) * width);
        row += rows;
    }
    Ok(SegmentPartition { width, ranges })
}

/// Per-node memory footprint `D/M + 3X`: a data share plus `u_m`, `λ_m` and `x`.
pub fn memory_model(nodes: usize, data_bytes: f64, image_bytes: f64) -> f64 {
    assert!(nodes >= 1);
    data_bytes / nodes as f64 + 3.0 * image_bytes
}

/// Per-node traffic per iteration `2(M − 1)/M · X`, half sent and half received.
pub fn comm_model(nodes: usize, image_bytes: f64) -> f64 {
    assert!(nodes >= 1);
    2.0 * (nodes as f64 - 1.0) / nodes as f64 * image_bytes
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CommError {
    #[error("collective aborted by node {node}: {reason}")]
    Aborted { node: usize, reason: String },
    #[error("node {node} timed out waiting for node {peer}")]
    Timeout { node: usize, peer: usize },
    #[error("node id {0} outside the group")]
    UnknownNode(usize),
    #[error("bad frame from node {peer}: {source}")]
    Frame {
        peer: usize,
        #[source]
        source: CodecError,
    },
}

impl CommError {
    /// The node blamed for the failure.
    pub fn culprit(&self) -> Option<usize> {
        match *self {
            CommError::Aborted { node, .. } => Some(node),
            CommError::Timeout { peer, .. } | CommError::Frame { peer, .. } => Some(peer),
            CommError::UnknownNode(_) => None,
        }
    }
}

/// Point-to-point and collective primitives shared by node workers.
pub trait Transport: Send + Sync {
    fn nodes(&self) -> usize;

    /// Queues `frame` on the link `from → to`. Links are FIFO.
    fn send(&self, from: usize, to: usize, frame: Vec<u8>) -> Result<(), CommError>;

    /// Blocks until the next frame on the link `from → node` arrives.
    fn recv(&self, node: usize, from: usize) -> Result<Vec<u8>, CommError>;

    fn barrier(&self, node: usize) -> Result<(), CommError>;

    /// Wakes every blocked participant with [`CommError::Aborted`].
    fn abort(&self, node: usize, reason: &str);
}

/// In-process transport with per-link byte counters.
pub struct MessageBus {
    nodes: usize,
    timeout: Duration,
    state: Mutex<BusState>,
    signal: Condvar,
    link_bytes: Vec<AtomicU64>,
}

struct BusState {
    queues: Vec<VecDeque<Vec<u8>>>,
    aborted: Option<(usize, String)>,
    barrier_arrived: usize,
    barrier_generation: u64,
}

impl MessageBus {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

    pub fn new(nodes: usize) -> Self {
        Self::with_timeout(nodes, Self::DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(nodes: usize, timeout: Duration) -> Self {
        MessageBus {
            nodes,
            timeout,
            state: Mutex::new(BusState {
                queues: (0..nodes * nodes).map(|_| VecDeque::new()).collect(),
                aborted: None,
                barrier_arrived: 0,
                barrier_generation: 0,
            }),
            signal: Condvar::new(),
            link_bytes: (0..nodes * nodes).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    /// Total bytes ever queued on `from → to`.
    pub fn link_bytes(&self, from: usize, to: usize) -> u64 {
        self.link_bytes[from * self.nodes + to].load(Ordering::Relaxed)
    }

    pub fn total_bytes(&self) -> u64 {
        self.link_bytes.iter().map(|b| b.load(Ordering::Relaxed)).sum()
    }

    fn check(&self, node: usize) -> Result<(), CommError> {
        if node >= self.nodes {
            Err(CommError::UnknownNode(node))
        } else {
            Ok(())
        }
    }
}

impl Transport for MessageBus {
    fn nodes(&self) -> usize {
        self.nodes
    }

    fn send(&self, from: usize, to: usize, frame: Vec<u8>) -> Result<(), CommError> {
        self.check(from)?;
        self.check(to)?;
        let mut state = self.state.lock().unwrap();
        if let Some((node, reason)) = &state.aborted {
            return Err(CommError::Aborted {
                node: *node,
                reason: reason.clone(),
            });
        }
        self.link_bytes[from * self.nodes + to].fetch_add(frame.len() as u64, Ordering::Relaxed);
        state.queues[from * self.nodes + to].push_back(frame);
        self.signal.notify_all();
        Ok(())
    }

    fn recv(&self, node: usize, from: usize) -> Result<Vec<u8>, CommError> {
        self.check(node)?;
        self.check(from)?;
        let deadline = Instant::now() + self.timeout;
        let mut state = self.state.lock().unwrap();
        loop {
            if let Some(frame) = state.queues[from * self.nodes + node].pop_front() {
                return Ok(frame);
            }
            if let Some((origin, reason)) = &state.aborted {
                return Err(CommError::Aborted {
                    node: *origin,
                    reason: reason.clone(),
                });
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(CommError::Timeout { node, peer: from });
            }
            state = self.signal.wait_timeout(state, deadline - now).unwrap().0;
        }
    }

    fn barrier(&self, node: usize) -> Result<(), CommError> {
        self.check(node)?;
        let deadline = Instant::now() + self.timeout;
        let mut state = self.state.lock().unwrap();
        let generation = state.barrier_generation;
        state.barrier_arrived += 1;
        if state.barrier_arrived == self.nodes {
            state.barrier_arrived = 0;
            state.barrier_generation += 1;
            self.signal.notify_all();
            return Ok(());
        }
        while state.barrier_generation == generation {
            if let Some((origin, reason)) = &state.aborted {
                return Err(CommError::Aborted {
                    node: *origin,
                    reason: reason.clone(),
                });
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(CommError::Timeout { node, peer: node });
            }
            state = self.signal.wait_timeout(state, deadline - now).unwrap().0;
        }
        Ok(())
    }

    fn abort(&self, node: usize, reason: &str) {
        let mut state = self.state.lock().unwrap();
        if state.aborted.is_none() {
            state.aborted = Some((node, reason.to_string()));
        }
        self.signal.notify_all();
    }
}

/// Traffic of one node in one outer iteration. `bytes_*` count message
/// bodies (metadata and payload); frame headers are counted separately.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CommEntry {
    pub iteration: usize,
    pub node: usize,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub header_sent: u64,
    pub header_received: u64,
}

impl CommEntry {
    pub fn wire_sent(&self) -> u64 {
        self.bytes_sent + self.header_sent
    }

    pub fn wire_received(&self) -> u64 {
        self.bytes_received + self.header_received
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommStats {
    entries: Vec<CommEntry>,
}

#[derive(Serialize)]
struct CsvRow {
    iteration: usize,
    node: usize,
    bytes_sent: u64,
    bytes_received: u64,
    header_bytes: u64,
}

impl CommStats {
    pub fn push(&mut self, entry: CommEntry) {
        self.entries.push(entry);
    }

    /// Combines per-worker records, ordered by iteration then node.
    pub fn merge(parts: impl IntoIterator<Item = CommStats>) -> CommStats {
        let mut entries: Vec<CommEntry> = parts.into_iter().flat_map(|s| s.entries).collect();
        entries.sort_by_key(|e| (e.iteration, e.node));
        CommStats { entries }
    }

    pub fn entries(&self) -> &[CommEntry] {
        &self.entries
    }

    pub fn for_iteration(&self, iteration: usize) -> impl Iterator<Item = &CommEntry> {
        self.entries.iter().filter(move |e| e.iteration == iteration)
    }

    /// Sum over every entry.
    pub fn totals(&self) -> CommEntry {
        sum_entries(self.entries.iter())
    }

    pub fn iteration_totals(&self, iteration: usize) -> CommEntry {
        let mut t = sum_entries(self.for_iteration(iteration));
        t.iteration = iteration;
        t
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        for e in &self.entries {
            w.serialize(CsvRow {
                iteration: e.iteration,
                node: e.node,
                bytes_sent: e.bytes_sent,
                bytes_received: e.bytes_received,
                header_bytes: e.header_sent + e.header_received,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

fn sum_entries<'a>(it: impl Iterator<Item = &'a CommEntry>) -> CommEntry {
    it.fold(CommEntry::default(), |mut acc, e| {
        acc.bytes_sent += e.bytes_sent;
        acc.bytes_received += e.bytes_received;
        acc.header_sent += e.header_sent;
        acc.header_received += e.header_received;
        acc
    })
}

/// Exchanges every node's encoded segment with every other node.
///
/// Each node must call this exactly once per iteration. Returns all messages
/// in node order (node `m` owns segment `m`) together with this node's traffic.
/// Completing the call implies every peer has reached the same iteration.
pub fn allgather_segments(
    transport: &dyn Transport,
    node: usize,
    iteration: usize,
    local: &QuantizedMessage,
) -> Result<(Vec<QuantizedMessage>, CommEntry), CommError> {
    let nodes = transport.nodes();
    if node >= nodes {
        return Err(CommError::UnknownNode(node));
    }
    let frame = local.to_bytes();
    let peers = nodes as u64 - 1;
    let mut entry = CommEntry {
        iteration,
        node,
        bytes_sent: local.byte_size() as u64 * peers,
        header_sent: HEADER_BYTES as u64 * peers,
        ..CommEntry::default()
    };
    for peer in (0..nodes).filter(|&p| p != node) {
        transport.send(node, peer, frame.clone())?;
    }
    let mut gathered = Vec::with_capacity(nodes);
    for peer in 0..nodes {
        if peer == node {
            gathered.push(local.clone());
            continue;
        }
        let bytes = transport.recv(node, peer)?;
        let msg = QuantizedMessage::from_bytes(&bytes)
            .map_err(|source| CommError::Frame { peer, source })?;
        entry.bytes_received += msg.byte_size() as u64;
        entry.header_received += HEADER_BYTES as u64;
        gathered.push(msg);
    }
    Ok((gathered, entry))
}
