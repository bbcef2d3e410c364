//! Simulated classic CAN bus with identifier arbitration, acceptance
//! filters, fault injection and automatic retransmission, plus a
//! length-prefixed segmented transport for payloads above 8 bytes.
//!
//! Segmented wire format (one CAN id per direction):
//!
//! ```text
//! header: [0xA0, len_lo, len_hi, crc0, crc1, crc2, crc3, 0x00]   crc = CRC-32 of payload, LE
//! body:   [seq, up to 7 payload bytes]                            seq = 0, 1, 2, ... mod 256
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrity::crc32;
use crate::time::{SimDuration, SimTime};

pub const MAX_STANDARD_ID: u16 = 0x7FF;
pub const MAX_DLC: usize = 8;
pub const SEGMENT_HEADER_TAG: u8 = 0xA0;
pub const SEGMENT_BODY_CHUNK: usize = 7;
pub const MAX_SEGMENTED_PAYLOAD: usize = u16::MAX as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u16);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameKind {
    Data,
    ErrorFrame,
}

/// A classic CAN data frame with an 11-bit identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CanFrame {
    pub id: u16,
    pub dlc: u8,
    pub data: [u8; MAX_DLC],
    pub kind: FrameKind,
}

impl CanFrame {
    pub fn new(id: u16, payload: &[u8]) -> Result<Self, CanError> {
        if payload.len() > MAX_DLC {
            return Err(CanError::MalformedFrame(format!("{} data bytes", payload.len())));
        }
        let mut data = [0u8; MAX_DLC];
        data[..payload.len()].copy_from_slice(payload);
        let f = CanFrame { id, dlc: payload.len() as u8, data, kind: FrameKind::Data };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), CanError> {
        if self.id > MAX_STANDARD_ID {
            return Err(CanError::MalformedFrame(format!("id {:#x} exceeds 11 bits", self.id)));
        }
        if self.dlc as usize > MAX_DLC {
            return Err(CanError::MalformedFrame(format!("dlc {}", self.dlc)));
        }
        Ok(())
    }

    pub fn payload(&self) -> &[u8] {
        &self.data[..(self.dlc as usize).min(MAX_DLC)]
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CanError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("node {0} already attached")]
    DuplicateNode(NodeId),
    #[error("node {0} not attached")]
    UnknownNode(NodeId),
    #[error("invalid bus config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("empty payload")]
    EmptyPayload,
    #[error("payload of {0} bytes exceeds 65535")]
    PayloadTooLarge(usize),
    #[error("sequence gap: expected {expected}, got {got}")]
    SequenceGap { expected: u8, got: u8 },
    #[error("payload checksum mismatch: header {expected:#010x}, computed {actual:#010x}")]
    ChecksumMismatch { expected: u32, actual: u32 },
    #[error("frame outside a transfer")]
    UnexpectedFrame,
    #[error(transparent)]
    Bus(#[from] CanError),
}

/// Accepts a frame when `id & mask == match_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceFilter {
    pub mask: u16,
    pub match_id: u16,
}

impl AcceptanceFilter {
    pub fn exact(id: u16) -> Self {
        AcceptanceFilter { mask: MAX_STANDARD_ID, match_id: id }
    }

    pub fn accept_all() -> Self {
        AcceptanceFilter { mask: 0, match_id: 0 }
    }

    pub fn accepts(&self, id: u16) -> bool {
        id & self.mask == self.match_id
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BusConfig {
    pub frame_time_us: u64,
    pub corruption_probability: f64,
    pub drop_probability: f64,
    pub rng_seed: u64,
    pub max_auto_retransmit: u32,
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig {
            frame_time_us: 500,
            corruption_probability: 0.0,
            drop_probability: 0.0,
            rng_seed: 0,
            max_auto_retransmit: 3,
        }
    }
}

impl BusConfig {
    pub fn lossless() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), CanError> {
        for (name, p) in
            [("corruption_probability", self.corruption_probability), ("drop_probability", self.drop_probability)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(CanError::InvalidConfig(format!("{name} = {p} not in [0, 1]")));
            }
        }
        if self.frame_time_us == 0 {
            return Err(CanError::InvalidConfig("frame_time_us must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeBusStats {
    pub frames_sent: u64,
    pub bytes_sent: u64,
    pub attempts: u64,
    pub retransmissions: u64,
    pub bus_off_events: u64,
    pub frames_received: u64,
}

#[derive(Debug, Clone, Copy)]
struct Queued {
    frame: CanFrame,
    order: u64,
    retries: u32,
}

#[derive(Debug, Clone)]
pub struct Endpoint {
    pub node_id: NodeId,
    pub filters: Vec<AcceptanceFilter>,
    pub rx_fifo: VecDeque<CanFrame>,
    tx_queue: VecDeque<Queued>,
    pub stats: NodeBusStats,
}

impl Endpoint {
    pub fn accepts(&self, id: u16) -> bool {
        self.filters.iter().any(|f| f.accepts(id))
    }

    pub fn tx_pending(&self) -> usize {
        self.tx_queue.len()
    }

    /// Copy of the queued frames in send order.
    pub fn tx_snapshot(&self) -> Vec<CanFrame> {
        self.tx_queue.iter().map(|q| q.frame).collect()
    }
}

/// One line of the frame trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: SimTime,
    pub frame: CanFrame,
}

impl TraceRecord {
    /// `time_us,id_hex,dlc,data_hex,kind`
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:03x},{},{},{:?}",
            self.time.as_micros(),
            self.frame.id,
            self.frame.dlc,
            hex::encode(self.frame.payload()),
            self.frame.kind
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BusStep {
    pub delivered: Vec<(NodeId, CanFrame)>,
    pub elapsed: SimDuration,
}

/// Aggregate wire counters: every attempt, including retransmissions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireStats {
    pub frames: u64,
    pub bytes: u64,
    pub error_frames: u64,
    pub dropped: u64,
}

pub struct CanBus {
    config: BusConfig,
    endpoints: BTreeMap<NodeId, Endpoint>,
    rng: ChaCha8Rng,
    next_order: u64,
    wire: WireStats,
    trace: Option<Vec<TraceRecord>>,
}

impl fmt::Debug for CanBus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CanBus")
            .field("config", &self.config)
            .field("nodes", &self.endpoints.keys().collect::<Vec<_>>())
            .field("wire", &self.wire)
            .finish()
    }
}

impl CanBus {
    pub fn new(config: BusConfig) -> Result<Self, CanError> {
        config.validate()?;
        Ok(CanBus {
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            config,
            endpoints: BTreeMap::new(),
            next_order: 0,
            wire: WireStats::default(),
            trace: None,
        })
    }

    pub fn config(&self) -> &BusConfig {
        &self.config
    }

    /// Changes fault probabilities mid-run; the RNG stream continues.
    pub fn set_fault_rates(&mut self, corruption: f64, drop: f64) -> Result<(), CanError> {
        let mut c = self.config.clone();
        c.corruption_probability = corruption;
        c.drop_probability = drop;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn wire_stats(&self) -> WireStats {
        self.wire
    }

    pub fn attach(&mut self, node_id: NodeId, filters: Vec<AcceptanceFilter>) -> Result<(), CanError> {
        if self.endpoints.contains_key(&node_id) {
            return Err(CanError::DuplicateNode(node_id));
        }
        self.endpoints.insert(
            node_id,
            Endpoint {
                node_id,
                filters,
                rx_fifo: VecDeque::new(),
                tx_queue: VecDeque::new(),
                stats: NodeBusStats::default(),
            },
        );
        Ok(())
    }

    pub fn endpoint(&self, node: NodeId) -> Option<&Endpoint> {
        self.endpoints.get(&node)
    }

    pub fn endpoint_mut(&mut self, node: NodeId) -> Option<&mut Endpoint> {
        self.endpoints.get_mut(&node)
    }

    pub fn transmit(&mut self, node: NodeId, frame: CanFrame) -> Result<(), CanError> {
        frame.validate()?;
        let order = self.next_order;
        let ep = self.endpoints.get_mut(&node).ok_or(CanError::UnknownNode(node))?;
        ep.tx_queue.push_back(Queued { frame, order, retries: 0 });
        self.next_order += 1;
        Ok(())
    }

    pub fn receive(&mut self, node: NodeId) -> Option<CanFrame> {
        self.endpoints.get_mut(&node)?.rx_fifo.pop_front()
    }

    /// Drops everything queued or buffered at `node`, as a controller
    /// reset does.
    pub fn reset_endpoint(&mut self, node: NodeId) {
        if let Some(ep) = self.endpoints.get_mut(&node) {
            ep.tx_queue.clear();
            ep.rx_fifo.clear();
        }
    }

    pub fn idle(&self) -> bool {
        self.endpoints.values().all(|e| e.tx_queue.is_empty())
    }

    /// One frame slot: the lowest pending identifier wins arbitration
    /// (ties go to the earliest enqueued) and is broadcast to every other
    /// endpoint whose filters accept it.
    pub fn step(&mut self, now: SimTime) -> BusStep {
        let winner =
            self.endpoints.iter().filter_map(|(id, ep)| ep.tx_queue.front().map(|q| (q.frame.id, q.order, *id))).min();
        let Some((_, _, sender)) = winner else {
            return BusStep::default();
        };
        let elapsed = SimDuration::from_micros(self.config.frame_time_us);

        // Both draws happen on every attempt so the random stream does not
        // depend on which faults are enabled.
        let drop_roll: f64 = self.rng.gen();
        let corrupt_roll: f64 = self.rng.gen();
        let bit_roll: u32 = self.rng.gen();
        let dropped = drop_roll < self.config.drop_probability;
        let corrupted = !dropped && corrupt_roll < self.config.corruption_probability;

        let max_retx = self.config.max_auto_retransmit;
        let ep = self.endpoints.get_mut(&sender).expect("winner exists");
        let head = ep.tx_queue.front_mut().expect("winner has a head frame");
        let mut frame = head.frame;
        self.wire.frames += 1;
        self.wire.bytes += frame.dlc as u64;
        ep.stats.attempts += 1;

        if dropped || corrupted {
            if corrupted {
                self.wire.error_frames += 1;
                let bits = (frame.dlc as u32 * 8).max(1);
                let bit = bit_roll % bits;
                if frame.dlc > 0 {
                    frame.data[(bit / 8) as usize] ^= 1 << (bit % 8);
                }
                if let Some(t) = self.trace.as_mut() {
                    t.push(TraceRecord {
                        time: now,
                        frame: CanFrame { id: frame.id, dlc: 0, data: [0; 8], kind: FrameKind::ErrorFrame },
                    });
                }
            } else {
                self.wire.dropped += 1;
            }
            if head.retries < max_retx {
                head.retries += 1;
                ep.stats.retransmissions += 1;
            } else {
                ep.tx_queue.pop_front();
                ep.stats.bus_off_events += 1;
            }
            return BusStep { delivered: Vec::new(), elapsed };
        }

        ep.tx_queue.pop_front();
        ep.stats.frames_sent += 1;
        ep.stats.bytes_sent += frame.dlc as u64;
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceRecord { time: now, frame });
        }
        let mut delivered = Vec::new();
        for (id, ep) in self.endpoints.iter_mut() {
            if *id != sender && ep.accepts(frame.id) {
                ep.rx_fifo.push_back(frame);
                ep.stats.frames_received += 1;
                delivered.push((*id, frame));
            }
        }
        BusStep { delivered, elapsed }
    }
}

/// Splits a payload into one header frame and `ceil(len/7)` body frames.
pub fn segment(id: u16, payload: &[u8]) -> Result<Vec<CanFrame>, TransportError> {
    if payload.is_empty() {
        return Err(TransportError::EmptyPayload);
    }
    if payload.len() > MAX_SEGMENTED_PAYLOAD {
        return Err(TransportError::PayloadTooLarge(payload.len()));
    }
    let len = (payload.len() as u16).to_le_bytes();
    let crc = crc32(payload).to_le_bytes();
    let mut frames = Vec::with_capacity(1 + payload.len().div_ceil(SEGMENT_BODY_CHUNK));
    frames.push(CanFrame::new(id, &[SEGMENT_HEADER_TAG, len[0], len[1], crc[0], crc[1], crc[2], crc[3], 0])?);
    for (seq, chunk) in payload.chunks(SEGMENT_BODY_CHUNK).enumerate() {
        let mut body = [0u8; MAX_DLC];
        body[0] = seq as u8;
        body[1..1 + chunk.len()].copy_from_slice(chunk);
        frames.push(CanFrame::new(id, &body[..1 + chunk.len()])?);
    }
    Ok(frames)
}

/// Queues a segmented payload at `node`'s transmit queue.
pub fn send_segmented(bus: &mut CanBus, node: NodeId, id: u16, payload: &[u8]) -> Result<(), TransportError> {
    for f in segment(id, payload)? {
        bus.transmit(node, f)?;
    }
    Ok(())
}

fn is_header(frame: &CanFrame) -> bool {
    frame.dlc == 8 && frame.data[0] == SEGMENT_HEADER_TAG && frame.data[7] == 0
}

#[derive(Debug, Clone, Default)]
enum RxState {
    #[default]
    Idle,
    Receiving {
        len: usize,
        crc: u32,
        next_seq: u8,
        buf: Vec<u8>,
    },
}

/// Reassembles one sender's segmented payloads.
#[derive(Debug, Clone, Default)]
pub struct SegmentedReceiver {
    state: RxState,
}

impl SegmentedReceiver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn in_progress(&self) -> bool {
        matches!(self.state, RxState::Receiving { .. })
    }

    pub fn reset(&mut self) {
        self.state = RxState::Idle;
    }

    /// Feeds one frame. Returns the payload when the final body frame
    /// arrives and the checksum verifies.
    pub fn push(&mut self, frame: &CanFrame) -> Result<Option<Vec<u8>>, TransportError> {
        let data = frame.payload();
        if let RxState::Receiving { next_seq, .. } = self.state {
            // A header-shaped frame mid-transfer is only a body frame if
            // its first byte is the sequence number we are waiting for.
            if is_header(frame) && data[0] != next_seq {
                let got = data[0];
                let expected = next_seq;
                self.start(frame);
                return Err(TransportError::SequenceGap { expected, got });
            }
        }
        match &mut self.state {
            RxState::Idle => {
                if is_header(frame) {
                    self.start(frame);
                    Ok(None)
                } else {
                    Err(TransportError::UnexpectedFrame)
                }
            }
            RxState::Receiving { len, crc, next_seq, buf } => {
                if data.is_empty() || data[0] != *next_seq {
                    let err =
                        TransportError::SequenceGap { expected: *next_seq, got: data.first().copied().unwrap_or(0) };
                    self.state = RxState::Idle;
                    return Err(err);
                }
                let want = (*len - buf.len()).min(SEGMENT_BODY_CHUNK);
                buf.extend_from_slice(&data[1..data.len().min(1 + want)]);
                *next_seq = next_seq.wrapping_add(1);
                if buf.len() < *len {
                    return Ok(None);
                }
                let expected = *crc;
                let payload = std::mem::take(buf);
                self.state = RxState::Idle;
                let actual = crc32(&payload);
                if actual != expected {
                    return Err(TransportError::ChecksumMismatch { expected, actual });
                }
                Ok(Some(payload))
            }
        }
    }

    fn start(&mut self, header: &CanFrame) {
        let d = header.data;
        let len = u16::from_le_bytes([d[1], d[2]]) as usize;
        if len == 0 {
            self.state = RxState::Idle;
            return;
        }
        self.state = RxState::Receiving {
            len,
            crc: u32::from_le_bytes([d[3], d[4], d[5], d[6]]),
            next_seq: 0,
            buf: Vec::with_capacity(len),
        };
    }
}

/// Drains `node`'s receive FIFO through `rx` until a payload completes,
/// a transport error occurs, or the FIFO is empty (`Ok(None)`).
pub fn recv_segmented(
    bus: &mut CanBus,
    node: NodeId,
    rx: &mut SegmentedReceiver,
) -> Result<Option<Vec<u8>>, TransportError> {
    while let Some(frame) = bus.receive(node) {
        if let Some(p) = rx.push(&frame)? {
            return Ok(Some(p));
        }
    }
    Ok(None)
}
