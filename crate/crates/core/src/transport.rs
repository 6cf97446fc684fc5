//! Deterministic simulated UDP network plus a per-connection reliability
//! layer (sequence numbers, selective acks, timed retransmission).
//!
//! Everything runs on virtual time. A link draws all of its randomness from
//! its own ChaCha8 stream, so the delivery schedule is a pure function of
//! the link conditions and the order in which frames are sent.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::mpsc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::fnv1a64;
use crate::wire::{fragment, Frame, FrameFlags, WireError, HEADER_LEN};

/// Random draws consumed per `send`, whatever the outcome:
/// loss, jitter, reorder, reorder hold, duplicate, duplicate jitter.
pub const DRAWS_PER_SEND: usize = 6;

pub const RELIABLE_CHANNEL: u8 = 0;
pub const UNRELIABLE_CHANNEL: u8 = 1;
pub const DEFAULT_MTU: usize = 1200;
pub const DEFAULT_MAX_RETRIES: u32 = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(Address),
    #[error("endpoint {0} registered twice")]
    DuplicateEndpoint(Address),
    #[error("invalid network conditions: {0}")]
    InvalidConditions(String),
    #[error("channel closed")]
    ChannelClosed,
    #[error("gave up on sequence {sequence} after {retries} retries")]
    GiveUp { sequence: u32, retries: u32 },
    #[error("message of {0} bytes does not fit an unreliable frame")]
    TooLargeForUnreliable(usize),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Address {
    pub node: u32,
    pub port: u16,
}

impl Address {
    pub const fn new(node: u32, port: u16) -> Self {
        Self { node, port }
    }

    pub fn to_bytes(self) -> [u8; 6] {
        let mut b = [0u8; 6];
        b[..4].copy_from_slice(&self.node.to_be_bytes());
        b[4..].copy_from_slice(&self.port.to_be_bytes());
        b
    }
}

impl std::fmt::Display for Address {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.node, self.port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConditions {
    pub one_way_latency_ms: f64,
    pub jitter_ms: f64,
    pub loss_rate: f64,
    pub duplicate_rate: f64,
    pub reorder_rate: f64,
    pub seed: u64,
}

impl Default for NetConditions {
    fn default() -> Self {
        Self {
            one_way_latency_ms: 10.0,
            jitter_ms: 0.0,
            loss_rate: 0.0,
            duplicate_rate: 0.0,
            reorder_rate: 0.0,
            seed: 0,
        }
    }
}

impl NetConditions {
    pub fn ideal(one_way_latency_ms: f64) -> Self {
        Self {
            one_way_latency_ms,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        let bad = |what: &str| Err(TransportError::InvalidConditions(what.to_owned()));
        if !(self.one_way_latency_ms >= 0.0 && self.one_way_latency_ms.is_finite()) {
            return bad("latency must be a finite non-negative number");
        }
        if !(self.jitter_ms >= 0.0 && self.jitter_ms.is_finite()) {
            return bad("jitter must be a finite non-negative number");
        }
        for (name, r) in [
            ("loss_rate", self.loss_rate),
            ("duplicate_rate", self.duplicate_rate),
            ("reorder_rate", self.reorder_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    fn reorder_window_ms(&self) -> f64 {
        (self.one_way_latency_ms + self.jitter_ms).max(1.0)
    }
}

/// Stream id of the RNG used by the directed link `from -> to`.
pub fn link_stream(from: Address, to: Address) -> u64 {
    let mut b = [0u8; 12];
    b[..6].copy_from_slice(&from.to_bytes());
    b[6..].copy_from_slice(&to.to_bytes());
    fnv1a64(&b)
}

/// The RNG a link uses, exposed so tests can replay its draws.
pub fn link_rng(conditions: &NetConditions, from: Address, to: Address) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(conditions.seed);
    rng.set_stream(link_stream(from, to));
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VirtualClock {
    now_ms: f64,
}

impl VirtualClock {
    pub fn now_ms(&self) -> f64 {
        self.now_ms
    }

    /// Moves forward; requests to move backwards are ignored.
    pub fn advance_to(&mut self, t_ms: f64) {
        if t_ms > self.now_ms {
            self.now_ms = t_ms;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub at_ms: f64,
    pub from: Address,
    pub to: Address,
    pub frame: Frame,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetEvent {
    Sent { at_ms: f64, from: Address, to: Address, sequence: u32, len: usize },
    Dropped { at_ms: f64, from: Address, to: Address, sequence: u32 },
    Duplicated { at_ms: f64, from: Address, to: Address, sequence: u32 },
    Delivered { at_ms: f64, from: Address, to: Address, sequence: u32, len: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct NetStats {
    pub sent: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub delivered: u64,
    pub bytes_delivered: u64,
    pub rejected_injections: u64,
}

/// Multi-producer hand-off into the simulation. Frames pushed here are
/// sent at the start of the next `tick`.
#[derive(Debug, Clone)]
pub struct Injector(mpsc::Sender<(Address, Address, Frame)>);

impl Injector {
    pub fn send(&self, from: Address, to: Address, frame: Frame) -> Result<(), TransportError> {
        self.0
            .send((from, to, frame))
            .map_err(|_| TransportError::ChannelClosed)
    }
}

#[derive(Debug)]
struct Link {
    conditions: NetConditions,
    rng: ChaCha8Rng,
}

#[derive(Debug)]
struct InFlight {
    at_ms: f64,
    order: u64,
    from: Address,
    to: Address,
    frame: Frame,
}

impl PartialEq for InFlight {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for InFlight {}

impl PartialOrd for InFlight {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for InFlight {
    fn cmp(&self, other: &Self) -> Ordering {
        self.at_ms
            .total_cmp(&other.at_ms)
            .then(self.order.cmp(&other.order))
    }
}

#[derive(Debug)]
pub struct SimNetwork {
    clock: VirtualClock,
    defaults: NetConditions,
    links: BTreeMap<(Address, Address), Link>,
    overrides: BTreeMap<(Address, Address), NetConditions>,
    endpoints: BTreeSet<Address>,
    in_flight: BinaryHeap<Reverse<InFlight>>,
    order: u64,
    injector_tx: mpsc::Sender<(Address, Address, Frame)>,
    injector_rx: mpsc::Receiver<(Address, Address, Frame)>,
    transcript: Option<Vec<NetEvent>>,
    stats: NetStats,
}

impl SimNetwork {
    pub fn new(defaults: NetConditions) -> Result<Self, TransportError> {
        defaults.validate()?;
        let (injector_tx, injector_rx) = mpsc::channel();
        Ok(Self {
            clock: VirtualClock::default(),
            defaults,
            links: BTreeMap::new(),
            overrides: BTreeMap::new(),
            endpoints: BTreeSet::new(),
            in_flight: BinaryHeap::new(),
            order: 0,
            injector_tx,
            injector_rx,
            transcript: None,
            stats: NetStats::default(),
        })
    }

    pub fn record_transcript(&mut self) {
        self.transcript.get_or_insert_with(Vec::new);
    }

    pub fn transcript(&self) -> &[NetEvent] {
        self.transcript.as_deref().unwrap_or(&[])
    }

    pub fn now_ms(&self) -> f64 {
        self.clock.now_ms()
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn register(&mut self, addr: Address) -> Result<(), TransportError> {
        if !self.endpoints.insert(addr) {
            return Err(TransportError::DuplicateEndpoint(addr));
        }
        Ok(())
    }

    pub fn is_registered(&self, addr: Address) -> bool {
        self.endpoints.contains(&addr)
    }

    /// Overrides conditions for one directed link. Must be called before
    /// the first frame crosses that link.
    pub fn set_link(&mut self, from: Address, to: Address, c: NetConditions) -> Result<(), TransportError> {
        c.validate()?;
        self.overrides.insert((from, to), c);
        self.links.remove(&(from, to));
        Ok(())
    }

    pub fn conditions(&self, from: Address, to: Address) -> NetConditions {
        self.overrides.get(&(from, to)).copied().unwrap_or(self.defaults)
    }

    pub fn injector(&self) -> Injector {
        Injector(self.injector_tx.clone())
    }

    pub fn next_arrival_ms(&self) -> Option<f64> {
        self.in_flight.peek().map(|Reverse(f)| f.at_ms)
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn send(&mut self, from: Address, to: Address, frame: Frame) -> Result<(), TransportError> {
        for addr in [from, to] {
            if !self.endpoints.contains(&addr) {
                return Err(TransportError::UnknownEndpoint(addr));
            }
        }
        let now = self.clock.now_ms();
        let c = self.conditions(from, to);
        let link = self.links.entry((from, to)).or_insert_with(|| Link {
            conditions: c,
            rng: link_rng(&c, from, to),
        });
        let c = link.conditions;
        let draws: [f64; DRAWS_PER_SEND] = std::array::from_fn(|_| link.rng.gen::<f64>());
        let [u_loss, u_jitter, u_reorder, u_hold, u_dup, u_dup_jitter] = draws;

        self.stats.sent += 1;
        let sequence = frame.sequence;
        self.log(NetEvent::Sent {
            at_ms: now,
            from,
            to,
            sequence,
            len: frame.encoded_len(),
        });
        if u_loss < c.loss_rate {
            self.stats.dropped += 1;
            self.log(NetEvent::Dropped { at_ms: now, from, to, sequence });
            return Ok(());
        }
        let jittered = |u: f64| (c.one_way_latency_ms + (2.0 * u - 1.0) * c.jitter_ms).max(0.0);
        let mut delay = jittered(u_jitter);
        if u_reorder < c.reorder_rate {
            delay += u_hold * c.reorder_window_ms();
        }
        if u_dup < c.duplicate_rate {
            self.stats.duplicated += 1;
            self.log(NetEvent::Duplicated { at_ms: now, from, to, sequence });
            self.schedule(now + jittered(u_dup_jitter), from, to, frame.clone());
        }
        self.schedule(now + delay, from, to, frame);
        Ok(())
    }

    fn schedule(&mut self, at_ms: f64, from: Address, to: Address, frame: Frame) {
        self.order += 1;
        self.in_flight.push(Reverse(InFlight {
            at_ms,
            order: self.order,
            from,
            to,
            frame,
        }));
    }

    fn log(&mut self, e: NetEvent) {
        if let Some(t) = self.transcript.as_mut() {
            t.push(e);
        }
    }

    /// Sends queued injections, then delivers every frame due at or before
    /// `until_ms` in arrival order (ties by send order) and advances the
    /// clock to `until_ms`.
    pub fn tick(&mut self, until_ms: f64) -> Vec<Delivery> {
        while let Ok((from, to, frame)) = self.injector_rx.try_recv() {
            if self.send(from, to, frame).is_err() {
                self.stats.rejected_injections += 1;
            }
        }
        let mut out = Vec::new();
        while let Some(Reverse(head)) = self.in_flight.peek() {
            if head.at_ms > until_ms {
                break;
            }
            let Reverse(f) = self.in_flight.pop().expect("peeked");
            self.stats.delivered += 1;
            self.stats.bytes_delivered += f.frame.encoded_len() as u64;
            self.log(NetEvent::Delivered {
                at_ms: f.at_ms,
                from: f.from,
                to: f.to,
                sequence: f.frame.sequence,
                len: f.frame.encoded_len(),
            });
            out.push(Delivery {
                at_ms: f.at_ms,
                from: f.from,
                to: f.to,
                frame: f.frame,
            });
        }
        self.clock.advance_to(until_ms);
        out
    }

    /// Drops every in-flight frame addressed to `addr` (a crashed host).
    pub fn discard_to(&mut self, addr: Address) -> usize {
        let before = self.in_flight.len();
        let kept: Vec<_> = std::mem::take(&mut self.in_flight)
            .into_iter()
            .filter(|Reverse(f)| f.to != addr)
            .collect();
        self.in_flight = kept.into_iter().collect();
        before - self.in_flight.len()
    }
}

// -- reliability ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliableConfig {
    pub rto_ms: f64,
    pub max_retries: u32,
    pub mtu: usize,
}

impl ReliableConfig {
    /// Retransmission timeout of three one-way latencies (at least 1 ms).
    pub fn for_latency(one_way_latency_ms: f64) -> Self {
        Self {
            rto_ms: (3.0 * one_way_latency_ms).max(1.0),
            max_retries: DEFAULT_MAX_RETRIES,
            mtu: DEFAULT_MTU,
        }
    }
}

impl Default for ReliableConfig {
    fn default() -> Self {
        Self::for_latency(NetConditions::default().one_way_latency_ms)
    }
}

#[derive(Debug, Clone)]
struct Pending {
    frame: Frame,
    sent_at: f64,
    retries: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub messages_sent: u64,
    pub frames_sent: u64,
    pub retransmissions: u64,
    pub duplicates_received: u64,
    pub messages_delivered: u64,
}

/// One direction-pair of a reliable, ordered, exactly-once channel.
///
/// Data frames carry `RELIABLE`. Every frame leaving the channel also
/// carries an ack for the highest sequence received plus a bitfield for
/// the 32 sequences before it (bit `i` acks `ack - 1 - i`).
#[derive(Debug, Clone)]
pub struct ReliableChannel {
    channel: u8,
    config: ReliableConfig,
    closed: bool,
    next_seq: u32,
    unacked: BTreeMap<u32, Pending>,
    next_expected: u32,
    out_of_order: BTreeMap<u32, Frame>,
    partial: Vec<u8>,
    ack_anchors: BTreeSet<u32>,
    stats: ChannelStats,
}

impl ReliableChannel {
    pub fn new(channel: u8, config: ReliableConfig) -> Self {
        Self {
            channel,
            config,
            closed: false,
            next_seq: 0,
            unacked: BTreeMap::new(),
            next_expected: 0,
            out_of_order: BTreeMap::new(),
            partial: Vec::new(),
            ack_anchors: BTreeSet::new(),
            stats: ChannelStats::default(),
        }
    }

    pub fn config(&self) -> ReliableConfig {
        self.config
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    pub fn close(&mut self) {
        self.closed = true;
        self.unacked.clear();
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// True when nothing sent is awaiting an ack.
    pub fn is_idle(&self) -> bool {
        self.unacked.is_empty()
    }

    pub fn unacked(&self) -> usize {
        self.unacked.len()
    }

    /// Earliest time `poll` has work to do.
    pub fn next_deadline(&self) -> Option<f64> {
        let retransmit = self
            .unacked
            .values()
            .map(|p| p.sent_at + self.config.rto_ms)
            .min_by(f64::total_cmp);
        if self.ack_anchors.is_empty() {
            retransmit
        } else {
            Some(f64::NEG_INFINITY)
        }
    }

    fn received(&self, seq: u32) -> bool {
        seq < self.next_expected || self.out_of_order.contains_key(&seq)
    }

    fn highest_received(&self) -> Option<u32> {
        let contiguous = self.next_expected.checked_sub(1);
        let buffered = self.out_of_order.keys().next_back().copied();
        contiguous.max(buffered)
    }

    fn ack_bits_below(&self, anchor: u32) -> u32 {
        (0..32u32).fold(0, |bits, i| match anchor.checked_sub(i + 1) {
            Some(s) if self.received(s) => bits | (1 << i),
            _ => bits,
        })
    }

    fn stamp_ack(&self, frame: &mut Frame) {
        if let Some(h) = self.highest_received() {
            frame.flags |= FrameFlags::ACK_PRESENT;
            frame.ack = h;
            frame.ack_bits = self.ack_bits_below(h);
        }
    }

    /// Queues `message`, fragmenting it to the configured MTU. Returns the
    /// frames to put on the wire now.
    pub fn send(&mut self, message: &[u8], now_ms: f64) -> Result<Vec<Frame>, TransportError> {
        if self.closed {
            return Err(TransportError::ChannelClosed);
        }
        let fragments = fragment(message, self.config.mtu)?;
        self.stats.messages_sent += 1;
        let mut out = Vec::with_capacity(fragments.len());
        for frag in fragments {
            let seq = self.next_seq;
            self.next_seq = self.next_seq.wrapping_add(1);
            let mut frame = frag.into_frame(self.channel, seq);
            frame.flags |= FrameFlags::RELIABLE;
            self.unacked.insert(
                seq,
                Pending {
                    frame: frame.clone(),
                    sent_at: now_ms,
                    retries: 0,
                },
            );
            self.stamp_ack(&mut frame);
            self.stats.frames_sent += 1;
            out.push(frame);
        }
        Ok(out)
    }

    /// Processes an incoming frame; returns complete messages released in
    /// order. Duplicates are acked again but never released twice.
    pub fn on_frame(&mut self, frame: &Frame) -> Vec<Vec<u8>> {
        if frame.flags.contains(FrameFlags::ACK_PRESENT) {
            self.unacked.remove(&frame.ack);
            for i in 0..32u32 {
                if frame.ack_bits & (1 << i) != 0 {
                    if let Some(s) = frame.ack.checked_sub(i + 1) {
                        self.unacked.remove(&s);
                    }
                }
            }
        }
        if !frame.flags.contains(FrameFlags::RELIABLE) || self.closed {
            return Vec::new();
        }
        let seq = frame.sequence;
        self.ack_anchors.insert(seq);
        if self.received(seq) {
            self.stats.duplicates_received += 1;
            return Vec::new();
        }
        self.out_of_order.insert(seq, frame.clone());
        let mut released = Vec::new();
        while let Some(f) = self.out_of_order.remove(&self.next_expected) {
            self.next_expected = self.next_expected.wrapping_add(1);
            if f.flags.contains(FrameFlags::FRAGMENT) {
                self.partial.extend_from_slice(&f.payload);
                if f.flags.contains(FrameFlags::LAST_FRAGMENT) {
                    released.push(std::mem::take(&mut self.partial));
                }
            } else {
                released.push(f.payload);
            }
        }
        self.stats.messages_delivered += released.len() as u64;
        released
    }

    /// Retransmits timed-out frames and emits pending acks.
    pub fn poll(&mut self, now_ms: f64) -> Result<Vec<Frame>, TransportError> {
        if self.closed {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        let due: Vec<u32> = self
            .unacked
            .iter()
            .filter(|(_, p)| now_ms >= p.sent_at + self.config.rto_ms)
            .map(|(&s, _)| s)
            .collect();
        for seq in due {
            let pending = self.unacked.get_mut(&seq).expect("listed above");
            if pending.retries >= self.config.max_retries {
                let retries = pending.retries;
                self.closed = true;
                return Err(TransportError::GiveUp { sequence: seq, retries });
            }
            pending.retries += 1;
            pending.sent_at = now_ms;
            let mut frame = pending.frame.clone();
            self.stamp_ack(&mut frame);
            self.stats.retransmissions += 1;
            self.stats.frames_sent += 1;
            out.push(frame);
        }
        let anchors = std::mem::take(&mut self.ack_anchors);
        let mut covered_from: Option<u32> = None;
        for anchor in anchors.into_iter().rev() {
            if let Some(low) = covered_from {
                if anchor >= low {
                    continue;
                }
            }
            out.push(Frame {
                flags: FrameFlags::ACK_PRESENT,
                channel: self.channel,
                sequence: 0,
                ack: anchor,
                ack_bits: self.ack_bits_below(anchor),
                payload: Vec::new(),
            });
            covered_from = Some(anchor.saturating_sub(32));
        }
        Ok(out)
    }
}

/// A message released by a [`Connection`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Incoming {
    pub reliable: bool,
    pub bytes: Vec<u8>,
}

/// Both channels between a local and a remote endpoint.
#[derive(Debug, Clone)]
pub struct Connection {
    pub local: Address,
    pub remote: Address,
    reliable: ReliableChannel,
    unreliable_seq: u32,
}

impl Connection {
    pub fn new(local: Address, remote: Address, config: ReliableConfig) -> Self {
        Self {
            local,
            remote,
            reliable: ReliableChannel::new(RELIABLE_CHANNEL, config),
            unreliable_seq: 0,
        }
    }

    pub fn reliable(&self) -> &ReliableChannel {
        &self.reliable
    }

    pub fn send_reliable(&mut self, message: &[u8], now_ms: f64) -> Result<Vec<Frame>, TransportError> {
        self.reliable.send(message, now_ms)
    }

    pub fn send_unreliable(&mut self, message: &[u8]) -> Result<Frame, TransportError> {
        if message.len() + HEADER_LEN > self.reliable.config().mtu {
            return Err(TransportError::TooLargeForUnreliable(message.len()));
        }
        if self.reliable.is_closed() {
            return Err(TransportError::ChannelClosed);
        }
        let seq = self.unreliable_seq;
        self.unreliable_seq = self.unreliable_seq.wrapping_add(1);
        Ok(Frame {
            channel: UNRELIABLE_CHANNEL,
            sequence: seq,
            payload: message.to_vec(),
            ..Frame::default()
        })
    }

    pub fn on_frame(&mut self, frame: &Frame) -> Vec<Incoming> {
        if frame.channel == UNRELIABLE_CHANNEL && !frame.flags.contains(FrameFlags::RELIABLE) {
            if self.reliable.is_closed() {
                return Vec::new();
            }
            return vec![Incoming {
                reliable: false,
                bytes: frame.payload.clone(),
            }];
        }
        self.reliable
            .on_frame(frame)
            .into_iter()
            .map(|bytes| Incoming { reliable: true, bytes })
            .collect()
    }

    pub fn poll(&mut self, now_ms: f64) -> Result<Vec<Frame>, TransportError> {
        self.reliable.poll(now_ms)
    }

    pub fn next_deadline(&self) -> Option<f64> {
        self.reliable.next_deadline()
    }

    pub fn close(&mut self) {
        self.reliable.close();
    }
}

/// Which end of a [`Duplex`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn peer(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

/// Two connected endpoints over a [`SimNetwork`], advanced one event at a
/// time so callers can react to each released message.
#[derive(Debug)]
pub struct Duplex {
    pub net: SimNetwork,
    pub a: Connection,
    pub b: Connection,
}

impl Duplex {
    pub fn new(mut net: SimNetwork, a: Address, b: Address, config: ReliableConfig) -> Result<Self, TransportError> {
        for addr in [a, b] {
            if !net.is_registered(addr) {
                net.register(addr)?;
            }
        }
        Ok(Self {
            net,
            a: Connection::new(a, b, config),
            b: Connection::new(b, a, config),
        })
    }

    pub fn now_ms(&self) -> f64 {
        self.net.now_ms()
    }

    fn conn(&mut self, side: Side) -> &mut Connection {
        match side {
            Side::A => &mut self.a,
            Side::B => &mut self.b,
        }
    }

    fn put(&mut self, side: Side, frames: Vec<Frame>) -> Result<(), TransportError> {
        let (from, to) = {
            let c = self.conn(side);
            (c.local, c.remote)
        };
        for f in frames {
            self.net.send(from, to, f)?;
        }
        Ok(())
    }

    pub fn send(&mut self, from: Side, message: &[u8], reliable: bool) -> Result<(), TransportError> {
        let now = self.net.now_ms();
        let frames = if reliable {
            self.conn(from).send_reliable(message, now)?
        } else {
            vec![self.conn(from).send_unreliable(message)?]
        };
        self.put(from, frames)
    }

    /// Time of the next arrival or retransmission deadline.
    pub fn next_event_ms(&self) -> Option<f64> {
        let now = self.net.now_ms();
        [
            self.net.next_arrival_ms(),
            self.a.next_deadline().map(|t| t.max(now)),
            self.b.next_deadline().map(|t| t.max(now)),
        ]
        .into_iter()
        .flatten()
        .min_by(f64::total_cmp)
    }

    /// Processes everything due at the next event time. Returns `None` once
    /// the link is quiet, otherwise the messages released at that time
    /// (possibly none).
    pub fn advance(&mut self) -> Result<Option<Vec<(Side, Incoming)>>, TransportError> {
        let Some(t) = self.next_event_ms() else {
            return Ok(None);
        };
        let mut released = Vec::new();
        for d in self.net.tick(t) {
            let side = if d.to == self.a.local { Side::A } else { Side::B };
            for m in self.conn(side).on_frame(&d.frame) {
                released.push((side, m));
            }
        }
        for side in [Side::A, Side::B] {
            let frames = self.conn(side).poll(t)?;
            self.put(side, frames)?;
        }
        Ok(Some(released))
    }

    /// Runs until quiet or `deadline_ms`, collecting every released message.
    pub fn run_until_quiet(&mut self, deadline_ms: f64) -> Result<Vec<(Side, Incoming)>, TransportError> {
        let mut all = Vec::new();
        while self.next_event_ms().is_some_and(|t| t <= deadline_ms) {
            if let Some(batch) = self.advance()? {
                all.extend(batch);
            }
        }
        Ok(all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: Address = Address::new(1, 1000);
    const B: Address = Address::new(2, 2000);

    fn net(c: NetConditions) -> SimNetwork {
        let mut n = SimNetwork::new(c).unwrap();
        n.register(A).unwrap();
        n.register(B).unwrap();
        n
    }

    fn frame(seq: u32) -> Frame {
        Frame {
            sequence: seq,
            payload: seq.to_be_bytes().to_vec(),
            ..Frame::default()
        }
    }

    #[test]
    fn ideal_link_is_fifo_with_fixed_delay() {
        let mut n = net(NetConditions::ideal(10.0));
        for s in 0..5 {
            n.send(A, B, frame(s)).unwrap();
        }
        let d = n.tick(100.0);
        assert_eq!(d.len(), 5);
        for (i, del) in d.iter().enumerate() {
            assert_eq!(del.at_ms, 10.0);
            assert_eq!(del.frame.sequence, i as u32);
        }
    }

    #[test]
    fn total_loss_delivers_nothing() {
        let mut n = net(NetConditions {
            loss_rate: 1.0,
            ..NetConditions::ideal(5.0)
        });
        for s in 0..50 {
            n.send(A, B, frame(s)).unwrap();
        }
        assert!(n.tick(1000.0).is_empty());
        assert_eq!(n.stats().dropped, 50);
    }

    #[test]
    fn unknown_endpoint() {
        let mut n = net(NetConditions::default());
        let c = Address::new(9, 9);
        assert_eq!(n.send(A, c, frame(0)), Err(TransportError::UnknownEndpoint(c)));
        assert_eq!(n.register(A), Err(TransportError::DuplicateEndpoint(A)));
    }

    #[test]
    fn empty_tick_advances_clock() {
        let mut n = net(NetConditions::default());
        assert!(n.tick(42.0).is_empty());
        assert_eq!(n.now_ms(), 42.0);
    }

    #[test]
    fn delivery_sorted_by_arrival() {
        let mut n = net(NetConditions::ideal(5.0));
        n.set_link(B, A, NetConditions::ideal(3.0)).unwrap();
        n.send(A, B, frame(1)).unwrap();
        n.send(B, A, frame(2)).unwrap();
        let d = n.tick(10.0);
        let times: Vec<_> = d.iter().map(|d| d.at_ms).collect();
        assert_eq!(times, vec![3.0, 5.0]);
    }

    #[test]
    fn injector_frames_sent_at_tick_start() {
        let mut n = net(NetConditions::ideal(2.0));
        let inj = n.injector();
        let t = std::thread::spawn(move || {
            for s in 0..3 {
                inj.send(A, B, frame(s)).unwrap();
            }
        });
        t.join().unwrap();
        assert!(n.tick(1.0).is_empty());
        assert_eq!(n.tick(2.0).len(), 3);
    }

    #[test]
    fn invalid_conditions_rejected() {
        let bad = NetConditions {
            loss_rate: 1.5,
            ..NetConditions::default()
        };
        assert!(matches!(SimNetwork::new(bad), Err(TransportError::InvalidConditions(_))));
        let bad = NetConditions {
            jitter_ms: -1.0,
            ..NetConditions::default()
        };
        assert!(bad.validate().is_err());
    }

    /// Pumps two connections over `n` until both sides are idle or the
    /// deadline passes. Returns messages released at B.
    fn pump(
        n: &mut SimNetwork,
        a: &mut Connection,
        b: &mut Connection,
        deadline: f64,
    ) -> Result<Vec<Vec<u8>>, TransportError> {
        let mut got = Vec::new();
        let step = 1.0;
        let mut t = n.now_ms();
        while t < deadline {
            t += step;
            for d in n.tick(t) {
                let conn = if d.to == A { &mut *a } else { &mut *b };
                for m in conn.on_frame(&d.frame) {
                    if d.to == B {
                        got.push(m.bytes);
                    }
                }
            }
            for f in a.poll(t)? {
                n.send(A, B, f)?;
            }
            for f in b.poll(t)? {
                n.send(B, A, f)?;
            }
            if a.reliable().is_idle() && b.reliable().is_idle() && n.in_flight() == 0 {
                break;
            }
        }
        Ok(got)
    }

    #[test]
    fn lossless_reliable_sends_once() {
        let mut n = net(NetConditions::ideal(5.0));
        let cfg = ReliableConfig::for_latency(5.0);
        let mut a = Connection::new(A, B, cfg);
        let mut b = Connection::new(B, A, cfg);
        for i in 0..10u8 {
            for f in a.send_reliable(&[i], 0.0).unwrap() {
                n.send(A, B, f).unwrap();
            }
        }
        let got = pump(&mut n, &mut a, &mut b, 1000.0).unwrap();
        assert_eq!(got, (0..10u8).map(|i| vec![i]).collect::<Vec<_>>());
        assert_eq!(a.reliable().stats().retransmissions, 0);
        assert_eq!(a.reliable().stats().frames_sent, 10);
        assert!(a.reliable().is_idle());
    }

    #[test]
    fn reliable_gives_up_on_dead_link() {
        let mut n = net(NetConditions {
            loss_rate: 1.0,
            ..NetConditions::ideal(5.0)
        });
        let cfg = ReliableConfig::for_latency(5.0);
        let mut a = Connection::new(A, B, cfg);
        let mut b = Connection::new(B, A, cfg);
        for f in a.send_reliable(b"x", 0.0).unwrap() {
            n.send(A, B, f).unwrap();
        }
        let err = pump(&mut n, &mut a, &mut b, 10_000.0).unwrap_err();
        assert_eq!(err, TransportError::GiveUp { sequence: 0, retries: 20 });
        assert_eq!(a.send_reliable(b"y", 0.0), Err(TransportError::ChannelClosed));
    }

    #[test]
    fn large_message_is_fragmented_and_reassembled() {
        let mut n = net(NetConditions {
            loss_rate: 0.2,
            reorder_rate: 0.3,
            seed: 3,
            ..NetConditions::ideal(4.0)
        });
        let cfg = ReliableConfig::for_latency(4.0);
        let mut a = Connection::new(A, B, cfg);
        let mut b = Connection::new(B, A, cfg);
        let big: Vec<u8> = (0..5000u32).map(|i| (i * 7 % 256) as u8).collect();
        let frames = a.send_reliable(&big, 0.0).unwrap();
        assert_eq!(frames.len(), 5);
        for f in frames {
            n.send(A, B, f).unwrap();
        }
        let got = pump(&mut n, &mut a, &mut b, 5000.0).unwrap();
        assert_eq!(got, vec![big]);
    }

    #[test]
    fn unreliable_size_limit() {
        let mut a = Connection::new(A, B, ReliableConfig::default());
        assert!(a.send_unreliable(&[0; 1181]).is_ok());
        assert_eq!(
            a.send_unreliable(&[0; 1182]),
            Err(TransportError::TooLargeForUnreliable(1182))
        );
    }

    #[test]
    fn ack_bits_cover_preceding_window() {
        let mut rx = ReliableChannel::new(0, ReliableConfig::default());
        let mut tx = ReliableChannel::new(0, ReliableConfig::default());
        let frames: Vec<Frame> = (0..40u8).flat_map(|i| tx.send(&[i], 0.0).unwrap()).collect();
        for f in frames.iter().filter(|f| f.sequence != 5) {
            rx.on_frame(f);
        }
        let acks = rx.poll(0.0).unwrap();
        // anchor 39 covers 7..=38; 6 and lower need their own anchors
        assert_eq!(acks[0].ack, 39);
        assert_eq!(acks[0].ack_bits, u32::MAX);
        for a in &acks {
            tx.on_frame(a);
        }
        assert_eq!(tx.unacked(), 1);
    }

    #[test]
    fn duplex_round_trip_under_loss() {
        let n = net(NetConditions {
            loss_rate: 0.3,
            seed: 11,
            ..NetConditions::ideal(5.0)
        });
        let mut d = Duplex::new(n, A, B, ReliableConfig::for_latency(5.0)).unwrap();
        for i in 0..50u8 {
            d.send(Side::A, &[i], true).unwrap();
        }
        let mut echoed = Vec::new();
        while let Some(batch) = d.advance().unwrap() {
            for (side, m) in batch {
                match side {
                    Side::B => d.send(Side::B, &m.bytes, true).unwrap(),
                    Side::A => echoed.push(m.bytes[0]),
                }
            }
        }
        assert_eq!(echoed, (0..50u8).collect::<Vec<_>>());
        assert!(d.a.reliable().is_idle() && d.b.reliable().is_idle());
    }
}
