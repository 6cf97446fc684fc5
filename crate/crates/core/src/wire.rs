//! Bit-exact binary encoding: property values, frames, message bodies,
//! and fragmentation of payloads larger than one frame.
//!
//! All multi-byte integers are big-endian. The frame header is 19 bytes:
//!
//! ```text
//! magic "WS" (2) | version (1) | flags (1) | channel (1)
//! sequence u32 | ack u32 | ack_bits u32 | payload length u16
//! ```

use std::collections::BTreeMap;

use bitflags::bitflags;
use thiserror::Error;

use crate::schema::ValueKind;

pub const MAGIC: [u8; 2] = [0x57, 0x53];
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 19;
pub const MAX_PAYLOAD: usize = u16::MAX as usize;
pub const MAX_BLOB: usize = u16::MAX as usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("truncated input: needed {needed} more bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("unknown value tag {0:#04x}")]
    UnknownTag(u8),
    #[error("length {0} exceeds the 65535-byte limit")]
    TooLong(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("unknown body type {0:#04x}")]
    UnknownBodyType(u8),
    #[error("invalid text encoding")]
    InvalidUtf8,
    #[error("invalid {field} value {value}")]
    InvalidField { field: &'static str, value: u32 },
    #[error("mtu {0} leaves no room for payload")]
    MtuTooSmall(usize),
    #[error("inconsistent fragment set: {0}")]
    InconsistentFragmentSet(String),
}

// -- values -----------------------------------------------------------------

/// A replicated variable or RPC argument.
///
/// Equality is bitwise for floats, so `NaN == NaN` and `0.0 != -0.0`; two
/// values are equal exactly when they encode to the same bytes.
#[derive(Debug, Clone)]
pub enum PropertyValue {
    Null,
    Bool(bool),
    Int64(i64),
    Float64(f64),
    Text(String),
    Vec3([f64; 3]),
    Bytes(Vec<u8>),
}

impl PartialEq for PropertyValue {
    fn eq(&self, other: &Self) -> bool {
        use PropertyValue::*;
        match (self, other) {
            (Null, Null) => true,
            (Bool(a), Bool(b)) => a == b,
            (Int64(a), Int64(b)) => a == b,
            (Float64(a), Float64(b)) => a.to_bits() == b.to_bits(),
            (Text(a), Text(b)) => a == b,
            (Vec3(a), Vec3(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (Bytes(a), Bytes(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for PropertyValue {}

impl PropertyValue {
    pub fn kind(&self) -> ValueKind {
        match self {
            PropertyValue::Null => ValueKind::Null,
            PropertyValue::Bool(_) => ValueKind::Bool,
            PropertyValue::Int64(_) => ValueKind::Int64,
            PropertyValue::Float64(_) => ValueKind::Float64,
            PropertyValue::Text(_) => ValueKind::Text,
            PropertyValue::Vec3(_) => ValueKind::Vec3,
            PropertyValue::Bytes(_) => ValueKind::Bytes,
        }
    }

    /// Zero value used when an object is instantiated from its class.
    pub fn default_for(kind: ValueKind) -> Self {
        match kind {
            ValueKind::Null => PropertyValue::Null,
            ValueKind::Bool => PropertyValue::Bool(false),
            ValueKind::Int64 => PropertyValue::Int64(0),
            ValueKind::Float64 => PropertyValue::Float64(0.0),
            ValueKind::Text => PropertyValue::Text(String::new()),
            ValueKind::Vec3 => PropertyValue::Vec3([0.0; 3]),
            ValueKind::Bytes => PropertyValue::Bytes(Vec::new()),
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            PropertyValue::Int64(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_vec3(&self) -> Option<[f64; 3]> {
        match self {
            PropertyValue::Vec3(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            PropertyValue::Text(s) => Some(s),
            _ => None,
        }
    }
}

pub fn encode_value(value: &PropertyValue) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    put_value(&mut out, value)?;
    Ok(out)
}

pub fn decode_value(bytes: &[u8]) -> Result<(PropertyValue, usize), WireError> {
    let mut r = Reader::new(bytes);
    let v = r.value()?;
    Ok((v, r.pos))
}

fn put_value(out: &mut Vec<u8>, value: &PropertyValue) -> Result<(), WireError> {
    out.push(value.kind().tag());
    match value {
        PropertyValue::Null => {}
        PropertyValue::Bool(b) => out.push(u8::from(*b)),
        PropertyValue::Int64(v) => out.extend_from_slice(&v.to_be_bytes()),
        PropertyValue::Float64(v) => out.extend_from_slice(&v.to_be_bytes()),
        PropertyValue::Text(s) => put_blob(out, s.as_bytes())?,
        PropertyValue::Vec3(v) => {
            for c in v {
                out.extend_from_slice(&c.to_be_bytes());
            }
        }
        PropertyValue::Bytes(b) => put_blob(out, b)?,
    }
    Ok(())
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) -> Result<(), WireError> {
    if b.len() > MAX_BLOB {
        return Err(WireError::TooLong(b.len()));
    }
    out.extend_from_slice(&(b.len() as u16).to_be_bytes());
    out.extend_from_slice(b);
    Ok(())
}

fn put_count(out: &mut Vec<u8>, n: usize) -> Result<(), WireError> {
    let n = u16::try_from(n).map_err(|_| WireError::TooLong(n))?;
    out.extend_from_slice(&n.to_be_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated {
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_be_bytes(self.array()?))
    }

    fn blob(&mut self) -> Result<&'a [u8], WireError> {
        let len = self.u16()? as usize;
        self.take(len)
    }

    fn value(&mut self) -> Result<PropertyValue, WireError> {
        let tag = self.u8()?;
        let kind = ValueKind::from_tag(tag).ok_or(WireError::UnknownTag(tag))?;
        Ok(match kind {
            ValueKind::Null => PropertyValue::Null,
            ValueKind::Bool => match self.u8()? {
                0 => PropertyValue::Bool(false),
                1 => PropertyValue::Bool(true),
                other => {
                    return Err(WireError::InvalidField {
                        field: "bool",
                        value: other.into(),
                    })
                }
            },
            ValueKind::Int64 => PropertyValue::Int64(i64::from_be_bytes(self.array()?)),
            ValueKind::Float64 => PropertyValue::Float64(self.f64()?),
            ValueKind::Text => {
                let b = self.blob()?;
                PropertyValue::Text(
                    std::str::from_utf8(b)
                        .map_err(|_| WireError::InvalidUtf8)?
                        .to_owned(),
                )
            }
            ValueKind::Vec3 => PropertyValue::Vec3([self.f64()?, self.f64()?, self.f64()?]),
            ValueKind::Bytes => PropertyValue::Bytes(self.blob()?.to_vec()),
        })
    }

    fn finish(&self) -> Result<(), WireError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(WireError::TrailingBytes(n)),
        }
    }
}

// -- frames -----------------------------------------------------------------

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct FrameFlags: u8 {
        const RELIABLE = 0x01;
        const ACK_PRESENT = 0x02;
        const FRAGMENT = 0x04;
        const LAST_FRAGMENT = 0x08;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Frame {
    pub flags: FrameFlags,
    pub channel: u8,
    pub sequence: u32,
    pub ack: u32,
    pub ack_bits: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, WireError> {
    if frame.payload.len() > MAX_PAYLOAD {
        return Err(WireError::TooLong(frame.payload.len()));
    }
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.flags.bits());
    out.push(frame.channel);
    out.extend_from_slice(&frame.sequence.to_be_bytes());
    out.extend_from_slice(&frame.ack.to_be_bytes());
    out.extend_from_slice(&frame.ack_bits.to_be_bytes());
    out.extend_from_slice(&(frame.payload.len() as u16).to_be_bytes());
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, WireError> {
    let mut r = Reader::new(bytes);
    let magic = r.array::<2>()?;
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(WireError::BadVersion(version));
    }
    let flags = FrameFlags::from_bits_retain(r.u8()?);
    let channel = r.u8()?;
    let sequence = r.u32()?;
    let ack = r.u32()?;
    let ack_bits = r.u32()?;
    let payload = r.blob()?.to_vec();
    r.finish()?;
    Ok(Frame {
        flags,
        channel,
        sequence,
        ack,
        ack_bits,
        payload,
    })
}

// -- fragmentation ----------------------------------------------------------

/// One slice of a fragmented payload. The `n`th fragment travels with
/// sequence `base + n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub flags: FrameFlags,
    pub data: Vec<u8>,
}

impl Fragment {
    pub fn into_frame(self, channel: u8, sequence: u32) -> Frame {
        Frame {
            flags: self.flags,
            channel,
            sequence,
            payload: self.data,
            ..Frame::default()
        }
    }
}

pub fn fragment_capacity(mtu: usize) -> Result<usize, WireError> {
    if mtu <= HEADER_LEN {
        return Err(WireError::MtuTooSmall(mtu));
    }
    Ok((mtu - HEADER_LEN).min(MAX_PAYLOAD))
}

/// Splits `payload` so every frame fits in `mtu`. A payload that fits is
/// returned as a single unflagged fragment.
pub fn fragment(payload: &[u8], mtu: usize) -> Result<Vec<Fragment>, WireError> {
    let cap = fragment_capacity(mtu)?;
    if payload.len() <= cap {
        return Ok(vec![Fragment {
            flags: FrameFlags::empty(),
            data: payload.to_vec(),
        }]);
    }
    let chunks: Vec<&[u8]> = payload.chunks(cap).collect();
    let last = chunks.len() - 1;
    Ok(chunks
        .into_iter()
        .enumerate()
        .map(|(i, c)| Fragment {
            flags: if i == last {
                FrameFlags::FRAGMENT | FrameFlags::LAST_FRAGMENT
            } else {
                FrameFlags::FRAGMENT
            },
            data: c.to_vec(),
        })
        .collect())
}

/// Collects the fragments of one message sent from `base` sequence onward.
#[derive(Debug, Clone)]
pub struct Reassembler {
    base: u32,
    parts: BTreeMap<u32, Vec<u8>>,
    last: Option<u32>,
    whole: bool,
}

impl Reassembler {
    pub fn new(base: u32) -> Self {
        Self {
            base,
            parts: BTreeMap::new(),
            last: None,
            whole: false,
        }
    }

    /// Accepts a frame in any order. Returns the payload once every
    /// fragment is present; duplicates are ignored.
    pub fn insert(&mut self, frame: &Frame) -> Result<Option<Vec<u8>>, WireError> {
        let seq = frame.sequence;
        let inconsistent = |why: String| Err(WireError::InconsistentFragmentSet(why));
        if seq < self.base {
            return inconsistent(format!("sequence {seq} precedes base {}", self.base));
        }
        if !frame.flags.contains(FrameFlags::FRAGMENT) {
            if seq != self.base || self.parts.keys().any(|&s| s != seq) {
                return inconsistent(format!("unfragmented frame {seq} inside a fragment set"));
            }
            self.whole = true;
        } else if self.whole {
            return inconsistent(format!("fragment {seq} after an unfragmented frame"));
        }
        if frame.flags.contains(FrameFlags::LAST_FRAGMENT) {
            match self.last {
                Some(l) if l != seq => return inconsistent(format!("two last fragments: {l} and {seq}")),
                _ => self.last = Some(seq),
            }
        }
        if let Some(l) = self.last {
            if let Some((&max, _)) = self.parts.last_key_value() {
                if max > l {
                    return inconsistent(format!("fragment {max} beyond last fragment {l}"));
                }
            }
            if seq > l {
                return inconsistent(format!("fragment {seq} beyond last fragment {l}"));
            }
        }
        match self.parts.get(&seq) {
            Some(existing) if existing != &frame.payload => {
                return inconsistent(format!("conflicting data for fragment {seq}"));
            }
            Some(_) => {}
            None => {
                self.parts.insert(seq, frame.payload.clone());
            }
        }
        Ok(self.complete())
    }

    fn complete(&self) -> Option<Vec<u8>> {
        let end = if self.whole { self.base } else { self.last? };
        let expected = (end - self.base) as usize + 1;
        if self.parts.len() != expected {
            return None;
        }
        Some(self.parts.values().flatten().copied().collect())
    }
}

/// Reassembles a complete set of frames delivered in any order.
pub fn reassemble<'a>(
    base: u32,
    frames: impl IntoIterator<Item = &'a Frame>,
) -> Result<Option<Vec<u8>>, WireError> {
    let mut r = Reassembler::new(base);
    let mut out = None;
    for f in frames {
        if let Some(p) = r.insert(f)? {
            out = Some(p);
        }
    }
    Ok(out)
}

// -- message bodies ---------------------------------------------------------

pub mod body_type {
    pub const REPLICATION_DELTA: u8 = 0x01;
    pub const SNAPSHOT: u8 = 0x02;
    pub const RPC_REQUEST: u8 = 0x03;
    pub const RPC_RESPONSE: u8 = 0x04;
    pub const CLOCK_PING: u8 = 0x05;
    pub const CLOCK_PONG: u8 = 0x06;
    pub const JOIN: u8 = 0x07;
    pub const JOIN_ACK: u8 = 0x08;
    pub const STREAM_DATA: u8 = 0x09;
}

/// Property count marking an object removed from the receiver's view.
pub const DESTROYED_MARKER: u16 = u16::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ObjectChange {
    Update {
        object_id: u32,
        class_id: u16,
        properties: Vec<(u16, PropertyValue)>,
    },
    Destroy {
        object_id: u32,
        class_id: u16,
    },
}

impl ObjectChange {
    pub fn object_id(&self) -> u32 {
        match self {
            ObjectChange::Update { object_id, .. } | ObjectChange::Destroy { object_id, .. } => {
                *object_id
            }
        }
    }
}

/// Body shared by deltas and snapshots.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WorldUpdate {
    pub tick: u64,
    pub objects: Vec<ObjectChange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RpcTarget {
    Server,
    Client(u32),
    Multicast,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RpcRequest {
    pub call_id: u64,
    pub method_id: u16,
    pub target: RpcTarget,
    pub reliable: bool,
    pub args: Vec<PropertyValue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RpcStatus {
    Ok,
    AppError(u16),
    Unroutable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RpcResponse {
    pub call_id: u64,
    pub status: RpcStatus,
    pub value: Option<PropertyValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MessageBody {
    ReplicationDelta(WorldUpdate),
    Snapshot(WorldUpdate),
    RpcRequest(RpcRequest),
    RpcResponse(RpcResponse),
    /// Timestamps are virtual milliseconds carried as IEEE-754 doubles.
    ClockPing { t0: f64 },
    ClockPong { t0: f64, t1: f64, t2: f64 },
    Join { client_id: u32, schema_version: u32 },
    JoinAck { client_id: u32, accepted: bool },
    StreamData {
        stream_id: u64,
        seq: u32,
        value: PropertyValue,
    },
}

impl MessageBody {
    pub fn body_type(&self) -> u8 {
        use body_type::*;
        match self {
            MessageBody::ReplicationDelta(_) => REPLICATION_DELTA,
            MessageBody::Snapshot(_) => SNAPSHOT,
            MessageBody::RpcRequest(_) => RPC_REQUEST,
            MessageBody::RpcResponse(_) => RPC_RESPONSE,
            MessageBody::ClockPing { .. } => CLOCK_PING,
            MessageBody::ClockPong { .. } => CLOCK_PONG,
            MessageBody::Join { .. } => JOIN,
            MessageBody::JoinAck { .. } => JOIN_ACK,
            MessageBody::StreamData { .. } => STREAM_DATA,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut out = vec![self.body_type()];
        match self {
            MessageBody::ReplicationDelta(u) | MessageBody::Snapshot(u) => put_update(&mut out, u)?,
            MessageBody::RpcRequest(req) => {
                out.extend_from_slice(&req.call_id.to_be_bytes());
                out.extend_from_slice(&req.method_id.to_be_bytes());
                match req.target {
                    RpcTarget::Server => out.push(0),
                    RpcTarget::Client(id) => {
                        out.push(1);
                        out.extend_from_slice(&id.to_be_bytes());
                    }
                    RpcTarget::Multicast => out.push(2),
                }
                out.push(u8::from(req.reliable));
                let n = u8::try_from(req.args.len()).map_err(|_| WireError::TooLong(req.args.len()))?;
                out.push(n);
                for a in &req.args {
                    put_value(&mut out, a)?;
                }
            }
            MessageBody::RpcResponse(resp) => {
                out.extend_from_slice(&resp.call_id.to_be_bytes());
                match resp.status {
                    RpcStatus::Ok => out.push(0),
                    RpcStatus::AppError(code) => {
                        out.push(1);
                        out.extend_from_slice(&code.to_be_bytes());
                    }
                    RpcStatus::Unroutable => out.push(2),
                }
                if let Some(v) = &resp.value {
                    put_value(&mut out, v)?;
                }
            }
            MessageBody::ClockPing { t0 } => out.extend_from_slice(&t0.to_be_bytes()),
            MessageBody::ClockPong { t0, t1, t2 } => {
                for t in [t0, t1, t2] {
                    out.extend_from_slice(&t.to_be_bytes());
                }
            }
            MessageBody::Join {
                client_id,
                schema_version,
            } => {
                out.extend_from_slice(&client_id.to_be_bytes());
                out.extend_from_slice(&schema_version.to_be_bytes());
            }
            MessageBody::JoinAck {
                client_id,
                accepted,
            } => {
                out.extend_from_slice(&client_id.to_be_bytes());
                out.push(u8::from(*accepted));
            }
            MessageBody::StreamData {
                stream_id,
                seq,
                value,
            } => {
                out.extend_from_slice(&stream_id.to_be_bytes());
                out.extend_from_slice(&seq.to_be_bytes());
                put_value(&mut out, value)?;
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        use body_type::*;
        let mut r = Reader::new(bytes);
        let ty = r.u8()?;
        let body = match ty {
            REPLICATION_DELTA => MessageBody::ReplicationDelta(read_update(&mut r)?),
            SNAPSHOT => MessageBody::Snapshot(read_update(&mut r)?),
            RPC_REQUEST => {
                let call_id = r.u64()?;
                let method_id = r.u16()?;
                let target = match r.u8()? {
                    0 => RpcTarget::Server,
                    1 => RpcTarget::Client(r.u32()?),
                    2 => RpcTarget::Multicast,
                    other => {
                        return Err(WireError::InvalidField {
                            field: "target",
                            value: other.into(),
                        })
                    }
                };
                let reliable = read_bool(&mut r, "reliable")?;
                let n = r.u8()?;
                let args = (0..n).map(|_| r.value()).collect::<Result<_, _>>()?;
                MessageBody::RpcRequest(RpcRequest {
                    call_id,
                    method_id,
                    target,
                    reliable,
                    args,
                })
            }
            RPC_RESPONSE => {
                let call_id = r.u64()?;
                let status = match r.u8()? {
                    0 => RpcStatus::Ok,
                    1 => RpcStatus::AppError(r.u16()?),
                    2 => RpcStatus::Unroutable,
                    other => {
                        return Err(WireError::InvalidField {
                            field: "status",
                            value: other.into(),
                        })
                    }
                };
                let value = if r.remaining() > 0 { Some(r.value()?) } else { None };
                MessageBody::RpcResponse(RpcResponse {
                    call_id,
                    status,
                    value,
                })
            }
            CLOCK_PING => MessageBody::ClockPing { t0: r.f64()? },
            CLOCK_PONG => MessageBody::ClockPong {
                t0: r.f64()?,
                t1: r.f64()?,
                t2: r.f64()?,
            },
            JOIN => MessageBody::Join {
                client_id: r.u32()?,
                schema_version: r.u32()?,
            },
            JOIN_ACK => MessageBody::JoinAck {
                client_id: r.u32()?,
                accepted: read_bool(&mut r, "accepted")?,
            },
            STREAM_DATA => MessageBody::StreamData {
                stream_id: r.u64()?,
                seq: r.u32()?,
                value: r.value()?,
            },
            other => return Err(WireError::UnknownBodyType(other)),
        };
        r.finish()?;
        Ok(body)
    }
}

fn read_bool(r: &mut Reader<'_>, field: &'static str) -> Result<bool, WireError> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(WireError::InvalidField {
            field,
            value: other.into(),
        }),
    }
}

fn put_update(out: &mut Vec<u8>, u: &WorldUpdate) -> Result<(), WireError> {
    out.extend_from_slice(&u.tick.to_be_bytes());
    put_count(out, u.objects.len())?;
    for change in &u.objects {
        match change {
            ObjectChange::Update {
                object_id,
                class_id,
                properties,
            } => {
                out.extend_from_slice(&object_id.to_be_bytes());
                out.extend_from_slice(&class_id.to_be_bytes());
                if properties.len() >= DESTROYED_MARKER as usize {
                    return Err(WireError::TooLong(properties.len()));
                }
                put_count(out, properties.len())?;
                for (prop_id, v) in properties {
                    out.extend_from_slice(&prop_id.to_be_bytes());
                    put_value(out, v)?;
                }
            }
            ObjectChange::Destroy {
                object_id,
                class_id,
            } => {
                out.extend_from_slice(&object_id.to_be_bytes());
                out.extend_from_slice(&class_id.to_be_bytes());
                out.extend_from_slice(&DESTROYED_MARKER.to_be_bytes());
            }
        }
    }
    Ok(())
}

fn read_update(r: &mut Reader<'_>) -> Result<WorldUpdate, WireError> {
    let tick = r.u64()?;
    let n = r.u16()?;
    let mut objects = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let object_id = r.u32()?;
        let class_id = r.u16()?;
        let count = r.u16()?;
        if count == DESTROYED_MARKER {
            objects.push(ObjectChange::Destroy {
                object_id,
                class_id,
            });
            continue;
        }
        let mut properties = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let prop_id = r.u16()?;
            properties.push((prop_id, r.value()?));
        }
        objects.push(ObjectChange::Update {
            object_id,
            class_id,
            properties,
        });
    }
    Ok(WorldUpdate { tick, objects })
}

// -- stored objects ---------------------------------------------------------

/// Persisted form of one object: every property, replicated or not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectRecord {
    pub object_id: u32,
    pub class_id: u16,
    /// `None` is server-owned.
    pub owner: Option<u32>,
    pub properties: Vec<(u16, PropertyValue)>,
}

impl ObjectRecord {
    /// Layout: object_id u32, class_id u16, owner tag u8 (0 server,
    /// 1 client followed by u32), property count u16, then
    /// (prop_id u16, value)*.
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.object_id.to_be_bytes());
        out.extend_from_slice(&self.class_id.to_be_bytes());
        match self.owner {
            None => out.push(0),
            Some(c) => {
                out.push(1);
                out.extend_from_slice(&c.to_be_bytes());
            }
        }
        put_count(&mut out, self.properties.len())?;
        for (id, v) in &self.properties {
            out.extend_from_slice(&id.to_be_bytes());
            put_value(&mut out, v)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let object_id = r.u32()?;
        let class_id = r.u16()?;
        let owner = match r.u8()? {
            0 => None,
            1 => Some(r.u32()?),
            other => {
                return Err(WireError::InvalidField {
                    field: "owner",
                    value: other.into(),
                })
            }
        };
        let n = r.u16()?;
        let mut properties = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let id = r.u16()?;
            properties.push((id, r.value()?));
        }
        r.finish()?;
        Ok(Self {
            object_id,
            class_id,
            owner,
            properties,
        })
    }
}
