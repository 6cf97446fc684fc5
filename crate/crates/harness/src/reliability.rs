//! Lossy-link driver: unary calls and one server stream between a client
//! and a server over a [`Duplex`], counting handler executions and stream
//! order at the far ends.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use worldsync_core::rpc::{ClientEvent, Reply, RpcClient, RpcServer};
use worldsync_core::schema::{parse_schema, Schema};
use worldsync_core::transport::{Address, Duplex, NetConditions, ReliableConfig, Side, SimNetwork};
use worldsync_core::wire::{MessageBody, PropertyValue, RpcStatus, RpcTarget};

use crate::HarnessError;

const SCHEMA: &str = "version 1
class Counter id=1
  prop n id=1 kind=int64 replicated
end
rpc Bump id=1 params=(int64) returns=int64 mode=unary
rpc Count id=2 params=(int64) returns=int64 mode=stream
";
const BUMP: u16 = 1;
const COUNT: u16 = 2;
const SESSION: u32 = 1;
const CLIENT: Address = Address::new(1, 5000);
const SERVER: Address = Address::new(2, 7777);

/// Retries per frame for the lossy runs. At 50 % loss each way a frame
/// and its ack both survive a round with probability 1/4, so the default
/// 20 retries leave a give-up chance near 0.3 % per message.
pub const LOSSY_MAX_RETRIES: u32 = 64;

pub fn schema() -> Arc<Schema> {
    Arc::new(parse_schema(SCHEMA).expect("built-in schema parses"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityConfig {
    pub loss_rate: f64,
    pub seed: u64,
    pub calls: u32,
    pub stream_items: u32,
    pub one_way_latency_ms: f64,
    pub jitter_ms: f64,
    pub duplicate_rate: f64,
    pub reorder_rate: f64,
    pub max_retries: u32,
    /// Send every request body twice, as an application retry would.
    pub resend: bool,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        Self {
            loss_rate: 0.0,
            seed: 0,
            calls: 50,
            stream_items: 50,
            one_way_latency_ms: 10.0,
            jitter_ms: 3.0,
            duplicate_rate: 0.05,
            reorder_rate: 0.1,
            max_retries: LOSSY_MAX_RETRIES,
            resend: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReliabilityOutcome {
    /// Handler executions per call argument.
    pub executions: BTreeMap<i64, u32>,
    /// Completed calls with the value they returned.
    pub completed: BTreeMap<u64, i64>,
    /// Stream items in the order the client received them.
    pub stream: Vec<i64>,
    pub stream_closed: bool,
    pub duplicate_requests: u64,
    pub retransmissions: u64,
    pub frames_dropped: u64,
    pub end_ms: f64,
}

impl ReliabilityOutcome {
    /// Every call ran once, every call completed with its own argument and
    /// the stream arrived whole and in order.
    pub fn exactly_once_in_order(&self, cfg: &ReliabilityConfig) -> bool {
        let calls = cfg.calls as i64;
        self.executions.len() == cfg.calls as usize
            && (0..calls).all(|i| self.executions.get(&i) == Some(&1))
            && self.completed.len() == cfg.calls as usize
            && self.completed.values().copied().eq(0..calls)
            && self.stream.iter().copied().eq(0..cfg.stream_items as i64)
            && self.stream_closed
    }
}

pub fn run_reliability(cfg: &ReliabilityConfig) -> Result<ReliabilityOutcome, HarnessError> {
    let schema = schema();
    let conditions = NetConditions {
        one_way_latency_ms: cfg.one_way_latency_ms,
        jitter_ms: cfg.jitter_ms,
        loss_rate: cfg.loss_rate,
        duplicate_rate: cfg.duplicate_rate,
        reorder_rate: cfg.reorder_rate,
        seed: cfg.seed,
    };
    let net = SimNetwork::new(conditions)?;
    let rc = ReliableConfig {
        max_retries: cfg.max_retries,
        ..ReliableConfig::for_latency(cfg.one_way_latency_ms + cfg.jitter_ms)
    };
    let mut link = Duplex::new(net, CLIENT, SERVER, rc)?;

    let executions: Arc<Mutex<BTreeMap<i64, u32>>> = Arc::default();
    let opened: Arc<Mutex<Vec<u64>>> = Arc::default();
    let mut server = RpcServer::new(schema.clone());
    let seen = executions.clone();
    server.register_handler(BUMP, move |_, args| {
        let n = args[0].as_int().unwrap_or(-1);
        *seen.lock().expect("executions").entry(n).or_insert(0) += 1;
        Reply::ok(PropertyValue::Int64(n))
    })?;
    let streams = opened.clone();
    server.register_stream_handler(COUNT, move |ctx, _| {
        streams.lock().expect("streams").push(ctx.call_id);
        Ok(())
    })?;
    server.join(SESSION);
    // the transport retransmits; calls never time out on their own
    let mut client = RpcClient::new(schema, SESSION, f64::INFINITY);

    let mut out = ReliabilityOutcome::default();
    let (handle, open) = client.open_stream(COUNT, vec![PropertyValue::Int64(cfg.stream_items as i64)])?;
    link.send(Side::A, &open.encode()?, true)?;
    for i in 0..cfg.calls {
        let (_, body) = client.invoke(BUMP, RpcTarget::Server, vec![PropertyValue::Int64(i as i64)], true, link.now_ms())?;
        let bytes = body.encode()?;
        link.send(Side::A, &bytes, true)?;
        if cfg.resend {
            link.send(Side::A, &bytes, true)?;
        }
    }

    while let Some(batch) = link.advance()? {
        for (side, m) in batch {
            let body = MessageBody::decode(&m.bytes)?;
            match side {
                Side::B => {
                    server.on_message(SESSION, &body)?;
                    let fresh: Vec<u64> = std::mem::take(&mut *opened.lock().expect("streams"));
                    for stream_id in fresh {
                        for k in 0..cfg.stream_items {
                            server.push(SESSION, stream_id, PropertyValue::Int64(k as i64))?;
                        }
                        server.close(SESSION, stream_id)?;
                    }
                    for o in server.drain_outbound() {
                        link.send(Side::B, &o.body.encode()?, o.reliable)?;
                    }
                }
                Side::A => {
                    client.on_message(&body);
                    for e in client.events() {
                        match e {
                            ClientEvent::Completed { call_id, result: Ok(v) } => {
                                out.completed.insert(call_id, v.and_then(|v| v.as_int()).unwrap_or(-1));
                            }
                            ClientEvent::StreamItem { stream_id, value } if stream_id == handle.stream_id => {
                                out.stream.push(value.as_int().unwrap_or(-1));
                            }
                            ClientEvent::StreamEnd { stream_id, status } if stream_id == handle.stream_id => {
                                out.stream_closed = status == RpcStatus::Ok;
                            }
                            _ => {}
                        }
                    }
                }
            }
        }
    }

    out.executions = executions.lock().expect("executions").clone();
    out.duplicate_requests = server.duplicate_requests();
    out.retransmissions = link.a.reliable().stats().retransmissions + link.b.reliable().stats().retransmissions;
    out.frames_dropped = link.net.stats().dropped;
    out.end_ms = link.now_ms();
    Ok(out)
}
