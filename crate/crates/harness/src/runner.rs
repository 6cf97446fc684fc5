//! Runs a scenario over the simulated network, one virtual event at a time.
//!
//! Every message between hosts goes through a reliable connection on a
//! shared [`SimNetwork`]. Servers handle one request at a time; the time a
//! request waits in front of a busy server counts as processing.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use worldsync_core::broker::{Broker, DeliveryMode, Message, Publisher};
use worldsync_core::cluster::{BackendPool, FlowKey, ScenePinning};
use worldsync_core::replication::{
    Owner, RelevanceRule, Replica, ReplicatedObject, ReplicationError, ReplicationServer,
};
use worldsync_core::rpc::{CallContext, CallFailure, ClientEvent, Reply, RpcClient, RpcServer};
use worldsync_core::statestore::{object_key, CasOutcome, MemoryStore, StateStore};
use worldsync_core::transport::{Address, Connection, Delivery, NetConditions, ReliableConfig, SimNetwork, DEFAULT_MTU};
use worldsync_core::wire::{MessageBody, ObjectChange, ObjectRecord, PropertyValue, RpcRequest, RpcTarget};

use crate::report::{
    class_stats, frame_verdicts, BrokerSummary, CallStats, EventClass, EventSample, LatencyReport, Meta,
    StoreSummary, REPORT_FORMAT,
};
use crate::scenario::{Effect, Fault, Prepared, Route, Scenario, Topology, WriteOp, WriteTarget};
use crate::HarnessError;

const CLIENT_NODE_BASE: u32 = 10_000;
/// Added to a client's node id on each address change.
const GENERATION_STRIDE: u32 = 1_000_000;
const CLIENT_PORT: u16 = 40_000;
const SERVER_NODE_BASE: u32 = 1;
const SERVER_PORT: u16 = 7777;
const BROKER_ADDR: Address = Address::new(500, 9092);
const WORKER_NODE_BASE: u32 = 600;
const WORKER_PORT: u16 = 7000;
/// Balancer address every client targets.
const VIP: Address = Address::new(0, 80);

pub const WORKER_SESSION_BASE: u32 = 1_000_000;
pub const SHARED_OBJECT_BASE: u32 = 1_000_000;
const TOPIC: &str = "ingest";
const GROUP: &str = "workers";
/// Application error: the object the call writes does not exist here.
pub const NO_SUCH_OBJECT: u16 = 100;

pub fn avatar_id(client: usize) -> u32 {
    client as u32 + 1
}

pub fn shared_id(scene: usize) -> u32 {
    SHARED_OBJECT_BASE + scene as u32
}

/// Report plus what the tests look at.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: LatencyReport,
    pub samples: Vec<EventSample>,
    /// `world/<id>` for in-memory authorities, `store/<id>` for the store.
    pub final_state: BTreeMap<String, ObjectRecord>,
    /// Joined clients whose replica differs from their server's world.
    pub diverged_replicas: usize,
    /// Requests handled per backend.
    pub served: Vec<u64>,
}

pub fn run_scenario(s: &Scenario) -> Result<LatencyReport, HarnessError> {
    Ok(run(s)?.report)
}

pub fn run(s: &Scenario) -> Result<RunOutcome, HarnessError> {
    let p = s.prepare()?;
    Sim::new(&p)?.run()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Node {
    Client(usize),
    Backend(usize),
    Broker,
    Worker(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Stateful,
    Stateless,
}

#[derive(Debug, Clone, Copy)]
enum Timer {
    Behavior { client: usize, behavior: usize },
    JobStep { backend: usize, epoch: u64 },
    ReplicationTick { backend: usize, epoch: u64 },
    BrokerTick,
    WorkerPoll { worker: usize },
    Fault(usize),
    Rejoin { client: usize },
}

struct Scheduled {
    at: f64,
    seq: u64,
    timer: Timer,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap pops the earliest
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone)]
struct Call {
    behavior: usize,
    arg: PropertyValue,
    first_issue: f64,
    attempts: u32,
    /// `None` while waiting to be (re)sent.
    call_id: Option<u64>,
}

struct Client {
    id: u32,
    scene: usize,
    addr: Address,
    generation: u32,
    rpc: RpcClient,
    replica: Replica,
    server: Option<usize>,
    joining: Option<usize>,
    queue: VecDeque<(usize, PropertyValue)>,
    inflight: Option<Call>,
    fired: Vec<u32>,
    next_publish: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Processing,
    Read,
    Cas,
    Done,
}

#[derive(Debug, Clone)]
struct Job {
    session: u32,
    call_id: u64,
    actor: usize,
    effect: usize,
    arg: PropertyValue,
    stage: Stage,
    read: Option<(u64, ObjectRecord)>,
    result: Option<Result<Option<PropertyValue>, u16>>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Timing {
    recv: f64,
    start: f64,
    done: f64,
    store_ms: f64,
}

type Inbox = Arc<Mutex<Vec<(CallContext, Vec<PropertyValue>)>>>;

struct Backend {
    role: Role,
    addr: Address,
    up: bool,
    epoch: u64,
    rpc: RpcServer,
    inbox: Inbox,
    scenes: BTreeMap<usize, ReplicationServer>,
    sessions: BTreeMap<u32, Address>,
    by_addr: BTreeMap<Address, u32>,
    queue: VecDeque<Job>,
    current: Option<Job>,
    /// Latest commit time per (scene, object, property) not yet replicated.
    commits: BTreeMap<(usize, u32, u16), f64>,
    served: u64,
}

struct Worker {
    addr: Address,
    session: u32,
    rpc: RpcClient,
}

struct IngestTag {
    client: usize,
    sensor_call: u64,
    published: f64,
    at_broker: f64,
    forwarded: f64,
}

struct BrokerSide {
    broker: Broker,
    publisher: Publisher,
    pushed: Arc<Mutex<Vec<(usize, Message)>>>,
    published: u64,
    delivered: u64,
}

struct Sim<'a> {
    p: &'a Prepared,
    s: &'a Scenario,
    net: SimNetwork,
    now: f64,
    seq: u64,
    timers: BinaryHeap<Scheduled>,
    conns: BTreeMap<(Address, Address), Connection>,
    active: BTreeSet<(Address, Address)>,
    nodes: BTreeMap<Address, Node>,
    clients: Vec<Client>,
    backends: Vec<Backend>,
    stateful_pool: Option<BackendPool>,
    stateless_pool: Option<BackendPool>,
    pinning: ScenePinning,
    store: Option<MemoryStore>,
    broker: Option<BrokerSide>,
    workers: Vec<Worker>,
    method_effect: BTreeMap<u16, usize>,
    timing: BTreeMap<(u32, u64), Timing>,
    /// (sensor id, sensor call id) -> (published, reached broker)
    publications: BTreeMap<(u32, u64), (f64, Option<f64>)>,
    ingest: BTreeMap<(u32, u64), IngestTag>,
    /// (client, backend, epoch, tick) -> (tick time, commit times)
    repl_tags: BTreeMap<(usize, usize, u64, u64), (f64, Vec<f64>)>,
    samples: Vec<EventSample>,
    calls: CallStats,
    disruptions: u64,
    give_ups: u64,
    end_limit: f64,
}

impl<'a> Sim<'a> {
    fn new(p: &'a Prepared) -> Result<Self, HarnessError> {
        let s = &p.scenario;
        let mut defaults = s.net.uplink;
        defaults.seed = s.seed;
        let net = SimNetwork::new(defaults)?;
        let mut method_effect = BTreeMap::new();
        for (i, e) in p.effects.iter().enumerate() {
            method_effect.entry(e.method_id).or_insert(i);
        }
        let mut sim = Sim {
            p,
            s,
            net,
            now: 0.0,
            seq: 0,
            timers: BinaryHeap::new(),
            conns: BTreeMap::new(),
            active: BTreeSet::new(),
            nodes: BTreeMap::new(),
            clients: Vec::new(),
            backends: Vec::new(),
            stateful_pool: None,
            stateless_pool: None,
            pinning: ScenePinning::new(),
            store: s.store.map(|profile| MemoryStore::new(profile, s.seed)),
            broker: None,
            workers: Vec::new(),
            method_effect,
            timing: BTreeMap::new(),
            publications: BTreeMap::new(),
            ingest: BTreeMap::new(),
            repl_tags: BTreeMap::new(),
            samples: Vec::new(),
            calls: CallStats::default(),
            disruptions: 0,
            give_ups: 0,
            end_limit: s.duration_ms + s.drain_ms,
        };
        sim.build()?;
        Ok(sim)
    }

    // -- setup --------------------------------------------------------------

    fn build(&mut self) -> Result<(), HarnessError> {
        let s = self.s;
        let (stateful, stateless) = match s.topology {
            Topology::Direct | Topology::StatefulDedicated | Topology::BrokeredIngestion => (s.servers, 0),
            Topology::StatelessRpc => (0, s.servers),
            Topology::Hybrid => (s.servers, s.stateless_servers),
        };
        for i in 0..stateful + stateless {
            let role = if i < stateful { Role::Stateful } else { Role::Stateless };
            let addr = Address::new(SERVER_NODE_BASE + i as u32, SERVER_PORT);
            let inbox = Inbox::default();
            self.backends.push(Backend {
                role,
                addr,
                up: true,
                epoch: 0,
                rpc: self.rpc_server(&inbox)?,
                inbox,
                scenes: BTreeMap::new(),
                sessions: BTreeMap::new(),
                by_addr: BTreeMap::new(),
                queue: VecDeque::new(),
                current: None,
                commits: BTreeMap::new(),
                served: 0,
            });
            self.nodes.insert(addr, Node::Backend(i));
        }
        if stateful > 0 {
            self.stateful_pool = Some(BackendPool::new((0..stateful as u32).collect(), s.policy)?);
        }
        if stateless > 0 {
            let ids = (stateful as u32..(stateful + stateless) as u32).collect();
            self.stateless_pool = Some(BackendPool::new(ids, s.policy)?.with_idle_expiry(None));
        }
        if let Some(store) = &self.store {
            for c in 0..s.clients.count {
                let rec = self.initial_object(avatar_id(c), Some(avatar_id(c)));
                store.put(&object_key(rec.object_id), rec.encode()?, 0.0)?;
            }
            for scene in 0..s.clients.scenes {
                let rec = self.initial_object(shared_id(scene), None);
                store.put(&object_key(rec.object_id), rec.encode()?, 0.0)?;
            }
        }
        for i in 0..s.clients.count {
            let id = avatar_id(i);
            let addr = Address::new(CLIENT_NODE_BASE + i as u32, CLIENT_PORT);
            self.clients.push(Client {
                id,
                scene: i % s.clients.scenes,
                addr,
                generation: 0,
                rpc: RpcClient::new(self.p.schema.clone(), id, s.server.rpc_timeout_ms),
                replica: Replica::new(self.p.schema.clone()),
                server: None,
                joining: None,
                queue: VecDeque::new(),
                inflight: None,
                fired: vec![0; s.clients.behaviors.len()],
                next_publish: 1,
            });
            self.nodes.insert(addr, Node::Client(i));
        }
        // scenes in order, so placement is deterministic
        for scene in 0..s.clients.scenes {
            if let Some(b) = self.place_scene(scene)? {
                self.host_scene(b, scene)?;
            }
        }
        if self.joins_server() {
            for c in 0..self.clients.len() {
                self.join(c)?;
            }
        }
        if s.topology == Topology::BrokeredIngestion {
            self.build_broker()?;
        }
        for b in 0..self.backends.len() {
            if self.backends[b].role == Role::Stateful {
                let epoch = self.backends[b].epoch;
                self.schedule(s.server.tick_ms, Timer::ReplicationTick { backend: b, epoch });
            }
        }
        for c in 0..self.clients.len() {
            for (k, beh) in s.clients.behaviors.iter().enumerate() {
                if beh.count == Some(0) {
                    continue;
                }
                // spread clients evenly over one period
                let offset = beh.every_ms * c as f64 / self.clients.len() as f64;
                self.schedule(beh.start_ms + offset, Timer::Behavior { client: c, behavior: k });
            }
        }
        for (i, f) in s.faults.iter().enumerate() {
            self.schedule(f.at_ms(), Timer::Fault(i));
        }
        Ok(())
    }

    fn build_broker(&mut self) -> Result<(), HarnessError> {
        let cfg = self.s.broker.unwrap_or_default();
        let mut broker = Broker::new();
        broker.create_topic(TOPIC, cfg.partitions)?;
        broker.create_group(GROUP, TOPIC, cfg.delivery)?;
        let pushed: Arc<Mutex<Vec<(usize, Message)>>> = Arc::default();
        for w in 0..cfg.workers {
            let member = format!("worker-{w}");
            match cfg.delivery {
                DeliveryMode::Pull => broker.join_group(GROUP, &member)?,
                DeliveryMode::Push => {
                    let sink = pushed.clone();
                    broker.subscribe_push(GROUP, &member, move |m| {
                        sink.lock().expect("sink").push((w, m.clone()));
                        Ok(())
                    })?
                }
            }
            let addr = Address::new(WORKER_NODE_BASE + w as u32, WORKER_PORT);
            let session = WORKER_SESSION_BASE + w as u32;
            // forwarding is retried by the transport; calls never time out
            let rpc = RpcClient::new(self.p.schema.clone(), session, f64::INFINITY);
            self.workers.push(Worker { addr, session, rpc });
            self.nodes.insert(addr, Node::Worker(w));
            self.send(
                addr,
                self.backends[0].addr,
                &MessageBody::Join {
                    client_id: session,
                    schema_version: self.p.schema.version,
                },
            )?;
            if cfg.delivery == DeliveryMode::Pull {
                let offset = cfg.poll_ms * w as f64 / cfg.workers as f64;
                self.schedule(offset, Timer::WorkerPoll { worker: w });
            }
        }
        self.nodes.insert(BROKER_ADDR, Node::Broker);
        self.broker = Some(BrokerSide {
            publisher: broker.publisher(),
            broker,
            pushed,
            published: 0,
            delivered: 0,
        });
        self.schedule(cfg.tick_ms, Timer::BrokerTick);
        Ok(())
    }

    fn rpc_server(&self, inbox: &Inbox) -> Result<RpcServer, HarnessError> {
        let mut rpc = RpcServer::new(self.p.schema.clone());
        for method in self.method_effect.keys() {
            let inbox = inbox.clone();
            rpc.register_handler(*method, move |ctx, args| {
                inbox.lock().expect("inbox").push((*ctx, args.to_vec()));
                Reply::Later
            })?;
        }
        Ok(rpc)
    }

    fn initial_object(&self, object_id: u32, owner: Option<u32>) -> ObjectRecord {
        initial_object(self.p, object_id, owner)
    }

    fn joins_server(&self) -> bool {
        matches!(
            self.s.topology,
            Topology::Direct | Topology::StatefulDedicated | Topology::Hybrid
        )
    }

    fn place_scene(&mut self, scene: usize) -> Result<Option<usize>, HarnessError> {
        let Some(pool) = self.stateful_pool.as_mut() else {
            return Ok(None);
        };
        if self.s.topology == Topology::BrokeredIngestion || self.s.topology == Topology::Direct {
            return Ok(Some(0));
        }
        Ok(Some(self.pinning.route(scene as u32, pool)?.backend as usize))
    }

    /// Fresh in-memory world for `scene` on backend `b`.
    fn host_scene(&mut self, b: usize, scene: usize) -> Result<(), HarnessError> {
        if self.backends[b].scenes.contains_key(&scene) {
            return Ok(());
        }
        let mut rs = ReplicationServer::new(self.p.schema.clone(), RelevanceRule::All)?;
        let mut objects: Vec<ObjectRecord> = (0..self.s.clients.count)
            .filter(|c| c % self.s.clients.scenes == scene)
            .map(|c| self.initial_object(avatar_id(c), Some(avatar_id(c))))
            .collect();
        objects.push(self.initial_object(shared_id(scene), None));
        for rec in objects {
            let obj = ReplicatedObject::from_record(&rec);
            let props: Vec<_> = obj.properties.into_iter().collect();
            rs.world_mut().spawn_with_id(obj.object_id, obj.class_id, obj.owner, &props)?;
        }
        rs.step()?;
        self.backends[b].scenes.insert(scene, rs);
        Ok(())
    }

    fn schedule(&mut self, at: f64, timer: Timer) {
        self.seq += 1;
        self.timers.push(Scheduled { at, seq: self.seq, timer });
    }

    // -- transport ----------------------------------------------------------

    fn link_conditions(&self, from: Address, to: Address) -> NetConditions {
        let net = &self.s.net;
        let mut c = match (self.nodes.get(&from), self.nodes.get(&to)) {
            (Some(Node::Client(_)), _) => net.uplink,
            (_, Some(Node::Client(_))) => net.downlink,
            _ => net.internal,
        };
        c.seed = self.s.seed;
        c
    }

    fn conn(&mut self, local: Address, remote: Address) -> Result<&mut Connection, HarnessError> {
        if !self.conns.contains_key(&(local, remote)) {
            for a in [local, remote] {
                if !self.net.is_registered(a) {
                    self.net.register(a)?;
                }
            }
            let out = self.link_conditions(local, remote);
            let back = self.link_conditions(remote, local);
            self.net.set_link(local, remote, out)?;
            self.net.set_link(remote, local, back)?;
            let worst = out.one_way_latency_ms.max(back.one_way_latency_ms) + out.jitter_ms.max(back.jitter_ms);
            let cfg = ReliableConfig {
                max_retries: self.s.server.max_retries,
                mtu: DEFAULT_MTU,
                ..ReliableConfig::for_latency(worst)
            };
            self.conns.insert((local, remote), Connection::new(local, remote, cfg));
        }
        Ok(self.conns.get_mut(&(local, remote)).expect("inserted"))
    }

    fn send(&mut self, from: Address, to: Address, body: &MessageBody) -> Result<(), HarnessError> {
        let bytes = body.encode()?;
        let now = self.now;
        let frames = self.conn(from, to)?.send_reliable(&bytes, now)?;
        for f in frames {
            self.net.send(from, to, f)?;
        }
        self.active.insert((from, to));
        Ok(())
    }

    fn drop_conns_of(&mut self, addr: Address) {
        self.conns.retain(|(l, r), _| *l != addr && *r != addr);
        self.active.retain(|(l, r)| *l != addr && *r != addr);
    }

    fn poll_conns(&mut self) -> Result<(), HarnessError> {
        let now = self.now;
        let due: Vec<_> = self
            .active
            .iter()
            .copied()
            .filter(|k| self.conns.get(k).and_then(Connection::next_deadline).is_some_and(|d| d <= now))
            .collect();
        for key in due {
            let conn = self.conns.get_mut(&key).expect("active");
            match conn.poll(now) {
                Ok(frames) => {
                    for f in frames {
                        self.net.send(key.0, key.1, f)?;
                    }
                }
                Err(_) => {
                    self.give_ups += 1;
                    self.conns.remove(&key);
                }
            }
        }
        let conns = &self.conns;
        self.active.retain(|k| conns.get(k).is_some_and(|c| c.next_deadline().is_some()));
        Ok(())
    }

    fn deliver(&mut self, d: Delivery) -> Result<(), HarnessError> {
        let Some(&node) = self.nodes.get(&d.to) else {
            return Ok(());
        };
        if let Node::Backend(b) = node {
            if !self.backends[b].up {
                return Ok(());
            }
        }
        let incoming = self.conn(d.to, d.from)?.on_frame(&d.frame);
        self.active.insert((d.to, d.from));
        for m in incoming {
            let Ok(body) = MessageBody::decode(&m.bytes) else {
                continue;
            };
            match node {
                Node::Client(c) => self.on_client(c, d.from, body)?,
                Node::Backend(b) => self.on_backend(b, d.from, body)?,
                Node::Broker => self.on_broker(d.from, body)?,
                Node::Worker(w) => {
                    self.workers[w].rpc.on_message(&body);
                    self.workers[w].rpc.events();
                }
            }
        }
        Ok(())
    }

    // -- main loop ----------------------------------------------------------

    fn next_event(&self) -> Option<f64> {
        let now = self.now;
        let mut t = self.timers.peek().map(|s| s.at);
        let mut consider = |x: f64| {
            let x = x.max(now);
            t = Some(t.map_or(x, |t: f64| t.min(x)));
        };
        if let Some(a) = self.net.next_arrival_ms() {
            consider(a);
        }
        for k in &self.active {
            if let Some(d) = self.conns.get(k).and_then(Connection::next_deadline) {
                consider(d);
            }
        }
        for c in &self.clients {
            if c.inflight.as_ref().is_some_and(|call| call.call_id.is_some()) {
                if let Some(d) = c.rpc.next_deadline() {
                    consider(d);
                }
            }
        }
        t
    }

    fn run(mut self) -> Result<RunOutcome, HarnessError> {
        while let Some(t) = self.next_event() {
            if t > self.end_limit {
                break;
            }
            self.now = t.max(self.now);
            for d in self.net.tick(self.now) {
                self.deliver(d)?;
            }
            while self.timers.peek().is_some_and(|s| s.at <= self.now) {
                let s = self.timers.pop().expect("peeked");
                self.on_timer(s.timer)?;
            }
            for c in 0..self.clients.len() {
                if self.clients[c].inflight.as_ref().is_some_and(|call| call.call_id.is_some())
                    && self.clients[c].rpc.next_deadline().is_some_and(|d| d <= self.now)
                {
                    let now = self.now;
                    self.clients[c].rpc.poll(now);
                    self.client_events(c)?;
                }
            }
            self.poll_conns()?;
            if self.now >= self.s.duration_ms && self.quiet() {
                break;
            }
        }
        self.finish()
    }

    fn quiet(&self) -> bool {
        if self.net.in_flight() > 0 || !self.active.is_empty() {
            return false;
        }
        if self.clients.iter().any(|c| c.inflight.is_some() || !c.queue.is_empty()) {
            return false;
        }
        if self
            .backends
            .iter()
            .any(|b| b.up && (b.current.is_some() || !b.queue.is_empty() || !b.commits.is_empty()))
        {
            return false;
        }
        if let Some(bs) = &self.broker {
            if bs.broker.lag(GROUP).unwrap_or(0) > 0 || !self.ingest.is_empty() {
                return false;
            }
        }
        true
    }

    fn on_timer(&mut self, timer: Timer) -> Result<(), HarnessError> {
        match timer {
            Timer::Behavior { client, behavior } => self.fire(client, behavior),
            Timer::JobStep { backend, epoch } => {
                if self.backends[backend].up && self.backends[backend].epoch == epoch {
                    self.job_step(backend)?;
                }
                Ok(())
            }
            Timer::ReplicationTick { backend, epoch } => {
                if self.backends[backend].up && self.backends[backend].epoch == epoch {
                    self.replicate(backend)?;
                    if !(self.now >= self.s.duration_ms && self.quiet()) {
                        self.schedule(self.now + self.s.server.tick_ms, timer);
                    }
                }
                Ok(())
            }
            Timer::BrokerTick => {
                self.broker_tick()?;
                if !(self.now >= self.s.duration_ms && self.quiet()) {
                    let cfg = self.s.broker.unwrap_or_default();
                    self.schedule(self.now + cfg.tick_ms, timer);
                }
                Ok(())
            }
            Timer::WorkerPoll { worker } => {
                self.worker_poll(worker)?;
                if !(self.now >= self.s.duration_ms && self.quiet()) {
                    let cfg = self.s.broker.unwrap_or_default();
                    self.schedule(self.now + cfg.poll_ms, timer);
                }
                Ok(())
            }
            Timer::Fault(i) => self.fault(self.s.faults[i]),
            Timer::Rejoin { client } => self.join(client),
        }
    }

    // -- clients ------------------------------------------------------------

    fn fire(&mut self, c: usize, k: usize) -> Result<(), HarnessError> {
        let beh = &self.s.clients.behaviors[k];
        if self.now > self.s.duration_ms {
            return Ok(());
        }
        let n = self.clients[c].fired[k];
        let values = &self.p.values[k];
        let arg = values[n as usize % values.len()].clone();
        self.clients[c].fired[k] += 1;
        if beh.count.is_none_or(|max| n + 1 < max) && self.now + beh.every_ms <= self.s.duration_ms {
            self.schedule(self.now + beh.every_ms, Timer::Behavior { client: c, behavior: k });
        }
        self.calls.issued += 1;
        if self.s.topology == Topology::BrokeredIngestion {
            return self.publish(c, k, arg);
        }
        self.clients[c].queue.push_back((k, arg));
        self.try_issue(c)
    }

    fn publish(&mut self, c: usize, k: usize, arg: PropertyValue) -> Result<(), HarnessError> {
        let client = &mut self.clients[c];
        let call_id = client.next_publish;
        client.next_publish += 1;
        let body = MessageBody::RpcRequest(RpcRequest {
            call_id,
            method_id: self.p.effects[k].method_id,
            target: RpcTarget::Server,
            reliable: true,
            args: vec![arg],
        });
        self.publications.insert((client.id, call_id), (self.now, None));
        let from = client.addr;
        self.send(from, BROKER_ADDR, &body)
    }

    fn try_issue(&mut self, c: usize) -> Result<(), HarnessError> {
        let client = &mut self.clients[c];
        if client.inflight.is_none() {
            let Some((behavior, arg)) = client.queue.pop_front() else {
                return Ok(());
            };
            client.inflight = Some(Call {
                behavior,
                arg,
                first_issue: self.now,
                attempts: 0,
                call_id: None,
            });
        }
        if client.inflight.as_ref().is_some_and(|call| call.call_id.is_none()) {
            self.issue(c)?;
        }
        Ok(())
    }

    fn route(&mut self, c: usize, effect: &Effect) -> Result<Option<usize>, HarnessError> {
        let stateless = match self.s.topology {
            Topology::StatelessRpc => true,
            Topology::Hybrid => effect.via == Route::Stateless,
            _ => false,
        };
        if !stateless {
            return Ok(self.clients[c].server);
        }
        let pool = self.stateless_pool.as_mut().expect("stateless pool");
        let flow = FlowKey::new(self.clients[c].addr, VIP);
        match pool.route(flow, self.now) {
            Ok(b) => Ok(Some(b as usize)),
            Err(_) => Ok(None),
        }
    }

    fn issue(&mut self, c: usize) -> Result<(), HarnessError> {
        let call = self.clients[c].inflight.clone().expect("inflight");
        let effect = self.p.effects[call.behavior].clone();
        let Some(b) = self.route(c, &effect)? else {
            if self.stateless_pool.as_ref().is_some_and(|p| p.up_backends().is_empty()) && self.route_is_stateless(&effect) {
                self.calls.failed += 1;
                self.clients[c].inflight = None;
                return self.try_issue(c);
            }
            // waiting for a (re)join
            return Ok(());
        };
        let now = self.now;
        let client = &mut self.clients[c];
        let (call_id, body) = client
            .rpc
            .invoke(effect.method_id, RpcTarget::Server, vec![call.arg.clone()], true, now)?;
        let inflight = client.inflight.as_mut().expect("inflight");
        inflight.call_id = Some(call_id);
        inflight.attempts += 1;
        let from = client.addr;
        self.send(from, self.backends[b].addr, &body)
    }

    fn route_is_stateless(&self, effect: &Effect) -> bool {
        self.s.topology == Topology::StatelessRpc || (self.s.topology == Topology::Hybrid && effect.via == Route::Stateless)
    }

    fn client_events(&mut self, c: usize) -> Result<(), HarnessError> {
        for e in self.clients[c].rpc.events() {
            let ClientEvent::Completed { call_id, result } = e else {
                continue;
            };
            let Some(call) = self.clients[c].inflight.clone() else {
                continue;
            };
            if call.call_id != Some(call_id) {
                continue;
            }
            match result {
                Ok(_) => {
                    self.record_call(c, &call, call_id);
                    self.calls.completed += 1;
                    self.clients[c].inflight = None;
                }
                Err(CallFailure::Timeout) if call.attempts < self.s.server.max_attempts => {
                    self.calls.retries += 1;
                    let inflight = self.clients[c].inflight.as_mut().expect("inflight");
                    inflight.call_id = None;
                }
                Err(_) => {
                    self.calls.failed += 1;
                    self.clients[c].inflight = None;
                }
            }
            self.try_issue(c)?;
        }
        Ok(())
    }

    fn record_call(&mut self, c: usize, call: &Call, call_id: u64) {
        let Some(t) = self.timing.remove(&(self.clients[c].id, call_id)) else {
            return;
        };
        let processing = (t.start - t.recv) + (t.done - t.start - t.store_ms);
        self.samples.push(EventSample {
            class: EventClass::Apply,
            start_ms: call.first_issue,
            end_ms: t.done,
            network_ms: t.recv - call.first_issue,
            store_ms: t.store_ms,
            processing_ms: processing,
        });
        self.samples.push(EventSample {
            class: EventClass::Rpc,
            start_ms: call.first_issue,
            end_ms: self.now,
            network_ms: (t.recv - call.first_issue) + (self.now - t.done),
            store_ms: t.store_ms,
            processing_ms: processing,
        });
    }

    fn on_client(&mut self, c: usize, from: Address, body: MessageBody) -> Result<(), HarnessError> {
        let Some(&Node::Backend(b)) = self.nodes.get(&from) else {
            return Ok(());
        };
        match body {
            MessageBody::JoinAck { accepted, .. } => {
                let client = &mut self.clients[c];
                if accepted && client.joining == Some(b) {
                    client.joining = None;
                    client.server = Some(b);
                    self.try_issue(c)?;
                }
            }
            MessageBody::Snapshot(u) => {
                if self.clients[c].joining == Some(b) || self.clients[c].server == Some(b) {
                    self.clients[c].replica.apply_snapshot(&u)?;
                }
            }
            MessageBody::ReplicationDelta(u) => {
                if self.clients[c].server != Some(b) && self.clients[c].joining != Some(b) {
                    return Ok(());
                }
                let applied = match self.clients[c].replica.apply_delta(&u) {
                    Ok(a) => a,
                    Err(ReplicationError::SchemaVersionMismatch(_)) => false,
                    Err(e) => return Err(e.into()),
                };
                let epoch = self.backends[b].epoch;
                if let Some((tick_at, commits)) = self.repl_tags.remove(&(c, b, epoch, u.tick)) {
                    if applied {
                        for commit in commits {
                            self.samples.push(EventSample {
                                class: EventClass::Replication,
                                start_ms: commit,
                                end_ms: self.now,
                                network_ms: self.now - tick_at,
                                store_ms: 0.0,
                                processing_ms: tick_at - commit,
                            });
                        }
                    }
                }
            }
            body @ MessageBody::RpcResponse(_) => {
                self.clients[c].rpc.on_message(&body);
                self.client_events(c)?;
            }
            _ => {}
        }
        Ok(())
    }

    fn join(&mut self, c: usize) -> Result<(), HarnessError> {
        let scene = self.clients[c].scene;
        let Some(b) = (match self.place_scene(scene) {
            Ok(b) => b,
            Err(HarnessError::Cluster(_)) => None,
            Err(e) => return Err(e),
        }) else {
            // nothing up; try again later
            self.schedule(self.now + self.s.server.rejoin_after_ms, Timer::Rejoin { client: c });
            return Ok(());
        };
        self.host_scene(b, scene)?;
        let client = &mut self.clients[c];
        client.joining = Some(b);
        client.server = None;
        let body = MessageBody::Join {
            client_id: client.id,
            schema_version: self.p.schema.version,
        };
        let from = client.addr;
        self.send(from, self.backends[b].addr, &body)
    }

    // -- servers ------------------------------------------------------------

    fn on_backend(&mut self, b: usize, from: Address, body: MessageBody) -> Result<(), HarnessError> {
        match body {
            MessageBody::Join { client_id, schema_version } => {
                let accepted = schema_version == self.p.schema.version;
                let ack = MessageBody::JoinAck { client_id, accepted };
                if !accepted {
                    return self.send(self.backends[b].addr, from, &ack);
                }
                let be = &mut self.backends[b];
                be.rpc.join(client_id);
                if let Some(old) = be.sessions.insert(client_id, from) {
                    be.by_addr.remove(&old);
                }
                be.by_addr.insert(from, client_id);
                let mut snapshot = None;
                if be.role == Role::Stateful && client_id < WORKER_SESSION_BASE {
                    let scene = self.clients[client_id as usize - 1].scene;
                    self.host_scene(b, scene)?;
                    let rs = self.backends[b].scenes.get_mut(&scene).expect("hosted");
                    snapshot = Some(rs.join(client_id, [0.0; 3])?);
                }
                let addr = self.backends[b].addr;
                self.send(addr, from, &ack)?;
                if let Some(s) = snapshot {
                    self.send(addr, from, &MessageBody::Snapshot(s))?;
                }
                Ok(())
            }
            body @ MessageBody::RpcRequest(_) => {
                let MessageBody::RpcRequest(req) = &body else { unreachable!() };
                let session = match self.backends[b].role {
                    Role::Stateful => match self.backends[b].by_addr.get(&from) {
                        Some(s) => *s,
                        // unknown flow: the session lives elsewhere or was lost
                        None => return Ok(()),
                    },
                    Role::Stateless => {
                        let Some(&Node::Client(c)) = self.nodes.get(&from) else {
                            return Ok(());
                        };
                        let id = self.clients[c].id;
                        let be = &mut self.backends[b];
                        if !be.rpc.is_joined(id) {
                            be.rpc.join(id);
                        }
                        be.sessions.insert(id, from);
                        id
                    }
                };
                self.timing.entry((session, req.call_id)).or_insert(Timing {
                    recv: self.now,
                    ..Timing::default()
                });
                self.backends[b].rpc.on_message(session, &body)?;
                let calls: Vec<_> = std::mem::take(&mut *self.backends[b].inbox.lock().expect("inbox"));
                for (ctx, args) in calls {
                    let actor = if ctx.session >= WORKER_SESSION_BASE {
                        match self.ingest.get(&(ctx.session, ctx.call_id)) {
                            Some(tag) => tag.client,
                            None => continue,
                        }
                    } else {
                        ctx.session as usize - 1
                    };
                    let job = Job {
                        session: ctx.session,
                        call_id: ctx.call_id,
                        actor,
                        effect: self.method_effect[&ctx.method_id],
                        arg: args[0].clone(),
                        stage: Stage::Processing,
                        read: None,
                        result: None,
                    };
                    self.backends[b].queue.push_back(job);
                }
                self.flush(b)?;
                if self.backends[b].current.is_none() {
                    self.start_next(b)?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn flush(&mut self, b: usize) -> Result<(), HarnessError> {
        let out = self.backends[b].rpc.drain_outbound();
        let addr = self.backends[b].addr;
        for o in out {
            if let Some(&to) = self.backends[b].sessions.get(&o.to) {
                self.send(addr, to, &o.body)?;
            }
        }
        Ok(())
    }

    fn start_next(&mut self, b: usize) -> Result<(), HarnessError> {
        let Some(job) = self.backends[b].queue.pop_front() else {
            return Ok(());
        };
        if let Some(t) = self.timing.get_mut(&(job.session, job.call_id)) {
            t.start = self.now;
        }
        self.backends[b].current = Some(job);
        let epoch = self.backends[b].epoch;
        self.schedule(self.now + self.s.server.processing_ms, Timer::JobStep { backend: b, epoch });
        Ok(())
    }

    fn target_object(&self, job: &Job) -> (u32, usize) {
        let scene = self.clients[job.actor].scene;
        match self.p.effects[job.effect].target {
            WriteTarget::Own => (avatar_id(job.actor), scene),
            WriteTarget::Shared => (shared_id(scene), scene),
        }
    }

    fn job_step(&mut self, b: usize) -> Result<(), HarnessError> {
        let mut job = self.backends[b].current.take().expect("job in service");
        let effect = self.p.effects[job.effect].clone();
        let (object_id, scene) = self.target_object(&job);
        let epoch = self.backends[b].epoch;
        let mut wait = None;
        match (self.backends[b].role, job.stage) {
            (Role::Stateful, _) => {
                let result = match self.backends[b].scenes.get_mut(&scene) {
                    Some(rs) => {
                        let current = rs.world().get(object_id, effect.prop_id).cloned();
                        match current {
                            Some(cur) => {
                                let v = next_value(&effect, &cur, &job.arg);
                                match rs.world_mut().set_property(object_id, effect.prop_id, v.clone()) {
                                    Ok(()) | Err(ReplicationError::NotReplicated { .. }) => {}
                                    Err(e) => return Err(e.into()),
                                }
                                self.backends[b].commits.insert((scene, object_id, effect.prop_id), self.now);
                                Ok(effect.returns.then_some(v))
                            }
                            None => Err(NO_SUCH_OBJECT),
                        }
                    }
                    None => Err(NO_SUCH_OBJECT),
                };
                job.result = Some(result);
                job.stage = Stage::Done;
            }
            (Role::Stateless, Stage::Processing | Stage::Read) => {
                let store = self.store.as_ref().expect("stateless needs a store");
                let got = store.get(&object_key(object_id), self.now)?;
                self.add_store_ms(&job, got.cost_ms);
                match got.value {
                    Some(v) => {
                        job.read = Some((v.version, ObjectRecord::decode(&v.value)?));
                        job.stage = Stage::Cas;
                    }
                    None => {
                        job.result = Some(Err(NO_SUCH_OBJECT));
                        job.stage = Stage::Done;
                    }
                }
                wait = Some(got.cost_ms);
            }
            (Role::Stateless, Stage::Cas) => {
                let store = self.store.as_ref().expect("stateless needs a store");
                let (version, mut rec) = job.read.take().expect("read before cas");
                let cur = rec
                    .properties
                    .iter()
                    .find(|(id, _)| *id == effect.prop_id)
                    .map(|(_, v)| v.clone())
                    .unwrap_or_else(|| PropertyValue::default_for(effect.kind));
                let v = next_value(&effect, &cur, &job.arg);
                match rec.properties.iter_mut().find(|(id, _)| *id == effect.prop_id) {
                    Some(slot) => slot.1 = v.clone(),
                    None => rec.properties.push((effect.prop_id, v.clone())),
                }
                let r = store.cas(&object_key(object_id), version, rec.encode()?, self.now)?;
                self.add_store_ms(&job, r.cost_ms);
                match r.value {
                    CasOutcome::Ok(_) => {
                        job.result = Some(Ok(effect.returns.then_some(v)));
                        job.stage = Stage::Done;
                    }
                    CasOutcome::Conflict(_) => job.stage = Stage::Read,
                }
                wait = Some(r.cost_ms);
            }
            (Role::Stateless, Stage::Done) => {}
        }
        match wait {
            Some(ms) => {
                self.backends[b].current = Some(job);
                self.schedule(self.now + ms, Timer::JobStep { backend: b, epoch });
                Ok(())
            }
            None => self.finish_job(b, job),
        }
    }

    fn add_store_ms(&mut self, job: &Job, ms: f64) {
        if let Some(t) = self.timing.get_mut(&(job.session, job.call_id)) {
            t.store_ms += ms;
        }
    }

    fn finish_job(&mut self, b: usize, job: Job) -> Result<(), HarnessError> {
        let key = (job.session, job.call_id);
        if let Some(t) = self.timing.get_mut(&key) {
            t.done = self.now;
        }
        self.backends[b].served += 1;
        let result = job.result.clone().expect("finished job has a result");
        self.backends[b].rpc.complete(job.session, job.call_id, result)?;
        self.flush(b)?;
        if job.session >= WORKER_SESSION_BASE {
            self.record_ingest(key);
        }
        self.start_next(b)
    }

    fn record_ingest(&mut self, key: (u32, u64)) {
        let (Some(tag), Some(t)) = (self.ingest.remove(&key), self.timing.remove(&key)) else {
            return;
        };
        let sensor = self.clients[tag.client].id;
        self.publications.remove(&(sensor, tag.sensor_call));
        self.calls.completed += 1;
        self.samples.push(EventSample {
            class: EventClass::Ingest,
            start_ms: tag.published,
            end_ms: t.done,
            network_ms: (tag.at_broker - tag.published) + (t.recv - tag.forwarded),
            store_ms: t.store_ms,
            processing_ms: (tag.forwarded - tag.at_broker) + (t.start - t.recv) + (t.done - t.start - t.store_ms),
        });
    }

    fn replicate(&mut self, b: usize) -> Result<(), HarnessError> {
        let epoch = self.backends[b].epoch;
        let scenes: Vec<usize> = self.backends[b].scenes.keys().copied().collect();
        let addr = self.backends[b].addr;
        for scene in scenes {
            let out = self.backends[b].scenes.get_mut(&scene).expect("hosted").step()?;
            for (client_id, delta) in out.deltas {
                let mut commits = Vec::new();
                for change in &delta.objects {
                    if let ObjectChange::Update { object_id, properties, .. } = change {
                        for (prop, _) in properties {
                            if let Some(t) = self.backends[b].commits.get(&(scene, *object_id, *prop)) {
                                commits.push(*t);
                            }
                        }
                    }
                }
                let Some(&to) = self.backends[b].sessions.get(&client_id) else {
                    continue;
                };
                let c = client_id as usize - 1;
                self.repl_tags.insert((c, b, epoch, delta.tick), (self.now, commits));
                self.send(addr, to, &MessageBody::ReplicationDelta(delta))?;
            }
            self.backends[b].commits.retain(|(s, _, _), _| *s != scene);
        }
        Ok(())
    }

    // -- broker -------------------------------------------------------------

    fn on_broker(&mut self, from: Address, body: MessageBody) -> Result<(), HarnessError> {
        let Some(&Node::Client(c)) = self.nodes.get(&from) else {
            return Ok(());
        };
        let MessageBody::RpcRequest(req) = &body else {
            return Ok(());
        };
        let id = self.clients[c].id;
        if let Some(p) = self.publications.get_mut(&(id, req.call_id)) {
            p.1.get_or_insert(self.now);
        }
        let bytes = body.encode()?;
        let bs = self.broker.as_mut().expect("broker");
        bs.publisher.publish(TOPIC, &id.to_be_bytes(), &bytes);
        Ok(())
    }

    fn broker_tick(&mut self) -> Result<(), HarnessError> {
        let bs = self.broker.as_mut().expect("broker");
        let r = bs.broker.tick();
        bs.published += r.appended;
        bs.delivered += r.delivered;
        let pushed: Vec<_> = std::mem::take(&mut *bs.pushed.lock().expect("sink"));
        for (w, m) in pushed {
            self.forward(w, &m)?;
        }
        Ok(())
    }

    fn worker_poll(&mut self, w: usize) -> Result<(), HarnessError> {
        let cfg = self.s.broker.unwrap_or_default();
        let bs = self.broker.as_mut().expect("broker");
        let msgs = bs.broker.pull(GROUP, &format!("worker-{w}"), cfg.batch)?;
        for m in &msgs {
            bs.broker.commit(GROUP, m.partition, m.offset + 1)?;
        }
        bs.delivered += msgs.len() as u64;
        for m in msgs {
            self.forward(w, &m)?;
        }
        Ok(())
    }

    fn forward(&mut self, w: usize, m: &Message) -> Result<(), HarnessError> {
        let MessageBody::RpcRequest(req) = MessageBody::decode(&m.payload)? else {
            return Ok(());
        };
        let Ok(key) = <[u8; 4]>::try_from(m.key.as_slice()) else {
            return Ok(());
        };
        let sensor = u32::from_be_bytes(key);
        let Some(&(published, Some(at_broker))) = self.publications.get(&(sensor, req.call_id)) else {
            return Ok(());
        };
        let now = self.now;
        let worker = &mut self.workers[w];
        let (call_id, body) = worker.rpc.invoke(req.method_id, RpcTarget::Server, req.args, true, now)?;
        self.ingest.insert(
            (worker.session, call_id),
            IngestTag {
                client: sensor as usize - 1,
                sensor_call: req.call_id,
                published,
                at_broker,
                forwarded: now,
            },
        );
        let from = worker.addr;
        self.send(from, self.backends[0].addr, &body)
    }

    // -- faults -------------------------------------------------------------

    fn fault(&mut self, f: Fault) -> Result<(), HarnessError> {
        match f {
            Fault::BackendDown { backend, .. } => self.kill(backend as usize),
            Fault::BackendUp { backend, .. } => {
                let b = backend as usize;
                if self.backends[b].up {
                    return Ok(());
                }
                self.backends[b].up = true;
                self.pool_of(b).mark_up(backend)?;
                if self.backends[b].role == Role::Stateful {
                    let epoch = self.backends[b].epoch;
                    self.schedule(self.now + self.s.server.tick_ms, Timer::ReplicationTick { backend: b, epoch });
                }
                Ok(())
            }
            Fault::IpChange { client, .. } => {
                let c = &mut self.clients[client];
                let old = c.addr;
                c.generation += 1;
                c.addr = Address::new(CLIENT_NODE_BASE + client as u32 + c.generation * GENERATION_STRIDE, CLIENT_PORT);
                let new = c.addr;
                self.nodes.remove(&old);
                self.nodes.insert(new, Node::Client(client));
                self.drop_conns_of(old);
                if self.joins_server() && (self.clients[client].server.is_some() || self.clients[client].joining.is_some()) {
                    // the server identifies the session by its source address
                    self.disruptions += 1;
                    self.clients[client].server = None;
                    self.clients[client].joining = None;
                    self.schedule(self.now + self.s.server.rejoin_after_ms, Timer::Rejoin { client });
                }
                Ok(())
            }
        }
    }

    fn pool_of(&mut self, b: usize) -> &mut BackendPool {
        match self.backends[b].role {
            Role::Stateful => self.stateful_pool.as_mut().expect("stateful pool"),
            Role::Stateless => self.stateless_pool.as_mut().expect("stateless pool"),
        }
    }

    fn kill(&mut self, b: usize) -> Result<(), HarnessError> {
        if !self.backends[b].up {
            return Ok(());
        }
        let inbox = Inbox::default();
        let rpc = self.rpc_server(&inbox)?;
        let be = &mut self.backends[b];
        be.up = false;
        be.epoch += 1;
        be.rpc = rpc;
        be.inbox = inbox;
        be.queue.clear();
        be.current = None;
        be.scenes.clear();
        be.commits.clear();
        be.sessions.clear();
        be.by_addr.clear();
        let addr = be.addr;
        let role = be.role;
        self.net.discard_to(addr);
        self.drop_conns_of(addr);
        self.repl_tags.retain(|(_, bk, _, _), _| *bk != b);
        self.pool_of(b).mark_down(b as u32)?;
        if role == Role::Stateful {
            for c in 0..self.clients.len() {
                let client = &mut self.clients[c];
                if client.server == Some(b) || client.joining == Some(b) {
                    self.disruptions += 1;
                    client.server = None;
                    client.joining = None;
                    self.schedule(self.now + self.s.server.rejoin_after_ms, Timer::Rejoin { client: c });
                }
            }
        }
        Ok(())
    }

    // -- results ------------------------------------------------------------

    fn final_state(&self) -> Result<BTreeMap<String, ObjectRecord>, HarnessError> {
        let mut out = BTreeMap::new();
        for be in self.backends.iter().filter(|b| b.up) {
            for rs in be.scenes.values() {
                for obj in rs.world().objects().values() {
                    out.insert(format!("world/{}", obj.object_id), obj.to_record());
                }
            }
        }
        if let Some(store) = &self.store {
            for (key, v) in store.dump() {
                let rec = ObjectRecord::decode(&v.value)?;
                out.insert(format!("store/{}", key.trim_start_matches("obj/")), rec);
            }
        }
        Ok(out)
    }

    fn diverged(&self) -> Result<usize, HarnessError> {
        let mut n = 0;
        for c in &self.clients {
            let Some(b) = c.server else { continue };
            let Some(rs) = self.backends[b].scenes.get(&c.scene) else {
                n += 1;
                continue;
            };
            let view = rs.world().snapshot_view([0.0; 3], RelevanceRule::All)?;
            let mut expected = Replica::new(self.p.schema.clone());
            expected.apply_snapshot(&view)?;
            if expected.canonical_bytes()? != c.replica.canonical_bytes()? {
                n += 1;
            }
        }
        Ok(n)
    }

    fn finish(mut self) -> Result<RunOutcome, HarnessError> {
        for c in &self.clients {
            self.calls.late_responses += c.rpc.late_responses();
        }
        // calls still open at the end never completed
        let open = self.clients.iter().filter(|c| c.inflight.is_some()).count() as u64
            + self.clients.iter().map(|c| c.queue.len() as u64).sum::<u64>();
        self.calls.failed += open;
        let final_state = self.final_state()?;
        let mut hasher = Sha256::new();
        for (k, rec) in &final_state {
            let bytes = rec.encode()?;
            hasher.update((k.len() as u32).to_be_bytes());
            hasher.update(k.as_bytes());
            hasher.update((bytes.len() as u32).to_be_bytes());
            hasher.update(&bytes);
        }
        let classes = class_stats(&self.samples);
        let secs = self.s.duration_ms / 1000.0;
        let report = LatencyReport {
            meta: Meta {
                format: REPORT_FORMAT,
                version: env!("CARGO_PKG_VERSION"),
                seed: self.s.seed,
            },
            scenario: self.s.name.clone(),
            scenario_sha256: self.s.hash(),
            topology: self.s.topology,
            duration_ms: self.s.duration_ms,
            end_ms: self.now,
            frame_budgets: frame_verdicts(&classes),
            classes,
            throughput_per_s: self.calls.completed as f64 / secs,
            calls: self.calls,
            disruptions: self.disruptions,
            transport_give_ups: self.give_ups,
            network: self.net.stats(),
            store: self.store.as_ref().map(|s| {
                let st = s.stats();
                StoreSummary {
                    reads: st.reads,
                    writes: st.writes,
                    conflicts: st.conflicts,
                }
            }),
            broker: self.broker.as_ref().map(|b| BrokerSummary {
                published: b.published,
                delivered: b.delivered,
                delivered_per_s: b.delivered as f64 / secs,
            }),
            final_state_sha256: hex::encode(hasher.finalize()),
        };
        Ok(RunOutcome {
            diverged_replicas: self.diverged()?,
            served: self.backends.iter().map(|b| b.served).collect(),
            report,
            samples: self.samples,
            final_state,
        })
    }
}

/// Starting state of an avatar or shared object; avatars start spread
/// along the x axis.
pub fn initial_object(p: &Prepared, object_id: u32, owner: Option<u32>) -> ObjectRecord {
    let class = p.schema.class(p.avatar_class).expect("prepared class exists");
    let owner = owner.map_or(Owner::Server, Owner::Client);
    let mut obj = ReplicatedObject::instantiate(object_id, class, owner);
    if let Some(pos) = p.position_prop {
        let x = (object_id % SHARED_OBJECT_BASE) as f64;
        obj.properties.insert(pos, PropertyValue::Vec3([x, 0.0, 0.0]));
    }
    obj.to_record()
}

/// Every object a scenario starts with, by id.
pub fn initial_objects(p: &Prepared) -> BTreeMap<u32, ObjectRecord> {
    let mut out = BTreeMap::new();
    for c in 0..p.scenario.clients.count {
        out.insert(avatar_id(c), initial_object(p, avatar_id(c), Some(avatar_id(c))));
    }
    for scene in 0..p.scenario.clients.scenes {
        out.insert(shared_id(scene), initial_object(p, shared_id(scene), None));
    }
    out
}

/// The property value after applying one call.
pub fn next_value(effect: &Effect, current: &PropertyValue, arg: &PropertyValue) -> PropertyValue {
    match effect.op {
        WriteOp::Set => arg.clone(),
        WriteOp::Add => PropertyValue::Int64(
            current
                .as_int()
                .unwrap_or(0)
                .wrapping_add(arg.as_int().unwrap_or(0)),
        ),
    }
}
