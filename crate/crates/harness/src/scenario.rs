//! Scenario files: topology, client behaviour, links, store and faults.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use sha2::{Digest, Sha256};

use worldsync_core::broker::DeliveryMode;
use worldsync_core::cluster::Policy;
use worldsync_core::schema::{parse_schema, MethodMode, Schema, ValueKind};
use worldsync_core::statestore::StoreProfile;
use worldsync_core::transport::NetConditions;
use worldsync_core::wire::PropertyValue;

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Clients talk straight to one authoritative peer.
    Direct,
    /// Scene-pinned stateful replication servers.
    StatefulDedicated,
    /// Stateless RPC servers over a shared store behind a balancer.
    StatelessRpc,
    /// Sensors publish to a broker; workers forward to a stateful server.
    BrokeredIngestion,
    /// Stateful scene servers plus a stateless RPC pool.
    Hybrid,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteOp {
    #[default]
    Set,
    /// Integer read-modify-write: property += argument.
    Add,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteTarget {
    /// The caller's own avatar.
    #[default]
    Own,
    /// One server-owned object per scene, written by every client.
    Shared,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    #[default]
    Default,
    /// Hybrid only: served by the stateless pool.
    Stateless,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Behavior {
    /// Unary schema method taking one argument.
    pub method: String,
    /// Avatar-class property the call writes.
    pub property: String,
    #[serde(default)]
    pub op: WriteOp,
    #[serde(default)]
    pub target: WriteTarget,
    #[serde(default)]
    pub via: Route,
    pub every_ms: f64,
    #[serde(default)]
    pub start_ms: f64,
    /// Stop after this many calls per client.
    #[serde(default)]
    pub count: Option<u32>,
    /// Arguments, cycled per call.
    pub values: Vec<Json>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Clients {
    pub count: usize,
    #[serde(default = "one")]
    pub scenes: usize,
    pub behaviors: Vec<Behavior>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetProfile {
    /// Client to server, peer or broker.
    pub uplink: NetConditions,
    /// Server to client.
    pub downlink: NetConditions,
    /// Worker to server, both directions.
    pub internal: NetConditions,
}

impl Default for NetProfile {
    fn default() -> Self {
        Self {
            uplink: NetConditions::ideal(10.0),
            downlink: NetConditions::ideal(10.0),
            internal: NetConditions::ideal(0.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerProfile {
    /// Service time of one request; a server handles one at a time.
    pub processing_ms: f64,
    /// Replication step period.
    pub tick_ms: f64,
    /// Client-side call timeout.
    pub rpc_timeout_ms: f64,
    /// Attempts per call, first included.
    pub max_attempts: u32,
    pub max_retries: u32,
    /// Time after a failure before affected clients rejoin.
    pub rejoin_after_ms: f64,
}

impl Default for ServerProfile {
    fn default() -> Self {
        Self {
            processing_ms: 1.0,
            tick_ms: 16.0,
            rpc_timeout_ms: 500.0,
            max_attempts: 5,
            max_retries: worldsync_core::transport::DEFAULT_MAX_RETRIES,
            rejoin_after_ms: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrokerProfile {
    pub partitions: u32,
    pub workers: usize,
    pub delivery: DeliveryMode,
    pub tick_ms: f64,
    /// Pull mode: polling period of each worker.
    pub poll_ms: f64,
    pub batch: usize,
}

impl Default for BrokerProfile {
    fn default() -> Self {
        Self {
            partitions: 4,
            workers: 2,
            delivery: DeliveryMode::Pull,
            tick_ms: 5.0,
            poll_ms: 5.0,
            batch: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fault {
    BackendDown { at_ms: f64, backend: u32 },
    BackendUp { at_ms: f64, backend: u32 },
    /// Client index (0-based) gets a new source address.
    IpChange { at_ms: f64, client: usize },
}

impl Fault {
    pub fn at_ms(&self) -> f64 {
        match *self {
            Fault::BackendDown { at_ms, .. } | Fault::BackendUp { at_ms, .. } | Fault::IpChange { at_ms, .. } => at_ms,
        }
    }
}

fn default_drain() -> f64 {
    10_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub topology: Topology,
    #[serde(default)]
    pub seed: u64,
    /// Behaviours fire until this instant.
    pub duration_ms: f64,
    /// Extra time to let in-flight work finish.
    #[serde(default = "default_drain")]
    pub drain_ms: f64,
    /// Schema file, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    /// Schema source given in place; filled from `schema` on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_inline: Option<String>,
    /// Class spawned once per client (and once per scene as shared object).
    pub avatar_class: String,
    pub clients: Clients,
    #[serde(default = "one")]
    pub servers: usize,
    /// Hybrid only.
    #[serde(default)]
    pub stateless_servers: usize,
    #[serde(default)]
    pub net: NetProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store: Option<StoreProfile>,
    /// Balancer policy of the stateless pool.
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub server: ServerProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub broker: Option<BrokerProfile>,
    #[serde(default)]
    pub faults: Vec<Fault>,
}

/// What a method call does to the world.
#[derive(Debug, Clone, PartialEq)]
pub struct Effect {
    pub method_id: u16,
    pub prop_id: u16,
    pub kind: ValueKind,
    pub op: WriteOp,
    pub target: WriteTarget,
    pub via: Route,
    /// Method declares a return value (the property's new value).
    pub returns: bool,
}

/// A scenario checked against its schema.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub schema: Arc<Schema>,
    pub avatar_class: u16,
    pub position_prop: Option<u16>,
    /// Per behaviour, in file order.
    pub effects: Vec<Effect>,
    /// Per behaviour: arguments as property values.
    pub values: Vec<Vec<PropertyValue>>,
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::InvalidScenario(msg.into())
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    /// Reads a scenario file and inlines its schema.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let mut s = Self::from_json(&text)?;
        if let Some(rel) = &s.schema {
            let base = path.parent().unwrap_or(Path::new("."));
            s.schema_inline = Some(std::fs::read_to_string(base.join(rel))?);
        }
        Ok(s)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn prepare(&self) -> Result<Prepared, HarnessError> {
        let source = self
            .schema_inline
            .as_deref()
            .ok_or_else(|| invalid("no schema: set `schema` or `schema_inline`"))?;
        let schema = Arc::new(parse_schema(source)?);
        let violations = schema.validate();
        if !violations.is_empty() {
            let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(invalid(format!("schema violations: {}", list.join("; "))));
        }
        self.check_shape()?;
        let class = schema
            .class_by_name(&self.avatar_class)
            .ok_or_else(|| invalid(format!("unknown avatar class {}", self.avatar_class)))?;
        let mut effects = Vec::new();
        let mut values = Vec::new();
        let mut by_method: BTreeMap<u16, Effect> = BTreeMap::new();
        for b in &self.clients.behaviors {
            let m = schema
                .method_by_name(&b.method)
                .ok_or_else(|| invalid(format!("unknown method {}", b.method)))?;
            let p = class
                .properties
                .iter()
                .find(|p| p.key == b.property)
                .ok_or_else(|| invalid(format!("class {} has no property {}", class.name, b.property)))?;
            if m.mode != MethodMode::Unary || m.params.len() != 1 || m.params[0] != p.kind {
                return Err(invalid(format!(
                    "method {} must be unary with one {} parameter",
                    m.name,
                    p.kind.token()
                )));
            }
            if m.returns.is_some_and(|r| r != p.kind) {
                return Err(invalid(format!("method {} must return none or {}", m.name, p.kind.token())));
            }
            if b.op == WriteOp::Add && p.kind != ValueKind::Int64 {
                return Err(invalid(format!("add needs an int64 property, {} is {}", p.key, p.kind.token())));
            }
            if !(b.every_ms > 0.0 && b.every_ms.is_finite()) || !(b.start_ms >= 0.0) {
                return Err(invalid(format!("behavior {}: every_ms must be positive", b.method)));
            }
            if b.values.is_empty() {
                return Err(invalid(format!("behavior {}: no values", b.method)));
            }
            if b.via == Route::Stateless && self.topology != Topology::Hybrid {
                return Err(invalid("via=stateless is only meaningful in the hybrid topology"));
            }
            let effect = Effect {
                method_id: m.method_id,
                prop_id: p.prop_id,
                kind: p.kind,
                op: b.op,
                target: b.target,
                via: b.via,
                returns: m.returns.is_some(),
            };
            if let Some(prev) = by_method.insert(m.method_id, effect.clone()) {
                if prev != effect {
                    return Err(invalid(format!("method {} used with two different effects", m.name)));
                }
            }
            values.push(
                b.values
                    .iter()
                    .map(|v| json_to_value(v, p.kind))
                    .collect::<Result<Vec<_>, _>>()?,
            );
            effects.push(effect);
        }
        Ok(Prepared {
            scenario: self.clone(),
            avatar_class: class.class_id,
            position_prop: class.position_property().map(|p| p.prop_id),
            schema,
            effects,
            values,
        })
    }

    fn check_shape(&self) -> Result<(), HarnessError> {
        if !(self.duration_ms > 0.0 && self.duration_ms.is_finite()) || !(self.drain_ms >= 0.0) {
            return Err(invalid("duration_ms must be positive and drain_ms non-negative"));
        }
        if self.clients.count == 0 || self.clients.scenes == 0 {
            return Err(invalid("need at least one client and one scene"));
        }
        if self.servers == 0 {
            return Err(invalid("need at least one server"));
        }
        for c in [self.net.uplink, self.net.downlink, self.net.internal] {
            c.validate().map_err(|e| invalid(e.to_string()))?;
        }
        let s = self.server;
        if !(s.processing_ms >= 0.0 && s.tick_ms > 0.0 && s.rpc_timeout_ms > 0.0 && s.max_attempts > 0) {
            return Err(invalid("server profile: processing >= 0, tick > 0, timeout > 0, attempts > 0"));
        }
        let needs_store = matches!(self.topology, Topology::StatelessRpc | Topology::Hybrid);
        if needs_store && self.store.is_none() {
            return Err(invalid(format!("{:?} requires a store", self.topology)));
        }
        match self.topology {
            Topology::Direct if self.servers != 1 => {
                return Err(invalid("direct topology has exactly one peer"));
            }
            Topology::Hybrid if self.stateless_servers == 0 => {
                return Err(invalid("hybrid needs stateless_servers > 0"));
            }
            Topology::BrokeredIngestion if self.servers != 1 => {
                return Err(invalid("brokered ingestion feeds exactly one server"));
            }
            Topology::BrokeredIngestion => {
                let b = self.broker.unwrap_or_default();
                if b.partitions == 0 || b.workers == 0 || !(b.tick_ms > 0.0 && b.poll_ms > 0.0) || b.batch == 0 {
                    return Err(invalid("broker: partitions, workers, batch > 0 and periods positive"));
                }
            }
            _ => {}
        }
        for f in &self.faults {
            if !(f.at_ms() >= 0.0) {
                return Err(invalid("fault times must be non-negative"));
            }
            match *f {
                Fault::BackendDown { backend, .. } | Fault::BackendUp { backend, .. } => {
                    let pool = match self.topology {
                        Topology::Hybrid => self.servers + self.stateless_servers,
                        _ => self.servers,
                    };
                    if backend as usize >= pool {
                        return Err(invalid(format!("fault on unknown backend {backend}")));
                    }
                    if self.topology == Topology::Direct {
                        return Err(invalid("the direct peer cannot fail over"));
                    }
                }
                Fault::IpChange { client, .. } => {
                    if client >= self.clients.count {
                        return Err(invalid(format!("fault on unknown client {client}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// JSON argument to a property value of `kind`. Vec3 is `[x, y, z]`, bytes
/// a hex string.
pub fn json_to_value(v: &Json, kind: ValueKind) -> Result<PropertyValue, HarnessError> {
    let bad = || invalid(format!("{v} is not a {}", kind.token()));
    Ok(match kind {
        ValueKind::Null => match v {
            Json::Null => PropertyValue::Null,
            _ => return Err(bad()),
        },
        ValueKind::Bool => PropertyValue::Bool(v.as_bool().ok_or_else(bad)?),
        ValueKind::Int64 => PropertyValue::Int64(v.as_i64().ok_or_else(bad)?),
        ValueKind::Float64 => PropertyValue::Float64(v.as_f64().ok_or_else(bad)?),
        ValueKind::Text => PropertyValue::Text(v.as_str().ok_or_else(bad)?.to_owned()),
        ValueKind::Vec3 => {
            let a = v.as_array().filter(|a| a.len() == 3).ok_or_else(bad)?;
            let mut out = [0.0; 3];
            for (o, x) in out.iter_mut().zip(a) {
                *o = x.as_f64().ok_or_else(bad)?;
            }
            PropertyValue::Vec3(out)
        }
        ValueKind::Bytes => PropertyValue::Bytes(hex::decode(v.as_str().ok_or_else(bad)?).map_err(|_| bad())?),
    })
}
