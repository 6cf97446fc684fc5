//! Stateful server core: the authoritative world, per-tick dirty tracking,
//! relevance filtering, deltas for joined clients and full snapshots for
//! late joiners, plus the client-side replica that applies them.
//!
//! Only the server writes to the world. Other producers hand write intents
//! to [`ReplicationServer`] through a channel that is drained at the start
//! of each step; observers are notified once the step has finished.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{mpsc, Arc};

use thiserror::Error;

use crate::schema::{ClassDef, Schema, ValueKind};
use crate::wire::{MessageBody, ObjectChange, ObjectRecord, PropertyValue, WireError, WorldUpdate};

pub type ClientId = u32;
pub type ObjectId = u32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplicationError {
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("object {0} already exists")]
    DuplicateObject(ObjectId),
    #[error("unknown class {0}")]
    UnknownClass(u16),
    #[error("class {class_id} has no property {prop_id}")]
    UnknownProperty { class_id: u16, prop_id: u16 },
    #[error("property {prop_id} expects {expected}, got {actual}")]
    KindMismatch {
        prop_id: u16,
        expected: ValueKind,
        actual: ValueKind,
    },
    #[error("property {prop_id} of object {object_id} is not replicated; write applied without dirty tracking")]
    NotReplicated { object_id: ObjectId, prop_id: u16 },
    #[error("class {class_id} has no position property")]
    MissingPosition { class_id: u16 },
    #[error("relevance radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("update does not match the local contract: {0}")]
    SchemaVersionMismatch(String),
    #[error("unknown client {0}")]
    UnknownClient(ClientId),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Owner {
    Server,
    Client(ClientId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicatedObject {
    pub object_id: ObjectId,
    pub class_id: u16,
    pub owner: Owner,
    pub properties: BTreeMap<u16, PropertyValue>,
}

impl ReplicatedObject {
    /// New object with every declared property at its zero value.
    pub fn instantiate(object_id: ObjectId, class: &ClassDef, owner: Owner) -> Self {
        Self {
            object_id,
            class_id: class.class_id,
            owner,
            properties: class
                .properties
                .iter()
                .map(|p| (p.prop_id, PropertyValue::default_for(p.kind)))
                .collect(),
        }
    }

    pub fn position(&self, class: &ClassDef) -> Option<[f64; 3]> {
        let prop = class.position_property()?;
        self.properties.get(&prop.prop_id)?.as_vec3()
    }

    pub fn to_record(&self) -> ObjectRecord {
        ObjectRecord {
            object_id: self.object_id,
            class_id: self.class_id,
            owner: match self.owner {
                Owner::Server => None,
                Owner::Client(c) => Some(c),
            },
            properties: self.properties.iter().map(|(k, v)| (*k, v.clone())).collect(),
        }
    }

    pub fn from_record(r: &ObjectRecord) -> Self {
        Self {
            object_id: r.object_id,
            class_id: r.class_id,
            owner: r.owner.map_or(Owner::Server, Owner::Client),
            properties: r.properties.iter().cloned().collect(),
        }
    }

    fn replicated_properties(&self, class: &ClassDef) -> Vec<(u16, PropertyValue)> {
        class
            .replicated_properties()
            .filter_map(|p| Some((p.prop_id, self.properties.get(&p.prop_id)?.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RelevanceRule {
    All,
    /// Inclusive radius around each client's viewpoint.
    Radius(f64),
}

impl RelevanceRule {
    pub fn validate(&self) -> Result<(), ReplicationError> {
        match *self {
            RelevanceRule::Radius(r) if !(r > 0.0) => Err(ReplicationError::InvalidRadius(r)),
            _ => Ok(()),
        }
    }
}

pub fn relevant(
    object: &ReplicatedObject,
    class: &ClassDef,
    viewpoint: [f64; 3],
    rule: RelevanceRule,
) -> Result<bool, ReplicationError> {
    match rule {
        RelevanceRule::All => Ok(true),
        RelevanceRule::Radius(r) => {
            let p = object
                .position(class)
                .ok_or(ReplicationError::MissingPosition { class_id: class.class_id })?;
            let d2: f64 = p.iter().zip(viewpoint).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok(d2.sqrt() <= r)
        }
    }
}

/// Changes since the last collection.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DirtySet {
    pub changed: BTreeMap<ObjectId, BTreeSet<u16>>,
    pub created: BTreeSet<ObjectId>,
    /// Destroyed ids with their class.
    pub destroyed: BTreeMap<ObjectId, u16>,
}

impl DirtySet {
    pub fn is_empty(&self) -> bool {
        self.changed.is_empty() && self.created.is_empty() && self.destroyed.is_empty()
    }

    pub fn contains(&self, object_id: ObjectId, prop_id: u16) -> bool {
        self.changed
            .get(&object_id)
            .is_some_and(|s| s.contains(&prop_id))
    }

    pub fn clear(&mut self) {
        *self = Self::default();
    }
}

#[derive(Debug, Clone)]
pub struct WorldState {
    schema: Arc<Schema>,
    objects: BTreeMap<ObjectId, ReplicatedObject>,
    tick: u64,
    dirty: DirtySet,
    next_id: ObjectId,
    /// Skip dirty marking when a write does not change the value.
    pub suppress_unchanged: bool,
}

impl WorldState {
    pub fn new(schema: Arc<Schema>) -> Self {
        Self {
            schema,
            objects: BTreeMap::new(),
            tick: 0,
            dirty: DirtySet::default(),
            next_id: 1,
            suppress_unchanged: false,
        }
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// Advances the simulation step counter by one.
    pub fn step(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    pub fn dirty(&self) -> &DirtySet {
        &self.dirty
    }

    pub fn objects(&self) -> &BTreeMap<ObjectId, ReplicatedObject> {
        &self.objects
    }

    pub fn object(&self, id: ObjectId) -> Option<&ReplicatedObject> {
        self.objects.get(&id)
    }

    pub fn get(&self, id: ObjectId, prop_id: u16) -> Option<&PropertyValue> {
        self.objects.get(&id)?.properties.get(&prop_id)
    }

    fn class(&self, class_id: u16) -> Result<&ClassDef, ReplicationError> {
        self.schema
            .class(class_id)
            .ok_or(ReplicationError::UnknownClass(class_id))
    }

    pub fn spawn(
        &mut self,
        class_id: u16,
        owner: Owner,
        initial: &[(u16, PropertyValue)],
    ) -> Result<ObjectId, ReplicationError> {
        while self.objects.contains_key(&self.next_id) {
            self.next_id += 1;
        }
        let id = self.next_id;
        self.spawn_with_id(id, class_id, owner, initial)?;
        self.next_id = id + 1;
        Ok(id)
    }

    pub fn spawn_with_id(
        &mut self,
        object_id: ObjectId,
        class_id: u16,
        owner: Owner,
        initial: &[(u16, PropertyValue)],
    ) -> Result<(), ReplicationError> {
        if self.objects.contains_key(&object_id) {
            return Err(ReplicationError::DuplicateObject(object_id));
        }
        let class = self.class(class_id)?;
        let mut obj = ReplicatedObject::instantiate(object_id, class, owner);
        for (prop_id, value) in initial {
            check_kind(class, *prop_id, value)?;
            obj.properties.insert(*prop_id, value.clone());
        }
        let replicated: BTreeSet<u16> = class.replicated_properties().map(|p| p.prop_id).collect();
        self.objects.insert(object_id, obj);
        // A destroy earlier in the same tick stays recorded, so holders drop
        // the old object before receiving the new one.
        self.dirty.created.insert(object_id);
        self.dirty.changed.insert(object_id, replicated);
        Ok(())
    }

    pub fn destroy(&mut self, object_id: ObjectId) -> Result<(), ReplicationError> {
        let obj = self
            .objects
            .remove(&object_id)
            .ok_or(ReplicationError::UnknownObject(object_id))?;
        self.dirty.changed.remove(&object_id);
        if !self.dirty.created.remove(&object_id) {
            self.dirty.destroyed.insert(object_id, obj.class_id);
        }
        Ok(())
    }

    /// Writes a property and marks it dirty. Writes to non-replicated
    /// properties are applied but return [`ReplicationError::NotReplicated`]
    /// because no client will ever see them.
    pub fn set_property(
        &mut self,
        object_id: ObjectId,
        prop_id: u16,
        value: PropertyValue,
    ) -> Result<(), ReplicationError> {
        let obj = self
            .objects
            .get(&object_id)
            .ok_or(ReplicationError::UnknownObject(object_id))?;
        let class = self.class(obj.class_id)?;
        let def = check_kind(class, prop_id, &value)?;
        let replicated = def.replicated;
        let obj = self.objects.get_mut(&object_id).expect("checked above");
        let unchanged = obj.properties.get(&prop_id) == Some(&value);
        obj.properties.insert(prop_id, value);
        if !replicated {
            return Err(ReplicationError::NotReplicated { object_id, prop_id });
        }
        if !(self.suppress_unchanged && unchanged) {
            self.dirty.changed.entry(object_id).or_default().insert(prop_id);
        }
        Ok(())
    }

    /// Full view of the world for one client, without touching per-client
    /// bookkeeping.
    pub fn snapshot_view(&self, viewpoint: [f64; 3], rule: RelevanceRule) -> Result<WorldUpdate, ReplicationError> {
        rule.validate()?;
        let mut objects = Vec::new();
        for obj in self.objects.values() {
            let class = self.class(obj.class_id)?;
            if relevant(obj, class, viewpoint, rule)? {
                objects.push(ObjectChange::Update {
                    object_id: obj.object_id,
                    class_id: obj.class_id,
                    properties: obj.replicated_properties(class),
                });
            }
        }
        Ok(WorldUpdate {
            tick: self.tick,
            objects,
        })
    }
}

fn check_kind<'c>(
    class: &'c ClassDef,
    prop_id: u16,
    value: &PropertyValue,
) -> Result<&'c crate::schema::PropertyDef, ReplicationError> {
    let def = class.property(prop_id).ok_or(ReplicationError::UnknownProperty {
        class_id: class.class_id,
        prop_id,
    })?;
    if def.kind != value.kind() {
        return Err(ReplicationError::KindMismatch {
            prop_id,
            expected: def.kind,
            actual: value.kind(),
        });
    }
    Ok(def)
}

/// What the server remembers about one joined client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientInterest {
    pub client_id: ClientId,
    pub viewpoint: [f64; 3],
    /// Objects the client currently holds, with their class.
    known: BTreeMap<ObjectId, u16>,
}

impl ClientInterest {
    pub fn new(client_id: ClientId, viewpoint: [f64; 3]) -> Self {
        Self {
            client_id,
            viewpoint,
            known: BTreeMap::new(),
        }
    }

    pub fn known(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.known.keys().copied()
    }
}

/// Builds one delta per client and clears the dirty set.
///
/// Each delta carries the latest value of every dirty replicated property
/// of every relevant object the client already holds. Objects entering a
/// client's relevance set are sent whole; objects leaving it, or destroyed,
/// are sent as destroy markers. Clients with nothing to receive are absent
/// from the result.
pub fn collect_deltas(
    world: &mut WorldState,
    clients: &mut [ClientInterest],
    rule: RelevanceRule,
) -> Result<BTreeMap<ClientId, WorldUpdate>, ReplicationError> {
    rule.validate()?;
    let mut out = BTreeMap::new();
    for client in clients.iter_mut() {
        let mut changes = Vec::new();
        for (&id, &class_id) in &world.dirty.destroyed {
            if client.known.remove(&id).is_some() {
                changes.push(ObjectChange::Destroy { object_id: id, class_id });
            }
        }
        // Under `All` only dirty objects can change membership or content.
        let candidates: Box<dyn Iterator<Item = &ReplicatedObject>> = match rule {
            RelevanceRule::All => Box::new(
                world
                    .dirty
                    .changed
                    .keys()
                    .chain(world.dirty.created.iter())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .filter_map(|id| world.objects.get(id)),
            ),
            RelevanceRule::Radius(_) => Box::new(world.objects.values()),
        };
        for obj in candidates {
            let class = world.class(obj.class_id)?;
            let is_relevant = relevant(obj, class, client.viewpoint, rule)?;
            let is_known = client.known.contains_key(&obj.object_id);
            match (is_relevant, is_known) {
                (true, false) => {
                    client.known.insert(obj.object_id, obj.class_id);
                    changes.push(ObjectChange::Update {
                        object_id: obj.object_id,
                        class_id: obj.class_id,
                        properties: obj.replicated_properties(class),
                    });
                }
                (true, true) => {
                    let Some(dirty) = world.dirty.changed.get(&obj.object_id) else {
                        continue;
                    };
                    let properties: Vec<_> = class
                        .replicated_properties()
                        .filter(|p| dirty.contains(&p.prop_id))
                        .filter_map(|p| Some((p.prop_id, obj.properties.get(&p.prop_id)?.clone())))
                        .collect();
                    if !properties.is_empty() {
                        changes.push(ObjectChange::Update {
                            object_id: obj.object_id,
                            class_id: obj.class_id,
                            properties,
                        });
                    }
                }
                (false, true) => {
                    client.known.remove(&obj.object_id);
                    changes.push(ObjectChange::Destroy {
                        object_id: obj.object_id,
                        class_id: obj.class_id,
                    });
                }
                (false, false) => {}
            }
        }
        if !changes.is_empty() {
            // Stable: a destroy stays ahead of a same-tick respawn of its id.
            changes.sort_by_key(ObjectChange::object_id);
            out.insert(
                client.client_id,
                WorldUpdate {
                    tick: world.tick,
                    objects: changes,
                },
            );
        }
    }
    world.dirty.clear();
    Ok(out)
}

/// Full snapshot for `client`; resets what the server believes it holds.
pub fn full_snapshot(
    world: &WorldState,
    client: &mut ClientInterest,
    rule: RelevanceRule,
) -> Result<WorldUpdate, ReplicationError> {
    let snap = world.snapshot_view(client.viewpoint, rule)?;
    client.known = snap
        .objects
        .iter()
        .map(|c| match c {
            ObjectChange::Update { object_id, class_id, .. }
            | ObjectChange::Destroy { object_id, class_id } => (*object_id, *class_id),
        })
        .collect();
    Ok(snap)
}

/// Client-side copy of the replicated part of the world.
#[derive(Debug, Clone)]
pub struct Replica {
    schema: Arc<Schema>,
    objects: BTreeMap<ObjectId, ReplicatedObject>,
    last_tick: Option<u64>,
    stale_discarded: u64,
}

impl Replica {
    pub fn new(schema: Arc<Schema>) -> Self {
        Self {
            schema,
            objects: BTreeMap::new(),
            last_tick: None,
            stale_discarded: 0,
        }
    }

    pub fn objects(&self) -> &BTreeMap<ObjectId, ReplicatedObject> {
        &self.objects
    }

    pub fn get(&self, id: ObjectId, prop_id: u16) -> Option<&PropertyValue> {
        self.objects.get(&id)?.properties.get(&prop_id)
    }

    pub fn last_tick(&self) -> Option<u64> {
        self.last_tick
    }

    pub fn stale_discarded(&self) -> u64 {
        self.stale_discarded
    }

    fn check(&self, update: &WorldUpdate) -> Result<(), ReplicationError> {
        for change in &update.objects {
            let ObjectChange::Update { class_id, properties, .. } = change else {
                continue;
            };
            let class = self.schema.class(*class_id).ok_or_else(|| {
                ReplicationError::SchemaVersionMismatch(format!("unknown class {class_id}"))
            })?;
            for (prop_id, value) in properties {
                match class.property(*prop_id) {
                    Some(p) if p.replicated => {
                        if p.kind != value.kind() {
                            return Err(ReplicationError::KindMismatch {
                                prop_id: *prop_id,
                                expected: p.kind,
                                actual: value.kind(),
                            });
                        }
                    }
                    _ => {
                        return Err(ReplicationError::SchemaVersionMismatch(format!(
                            "class {class_id} has no replicated property {prop_id}"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    fn patch(&mut self, update: &WorldUpdate) {
        for change in &update.objects {
            match change {
                ObjectChange::Update {
                    object_id,
                    class_id,
                    properties,
                } => {
                    let schema = &self.schema;
                    let obj = self.objects.entry(*object_id).or_insert_with(|| {
                        let class = schema.class(*class_id).expect("checked");
                        let mut o = ReplicatedObject::instantiate(*object_id, class, Owner::Server);
                        o.properties.retain(|id, _| class.property(*id).is_some_and(|p| p.replicated));
                        o
                    });
                    for (prop_id, value) in properties {
                        obj.properties.insert(*prop_id, value.clone());
                    }
                }
                ObjectChange::Destroy { object_id, .. } => {
                    self.objects.remove(object_id);
                }
            }
        }
    }

    /// Applies a delta atomically. Returns `false` when the delta is not
    /// newer than what was already applied and was therefore discarded.
    pub fn apply_delta(&mut self, update: &WorldUpdate) -> Result<bool, ReplicationError> {
        if self.last_tick.is_some_and(|t| update.tick <= t) {
            self.stale_discarded += 1;
            return Ok(false);
        }
        self.check(update)?;
        self.patch(update);
        self.last_tick = Some(update.tick);
        Ok(true)
    }

    /// Replaces the whole replica with a snapshot.
    pub fn apply_snapshot(&mut self, update: &WorldUpdate) -> Result<(), ReplicationError> {
        self.check(update)?;
        self.objects.clear();
        self.patch(update);
        self.last_tick = Some(update.tick);
        Ok(())
    }

    pub fn apply_message(&mut self, body: &MessageBody) -> Result<bool, ReplicationError> {
        match body {
            MessageBody::ReplicationDelta(u) => self.apply_delta(u),
            MessageBody::Snapshot(u) => self.apply_snapshot(u).map(|_| true),
            _ => Ok(false),
        }
    }

    /// The replica's content encoded as a snapshot body, for byte-level
    /// comparison between replicas.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>, ReplicationError> {
        let objects = self
            .objects
            .values()
            .map(|o| ObjectChange::Update {
                object_id: o.object_id,
                class_id: o.class_id,
                properties: o.properties.iter().map(|(k, v)| (*k, v.clone())).collect(),
            })
            .collect();
        Ok(MessageBody::Snapshot(WorldUpdate { tick: 0, objects }).encode()?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WriteIntent {
    pub object_id: ObjectId,
    pub prop_id: u16,
    pub value: PropertyValue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeNotice {
    pub tick: u64,
    pub changed: Vec<(ObjectId, u16)>,
    pub created: Vec<ObjectId>,
    pub destroyed: Vec<ObjectId>,
}

/// How deltas should travel. Unreliable deltas rely on the replica's
/// stale-tick discard: the newest state wins and lost ones are superseded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeltaMode {
    #[default]
    Reliable,
    Unreliable,
}

#[derive(Debug, Default)]
pub struct StepOutput {
    pub tick: u64,
    pub deltas: BTreeMap<ClientId, WorldUpdate>,
    pub rejected: Vec<(WriteIntent, ReplicationError)>,
}

type Observer = Box<dyn FnMut(&ChangeNotice) + Send>;

/// The tick loop of a stateful server.
pub struct ReplicationServer {
    world: WorldState,
    clients: Vec<ClientInterest>,
    rule: RelevanceRule,
    mode: DeltaMode,
    intents_tx: mpsc::Sender<WriteIntent>,
    intents_rx: mpsc::Receiver<WriteIntent>,
    observers: Vec<Observer>,
}

impl ReplicationServer {
    pub fn new(schema: Arc<Schema>, rule: RelevanceRule) -> Result<Self, ReplicationError> {
        rule.validate()?;
        let (intents_tx, intents_rx) = mpsc::channel();
        Ok(Self {
            world: WorldState::new(schema),
            clients: Vec::new(),
            rule,
            mode: DeltaMode::default(),
            intents_tx,
            intents_rx,
            observers: Vec::new(),
        })
    }

    pub fn with_mode(mut self, mode: DeltaMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn mode(&self) -> DeltaMode {
        self.mode
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn world_mut(&mut self) -> &mut WorldState {
        &mut self.world
    }

    pub fn rule(&self) -> RelevanceRule {
        self.rule
    }

    /// Handle for producers on other threads.
    pub fn intent_sender(&self) -> mpsc::Sender<WriteIntent> {
        self.intents_tx.clone()
    }

    pub fn subscribe(&mut self, observer: impl FnMut(&ChangeNotice) + Send + 'static) {
        self.observers.push(Box::new(observer));
    }

    pub fn clients(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.clients.iter().map(|c| c.client_id)
    }

    pub fn is_joined(&self, client: ClientId) -> bool {
        self.clients.iter().any(|c| c.client_id == client)
    }

    /// Registers (or re-registers) a client and returns its snapshot.
    pub fn join(&mut self, client_id: ClientId, viewpoint: [f64; 3]) -> Result<WorldUpdate, ReplicationError> {
        self.clients.retain(|c| c.client_id != client_id);
        let mut interest = ClientInterest::new(client_id, viewpoint);
        let snap = full_snapshot(&self.world, &mut interest, self.rule)?;
        let pos = self.clients.partition_point(|c| c.client_id < client_id);
        self.clients.insert(pos, interest);
        Ok(snap)
    }

    pub fn leave(&mut self, client_id: ClientId) -> bool {
        let before = self.clients.len();
        self.clients.retain(|c| c.client_id != client_id);
        before != self.clients.len()
    }

    pub fn set_viewpoint(&mut self, client_id: ClientId, viewpoint: [f64; 3]) -> Result<(), ReplicationError> {
        let c = self
            .clients
            .iter_mut()
            .find(|c| c.client_id == client_id)
            .ok_or(ReplicationError::UnknownClient(client_id))?;
        c.viewpoint = viewpoint;
        Ok(())
    }

    /// One simulation step: drain intents, advance the tick, collect deltas,
    /// notify observers.
    pub fn step(&mut self) -> Result<StepOutput, ReplicationError> {
        let mut rejected = Vec::new();
        while let Ok(intent) = self.intents_rx.try_recv() {
            match self
                .world
                .set_property(intent.object_id, intent.prop_id, intent.value.clone())
            {
                Ok(()) | Err(ReplicationError::NotReplicated { .. }) => {}
                Err(e) => rejected.push((intent, e)),
            }
        }
        let tick = self.world.step();
        let notice = ChangeNotice {
            tick,
            changed: self
                .world
                .dirty
                .changed
                .iter()
                .flat_map(|(o, ps)| ps.iter().map(move |p| (*o, *p)))
                .collect(),
            created: self.world.dirty.created.iter().copied().collect(),
            destroyed: self.world.dirty.destroyed.keys().copied().collect(),
        };
        let deltas = collect_deltas(&mut self.world, &mut self.clients, self.rule)?;
        if !(notice.changed.is_empty() && notice.created.is_empty() && notice.destroyed.is_empty()) {
            for obs in &mut self.observers {
                obs(&notice);
            }
        }
        Ok(StepOutput {
            tick,
            deltas,
            rejected,
        })
    }
}
