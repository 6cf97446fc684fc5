//! Stateful versus stateless equivalence on one call log.
//!
//! The stateful side applies the log in order to a single in-memory world.
//! The stateless side spreads the same calls round-robin over N instances
//! that share one linearizable store; a seeded scheduler interleaves their
//! read and write steps. Final object states are then compared.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use worldsync_core::cluster::{BackendPool, Policy};
use worldsync_core::replication::{ReplicatedObject, WorldState};
use worldsync_core::statestore::{object_key, CasOutcome, MemoryStore, StateStore, StoreProfile};
use worldsync_core::wire::{ObjectRecord, PropertyValue};

use crate::runner::{avatar_id, initial_objects, next_value, shared_id};
use crate::scenario::{Prepared, Scenario, WriteOp, WriteTarget};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub client: usize,
    pub behavior: usize,
    pub arg: PropertyValue,
}

/// Calls in the order the scenario's behaviours fire them.
pub fn event_log(p: &Prepared) -> Vec<LogEntry> {
    let s = &p.scenario;
    let n = s.clients.count;
    let mut timed = Vec::new();
    for c in 0..n {
        for (k, beh) in s.clients.behaviors.iter().enumerate() {
            let values = &p.values[k];
            let mut t = beh.start_ms + beh.every_ms * c as f64 / n as f64;
            let mut i = 0u32;
            while t <= s.duration_ms && beh.count.is_none_or(|max| i < max) {
                let arg = values[i as usize % values.len()].clone();
                timed.push((t, c, k, LogEntry { client: c, behavior: k, arg }));
                i += 1;
                t += beh.every_ms;
            }
        }
    }
    timed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    timed.into_iter().map(|(.., e)| e).collect()
}

fn target(p: &Prepared, e: &LogEntry) -> u32 {
    match p.effects[e.behavior].target {
        WriteTarget::Own => avatar_id(e.client),
        WriteTarget::Shared => shared_id(e.client % p.scenario.clients.scenes),
    }
}

/// Result of one stateful server applying the log in order.
pub fn stateful_result(p: &Prepared, log: &[LogEntry]) -> Result<BTreeMap<u32, ObjectRecord>, HarnessError> {
    let mut world = WorldState::new(p.schema.clone());
    for rec in initial_objects(p).values() {
        let obj = ReplicatedObject::from_record(rec);
        let props: Vec<_> = obj.properties.into_iter().collect();
        world.spawn_with_id(obj.object_id, obj.class_id, obj.owner, &props)?;
    }
    for e in log {
        let effect = &p.effects[e.behavior];
        let id = target(p, e);
        let cur = world
            .get(id, effect.prop_id)
            .cloned()
            .unwrap_or_else(|| PropertyValue::default_for(effect.kind));
        // non-replicated writes still land; the error only says nobody sees them
        let _ = world.set_property(id, effect.prop_id, next_value(effect, &cur, &e.arg));
    }
    Ok(world.objects().iter().map(|(id, o)| (*id, normalized(o.to_record()))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Read,
    Write,
}

struct InFlight {
    entry: usize,
    step: Step,
    read: Option<(u64, ObjectRecord)>,
}

#[derive(Default)]
struct Instance {
    queue: VecDeque<usize>,
    current: Option<InFlight>,
}

/// Counters from one stateless run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatelessRun {
    pub conflicts: u64,
    pub retries: u64,
    /// Calls served per instance.
    pub per_instance_max: u64,
}

/// Result of `instances` stateless servers over a shared store. Clients
/// keep one call in flight; the scheduler picks uniformly among "send the
/// next call" and "advance instance i by one store operation".
pub fn stateless_result(
    p: &Prepared,
    log: &[LogEntry],
    instances: usize,
    seed: u64,
    cas: bool,
) -> Result<(BTreeMap<u32, ObjectRecord>, StatelessRun), HarnessError> {
    let store = MemoryStore::new(StoreProfile::default(), seed);
    for rec in initial_objects(p).values() {
        store.put(&object_key(rec.object_id), rec.encode()?, 0.0)?;
    }
    let mut pool = BackendPool::new((0..instances as u32).collect(), Policy::RoundRobin)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut insts: Vec<Instance> = (0..instances).map(|_| Instance::default()).collect();
    let mut busy = vec![false; p.scenario.clients.count];
    let mut served = vec![0u64; instances];
    let mut next = 0usize;
    let mut now = 0.0;
    let mut run = StatelessRun::default();
    loop {
        let mut actions = Vec::new();
        if next < log.len() && !busy[log[next].client] {
            actions.push(None);
        }
        for (i, inst) in insts.iter().enumerate() {
            if inst.current.is_some() || !inst.queue.is_empty() {
                actions.push(Some(i));
            }
        }
        if actions.is_empty() {
            break;
        }
        now += 1.0;
        match actions[rng.gen_range(0..actions.len())] {
            None => {
                let b = pool.route_request()? as usize;
                busy[log[next].client] = true;
                insts[b].queue.push_back(next);
                next += 1;
            }
            Some(i) => {
                let inst = &mut insts[i];
                let mut f = match inst.current.take() {
                    Some(f) => f,
                    None => InFlight {
                        entry: inst.queue.pop_front().expect("has work"),
                        step: Step::Read,
                        read: None,
                    },
                };
                let e = &log[f.entry];
                let key = object_key(target(p, e));
                match f.step {
                    Step::Read => {
                        let got = store.get(&key, now)?.value.expect("objects are never removed");
                        f.read = Some((got.version, ObjectRecord::decode(&got.value)?));
                        f.step = Step::Write;
                        inst.current = Some(f);
                    }
                    Step::Write => {
                        let effect = &p.effects[e.behavior];
                        let (version, mut rec) = f.read.take().expect("read first");
                        let cur = rec
                            .properties
                            .iter()
                            .find(|(id, _)| *id == effect.prop_id)
                            .map_or_else(|| PropertyValue::default_for(effect.kind), |(_, v)| v.clone());
                        let v = next_value(effect, &cur, &e.arg);
                        match rec.properties.iter_mut().find(|(id, _)| *id == effect.prop_id) {
                            Some(slot) => slot.1 = v,
                            None => rec.properties.push((effect.prop_id, v)),
                        }
                        let committed = if cas {
                            matches!(store.cas(&key, version, rec.encode()?, now)?.value, CasOutcome::Ok(_))
                        } else {
                            store.put(&key, rec.encode()?, now)?;
                            true
                        };
                        if committed {
                            busy[e.client] = false;
                            served[i] += 1;
                        } else {
                            run.conflicts += 1;
                            run.retries += 1;
                            f.step = Step::Read;
                            inst.current = Some(f);
                        }
                    }
                }
            }
        }
    }
    run.per_instance_max = served.iter().copied().max().unwrap_or(0);
    let mut out = BTreeMap::new();
    for (key, v) in store.dump() {
        let rec = normalized(ObjectRecord::decode(&v.value)?);
        debug_assert_eq!(key, object_key(rec.object_id));
        out.insert(rec.object_id, rec);
    }
    Ok((out, run))
}

fn normalized(mut rec: ObjectRecord) -> ObjectRecord {
    rec.properties.sort_by_key(|(id, _)| *id);
    rec
}

/// First object whose final state differs, described.
pub fn compare(
    stateful: &BTreeMap<u32, ObjectRecord>,
    stateless: &BTreeMap<u32, ObjectRecord>,
) -> Option<String> {
    let ids: std::collections::BTreeSet<u32> = stateful.keys().chain(stateless.keys()).copied().collect();
    for id in ids {
        match (stateful.get(&id), stateless.get(&id)) {
            (Some(a), Some(b)) if a == b => {}
            (Some(a), Some(b)) => {
                for (pa, pb) in a.properties.iter().zip(&b.properties) {
                    if pa != pb {
                        return Some(format!(
                            "object {id} property {}: stateful {:?}, stateless {:?}",
                            pa.0, pa.1, pb.1
                        ));
                    }
                }
                return Some(format!("object {id}: records differ"));
            }
            (a, _) => {
                let side = if a.is_some() { "stateless" } else { "stateful" };
                return Some(format!("object {id} missing on the {side} side"));
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EquivConfig {
    pub instances: usize,
    /// Seeds 0..seeds are tried.
    pub seeds: u64,
    /// Compare-and-swap with retry; `false` writes blindly.
    pub cas: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    pub seed: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EquivSummary {
    pub equal: u64,
    pub diverged: u64,
    pub first_divergence: Option<Divergence>,
    pub conflicts: u64,
}

/// Rejects logs whose outcome depends on the order of different clients'
/// calls: a plain set on a shared object.
pub fn check_order_independent(p: &Prepared) -> Result<(), HarnessError> {
    for (k, e) in p.effects.iter().enumerate() {
        if e.target == WriteTarget::Shared && e.op == WriteOp::Set {
            return Err(HarnessError::InvalidScenario(format!(
                "behavior {k}: set on a shared object depends on call order; use add"
            )));
        }
    }
    Ok(())
}

pub fn check_prepared(p: &Prepared, cfg: &EquivConfig) -> Result<EquivSummary, HarnessError> {
    if cfg.instances == 0 {
        return Err(HarnessError::InvalidScenario("instances must be positive".into()));
    }
    check_order_independent(p)?;
    let log = event_log(p);
    let expected = stateful_result(p, &log)?;
    let mut summary = EquivSummary::default();
    for seed in 0..cfg.seeds {
        let (got, run) = stateless_result(p, &log, cfg.instances, seed, cfg.cas)?;
        summary.conflicts += run.conflicts;
        match compare(&expected, &got) {
            None => summary.equal += 1,
            Some(detail) => {
                summary.diverged += 1;
                summary.first_divergence.get_or_insert(Divergence { seed, detail });
            }
        }
    }
    Ok(summary)
}

pub fn check_scenario(s: &Scenario, cfg: &EquivConfig) -> Result<EquivSummary, HarnessError> {
    check_prepared(&s.prepare()?, cfg)
}
