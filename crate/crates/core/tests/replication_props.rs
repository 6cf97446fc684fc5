use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;

use worldsync_core::replication::{
    Owner, Replica, ReplicationError, ReplicationServer, RelevanceRule, WorldState,
};
use worldsync_core::schema::{parse_schema, Schema, ValueKind};
use worldsync_core::wire::{MessageBody, ObjectChange, PropertyValue, WorldUpdate};

const SRC: &str = "version 3
class Avatar id=1
  prop appearance id=1 kind=text replicated
  prop position id=2 kind=vec3 replicated
  prop secret id=3 kind=int64
  prop score id=4 kind=int64 replicated
end
class Crate id=2
  prop position id=1 kind=vec3 replicated
  prop mass id=2 kind=float64 replicated
  prop open id=3 kind=bool replicated
  prop blob id=4 kind=bytes replicated
end
";

fn schema() -> Arc<Schema> {
    Arc::new(parse_schema(SRC).unwrap())
}

#[derive(Debug, Clone)]
enum Op {
    Spawn { class: u16, pos: [i8; 3] },
    Destroy { pick: usize },
    Set { pick: usize, slot: usize, r: i64 },
    Step,
    Join { viewpoint: [i8; 3] },
    Move { pick: usize, viewpoint: [i8; 3] },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        2 => (1u16..=2, any::<[i8; 3]>()).prop_map(|(class, pos)| Op::Spawn { class, pos }),
        1 => any::<usize>().prop_map(|pick| Op::Destroy { pick }),
        6 => (any::<usize>(), any::<usize>(), any::<i64>()).prop_map(|(pick, slot, r)| Op::Set { pick, slot, r }),
        3 => Just(Op::Step),
        1 => any::<[i8; 3]>().prop_map(|viewpoint| Op::Join { viewpoint }),
        1 => (any::<usize>(), any::<[i8; 3]>()).prop_map(|(pick, viewpoint)| Op::Move { pick, viewpoint }),
    ]
}

fn value_for(kind: ValueKind, r: i64) -> PropertyValue {
    match kind {
        ValueKind::Null => PropertyValue::Null,
        ValueKind::Bool => PropertyValue::Bool(r & 1 == 1),
        ValueKind::Int64 => PropertyValue::Int64(r),
        ValueKind::Float64 => PropertyValue::Float64(r as f64 / 7.0),
        ValueKind::Text => PropertyValue::Text(["Mario", "Luigi", "Peach", ""][(r as u64 % 4) as usize].into()),
        ValueKind::Vec3 => PropertyValue::Vec3([(r % 40) as f64, ((r >> 8) % 40) as f64, ((r >> 16) % 5) as f64]),
        ValueKind::Bytes => PropertyValue::Bytes(r.to_be_bytes()[..(r as u64 % 9) as usize].to_vec()),
    }
}

fn vp(v: [i8; 3]) -> [f64; 3] {
    [v[0] as f64 / 4.0, v[1] as f64 / 4.0, v[2] as f64 / 16.0]
}

/// Server-side expectation for one client, computed straight from the world:
/// relevant objects, replicated properties only, encoded like a replica.
fn expected_bytes(world: &WorldState, viewpoint: [f64; 3], radius: Option<f64>) -> Vec<u8> {
    let schema = world.schema();
    let mut objects = Vec::new();
    for obj in world.objects().values() {
        let class = schema.class(obj.class_id).unwrap();
        if let Some(r) = radius {
            let pos_id = class.property_by_key("position").unwrap().prop_id;
            let p = obj.properties[&pos_id].as_vec3().unwrap();
            let d2: f64 = (0..3).map(|i| (p[i] - viewpoint[i]).powi(2)).sum();
            if d2.sqrt() > r {
                continue;
            }
        }
        let properties = obj
            .properties
            .iter()
            .filter(|(id, _)| class.property(**id).unwrap().replicated)
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        objects.push(ObjectChange::Update {
            object_id: obj.object_id,
            class_id: obj.class_id,
            properties,
        });
    }
    MessageBody::Snapshot(WorldUpdate { tick: 0, objects }).encode().unwrap()
}

struct Client {
    id: u32,
    viewpoint: [f64; 3],
    replica: Replica,
    ticks: Vec<u64>,
}

struct Run {
    server: ReplicationServer,
    clients: Vec<Client>,
    /// (delta tick, client) -> pairs sent, checked against the dirty set.
    violations: Vec<String>,
}

fn ship(replica: &mut Replica, body: MessageBody) -> bool {
    let bytes = body.encode().unwrap();
    replica.apply_message(&MessageBody::decode(&bytes).unwrap()).unwrap()
}

fn run(ops: &[Op], rule: RelevanceRule) -> Run {
    let schema = schema();
    let mut server = ReplicationServer::new(schema.clone(), rule).unwrap();
    let mut clients: Vec<Client> = Vec::new();
    let mut violations = Vec::new();
    let join = |server: &mut ReplicationServer, clients: &mut Vec<Client>, viewpoint: [f64; 3]| {
        let id = clients.len() as u32 + 1;
        let snap = server.join(id, viewpoint).unwrap();
        let mut replica = Replica::new(schema.clone());
        ship(&mut replica, MessageBody::Snapshot(snap));
        clients.push(Client {
            id,
            viewpoint,
            replica,
            ticks: Vec::new(),
        });
    };
    join(&mut server, &mut clients, [0.0; 3]);
    let step = |server: &mut ReplicationServer, clients: &mut Vec<Client>, violations: &mut Vec<String>| {
        let dirty = server.world().dirty().clone();
        let out = server.step().unwrap();
        for c in clients.iter_mut() {
            let Some(delta) = out.deltas.get(&c.id) else { continue };
            if rule == RelevanceRule::All {
                for change in &delta.objects {
                    match change {
                        ObjectChange::Update { object_id, properties, .. } => {
                            for (p, _) in properties {
                                if !dirty.contains(*object_id, *p) {
                                    violations.push(format!("({object_id},{p}) not dirty"));
                                }
                            }
                        }
                        ObjectChange::Destroy { object_id, .. } => {
                            if !dirty.destroyed.contains_key(object_id) {
                                violations.push(format!("destroy {object_id} not dirty"));
                            }
                        }
                    }
                }
            }
            c.ticks.push(delta.tick);
            assert!(ship(&mut c.replica, MessageBody::ReplicationDelta(delta.clone())));
        }
    };
    for op in ops {
        match op {
            Op::Spawn { class, pos } => {
                let c = schema.class(*class).unwrap();
                let pos_id = c.property_by_key("position").unwrap().prop_id;
                server
                    .world_mut()
                    .spawn(*class, Owner::Server, &[(pos_id, PropertyValue::Vec3(vp(*pos)))])
                    .unwrap();
            }
            Op::Destroy { pick } => {
                let ids: Vec<u32> = server.world().objects().keys().copied().collect();
                if !ids.is_empty() {
                    server.world_mut().destroy(ids[pick % ids.len()]).unwrap();
                }
            }
            Op::Set { pick, slot, r } => {
                let ids: Vec<u32> = server.world().objects().keys().copied().collect();
                if ids.is_empty() {
                    continue;
                }
                let id = ids[pick % ids.len()];
                let class = schema.class(server.world().object(id).unwrap().class_id).unwrap();
                let def = &class.properties[slot % class.properties.len()];
                match server.world_mut().set_property(id, def.prop_id, value_for(def.kind, *r)) {
                    Ok(()) => assert!(def.replicated),
                    Err(ReplicationError::NotReplicated { .. }) => assert!(!def.replicated),
                    Err(e) => panic!("{e}"),
                }
            }
            Op::Step => step(&mut server, &mut clients, &mut violations),
            Op::Join { viewpoint } => {
                // Joins happen between ticks: pending writes reach the newcomer by snapshot.
                step(&mut server, &mut clients, &mut violations);
                join(&mut server, &mut clients, vp(*viewpoint));
            }
            Op::Move { pick, viewpoint } => {
                let n = clients.len();
                let c = &mut clients[pick % n];
                c.viewpoint = vp(*viewpoint);
                server.set_viewpoint(c.id, c.viewpoint).unwrap();
            }
        }
    }
    step(&mut server, &mut clients, &mut violations);
    Run {
        server,
        clients,
        violations,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn late_joiner_matches_delta_stream(ops in prop::collection::vec(op(), 1..80)) {
        let mut r = run(&ops, RelevanceRule::All);
        let snap = r.server.join(999, [0.0; 3]).unwrap();
        let mut late = Replica::new(schema());
        ship(&mut late, MessageBody::Snapshot(snap));
        let late_bytes = late.canonical_bytes().unwrap();
        prop_assert_eq!(&late_bytes, &expected_bytes(r.server.world(), [0.0; 3], None));
        for c in &r.clients {
            prop_assert_eq!(&c.replica.canonical_bytes().unwrap(), &late_bytes, "client {}", c.id);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn replicas_converge_under_radius(
        ops in prop::collection::vec(op(), 1..80),
        radius in 1.0f64..30.0,
    ) {
        let r = run(&ops, RelevanceRule::Radius(radius));
        for c in &r.clients {
            prop_assert_eq!(
                c.replica.canonical_bytes().unwrap(),
                expected_bytes(r.server.world(), c.viewpoint, Some(radius)),
                "client {}", c.id
            );
        }
    }

    #[test]
    fn deltas_never_exceed_dirty_set(ops in prop::collection::vec(op(), 1..80)) {
        let r = run(&ops, RelevanceRule::All);
        prop_assert!(r.violations.is_empty(), "{:?}", r.violations);
    }

    #[test]
    fn ticks_strictly_increase_and_stale_is_dropped(ops in prop::collection::vec(op(), 1..60)) {
        let mut r = run(&ops, RelevanceRule::All);
        for c in &mut r.clients {
            prop_assert!(c.ticks.windows(2).all(|w| w[0] < w[1]), "{:?}", c.ticks);
            if let Some(&last) = c.ticks.last() {
                let before = c.replica.canonical_bytes().unwrap();
                let stale = WorldUpdate { tick: last, objects: vec![ObjectChange::Destroy { object_id: 1, class_id: 1 }] };
                prop_assert!(!c.replica.apply_delta(&stale).unwrap());
                prop_assert_eq!(c.replica.canonical_bytes().unwrap(), before);
            }
        }
    }
}

#[test]
fn coalesced_writes_match_sequential_replay() {
    let s = schema();
    let mut server = ReplicationServer::new(s.clone(), RelevanceRule::All).unwrap();
    let mut replica = Replica::new(s.clone());
    replica.apply_snapshot(&server.join(1, [0.0; 3]).unwrap()).unwrap();
    let id = server.world_mut().spawn(1, Owner::Client(1), &[]).unwrap();
    server.step().unwrap();
    let mut log = Vec::new();
    for v in 1..=5 {
        let value = PropertyValue::Int64(v * 11);
        server.world_mut().set_property(id, 4, value.clone()).unwrap();
        log.push(value);
    }
    let out = server.step().unwrap();
    let delta = &out.deltas[&1];
    let ObjectChange::Update { properties, .. } = &delta.objects[0] else { panic!() };
    assert_eq!(properties, &vec![(4, PropertyValue::Int64(55))]);
    let mut oracle: BTreeMap<u16, PropertyValue> = BTreeMap::new();
    for v in log {
        oracle.insert(4, v);
    }
    replica.apply_delta(delta).unwrap();
    assert_eq!(replica.get(id, 4), oracle.get(&4));
}

#[test]
fn mario_luigi_late_joiner() {
    let s = schema();
    let mut server = ReplicationServer::new(s.clone(), RelevanceRule::All).unwrap();
    let mario = PropertyValue::Text("Mario".into());
    let ids: BTreeSet<u32> = (0..3)
        .map(|_| server.world_mut().spawn(1, Owner::Server, &[(1, mario.clone())]).unwrap())
        .collect();
    server.step().unwrap();
    server.world_mut().set_property(2, 1, PropertyValue::Text("Luigi".into())).unwrap();
    server.step().unwrap();
    let mut late = Replica::new(s);
    late.apply_snapshot(&server.join(4, [0.0; 3]).unwrap()).unwrap();
    for id in ids {
        let want = if id == 2 { "Luigi" } else { "Mario" };
        assert_eq!(late.get(id, 1).and_then(PropertyValue::as_text), Some(want));
    }
}
