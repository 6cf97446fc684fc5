//! Acceptance suite. Runs every criterion in turn, prints one PASS/FAIL line
//! per criterion with its runtime and limit, and exits non-zero on any FAIL.
//! A criterion that finishes over its limit fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use worldsync_core::broker::{Broker, DeliveryMode, Message};
use worldsync_core::clocksync::{simulate_exchange, ExchangeSetup};
use worldsync_core::cluster::{BackendPool, FlowKey, Policy};
use worldsync_core::replication::{Owner, RelevanceRule, Replica, ReplicationServer};
use worldsync_core::schema::parse_schema;
use worldsync_core::transport::{Address, NetConditions};
use worldsync_core::wire::{
    decode_frame, decode_value, encode_frame, encode_value, Frame, FrameFlags, MessageBody, ObjectChange,
    PropertyValue, RpcRequest, RpcResponse, RpcStatus, RpcTarget, WorldUpdate,
};
use worldsync_harness::advisor::{recommend, Verdict};
use worldsync_harness::budget::{frame_deadline, FrameClass};
use worldsync_harness::capacity::{sweep, CapacityConfig};
use worldsync_harness::equivalence::{check_scenario, EquivConfig};
use worldsync_harness::reliability::{run_reliability, ReliabilityConfig};
use worldsync_harness::runner::run;
use worldsync_harness::scenario::Topology;
use worldsync_harness::Scenario;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn manifest() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn scenario(name: &str) -> Result<Scenario, String> {
    Scenario::load(&manifest().join("scenarios").join(name)).map_err(|e| e.to_string())
}

// 1 ---------------------------------------------------------------------------

fn frame_budgets() -> Outcome {
    for (fps, shown, class) in [
        (24.0, 41.7, FrameClass::Realtime),
        (144.0, 6.9, FrameClass::VrComfort),
        (90.0, 11.1, FrameClass::VrComfort),
    ] {
        let b = frame_deadline(fps).map_err(|e| e.to_string())?;
        ensure(b.display_ms() == shown, || format!("{fps} fps shows {} ms", b.display_ms()))?;
        ensure(b.class == class, || format!("{fps} fps classed {:?}", b.class))?;
        ensure((b.period_ms * fps - 1000.0).abs() <= 1e-9, || format!("{fps} fps period {}", b.period_ms))?;
    }
    ensure(frame_deadline(0.0).is_err() && frame_deadline(-1.0).is_err(), || "non-positive fps accepted".into())?;
    Ok("24 -> 41.7 ms, 144 -> 6.9 ms, 90 -> 11.1 ms".into())
}

// 2 ---------------------------------------------------------------------------

fn advisor() -> Outcome {
    let cases = [
        (3.0, 10, Verdict::Direct),
        (20.0, 50, Verdict::StatefulDedicated),
        (100.0, 10_000, Verdict::StatelessHttp),
        (5.0, 100, Verdict::StatefulDedicated),
        (40.0, 100, Verdict::StatefulDedicated),
        (4.999, 100, Verdict::Direct),
        (40.001, 100, Verdict::StatelessHttp),
        (20.0, 101, Verdict::HybridStatelessRpc),
    ];
    for (ms, users, want) in cases {
        let r = recommend(ms, users).map_err(|e| e.to_string())?;
        ensure(r.verdict == want, || format!("({ms} ms, {users}) -> {:?}, want {want:?}", r.verdict))?;
        ensure(!r.rationale.is_empty(), || "empty rationale".into())?;
    }
    ensure(recommend(0.0, 10).is_err() && recommend(10.0, 0).is_err(), || "non-positive input accepted".into())?;
    Ok(format!("{} cases incl. 5.0 and 40.0 boundaries", cases.len()))
}

// 3 ---------------------------------------------------------------------------

const LATE_JOIN_SCHEMA: &str = "version 1
class Avatar id=1
  prop appearance id=1 kind=text replicated
  prop position id=2 kind=vec3 replicated
  prop secret id=3 kind=int64
  prop score id=4 kind=int64 replicated
end
";

fn random_value(rng: &mut ChaCha8Rng, prop: u16) -> PropertyValue {
    match prop {
        1 => PropertyValue::Text(["Mario", "Luigi", "Peach", "Toad"][rng.gen_range(0..4)].into()),
        2 => PropertyValue::Vec3([rng.gen_range(-9..10) as f64, rng.gen_range(-9..10) as f64, 0.0]),
        _ => PropertyValue::Int64(rng.gen_range(-100..100)),
    }
}

fn one_history(seed: u64) -> Result<(), String> {
    let schema = Arc::new(parse_schema(LATE_JOIN_SCHEMA).map_err(|e| e.to_string())?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut server = ReplicationServer::new(schema.clone(), RelevanceRule::All).map_err(|e| e.to_string())?;
    let mut early = Replica::new(schema.clone());
    let snap = server.join(1, [0.0; 3]).map_err(|e| e.to_string())?;
    early.apply_snapshot(&snap).map_err(|e| e.to_string())?;
    let mut ids: Vec<u32> = Vec::new();
    let ship = |server: &mut ReplicationServer, early: &mut Replica| -> Result<(), String> {
        let out = server.step().map_err(|e| e.to_string())?;
        if let Some(d) = out.deltas.get(&1) {
            let bytes = MessageBody::ReplicationDelta(d.clone()).encode().map_err(|e| e.to_string())?;
            early.apply_message(&MessageBody::decode(&bytes).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        }
        Ok(())
    };
    for _ in 0..rng.gen_range(1..60) {
        match rng.gen_range(0..10) {
            0 | 1 => {
                let owner = if rng.gen() { Owner::Server } else { Owner::Client(1) };
                let init = [(1, random_value(&mut rng, 1))];
                ids.push(server.world_mut().spawn(1, owner, &init).map_err(|e| e.to_string())?);
            }
            2 if !ids.is_empty() => {
                let id = ids.swap_remove(rng.gen_range(0..ids.len()));
                server.world_mut().destroy(id).map_err(|e| e.to_string())?;
            }
            3..=6 if !ids.is_empty() => {
                let id = ids[rng.gen_range(0..ids.len())];
                let prop = rng.gen_range(1..=4u16);
                let v = random_value(&mut rng, prop);
                // the secret property is applied but never replicated
                let _ = server.world_mut().set_property(id, prop, v);
            }
            _ => ship(&mut server, &mut early)?,
        }
    }
    ship(&mut server, &mut early)?;
    let mut late = Replica::new(schema);
    let snap = server.join(2, [0.0; 3]).map_err(|e| e.to_string())?;
    let bytes = MessageBody::Snapshot(snap).encode().map_err(|e| e.to_string())?;
    late.apply_message(&MessageBody::decode(&bytes).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let a = early.canonical_bytes().map_err(|e| e.to_string())?;
    let b = late.canonical_bytes().map_err(|e| e.to_string())?;
    ensure(a == b, || format!("seed {seed}: delta replica differs from snapshot replica"))
}

fn late_joiner() -> Outcome {
    const HISTORIES: u64 = 1000;
    for seed in 0..HISTORIES {
        one_history(seed)?;
    }
    Ok(format!("{HISTORIES} histories byte-equal"))
}

// 4 ---------------------------------------------------------------------------

fn equivalence() -> Outcome {
    let s = scenario("equiv.json")?;
    let cas = check_scenario(&s, &EquivConfig { instances: 3, seeds: 100, cas: true }).map_err(|e| e.to_string())?;
    ensure(cas.equal == 100, || format!("cas-retry diverged: {:?}", cas.first_divergence))?;
    let blind = check_scenario(&s, &EquivConfig { instances: 3, seeds: 100, cas: false }).map_err(|e| e.to_string())?;
    ensure(blind.diverged >= 1, || "blind writes never diverged".into())?;
    Ok(format!(
        "cas 100/100 equal ({} conflicts retried); blind writes diverged on {}/100",
        cas.conflicts, blind.diverged
    ))
}

// 5 ---------------------------------------------------------------------------

fn reliability() -> Outcome {
    let mut runs = 0;
    for loss_rate in [0.1, 0.3, 0.5] {
        for seed in 0..20 {
            let cfg = ReliabilityConfig { loss_rate, seed, ..ReliabilityConfig::default() };
            let out = run_reliability(&cfg).map_err(|e| format!("loss {loss_rate} seed {seed}: {e}"))?;
            ensure(out.exactly_once_in_order(&cfg), || format!("loss {loss_rate} seed {seed}: {out:?}"))?;
            runs += 1;
        }
    }
    Ok(format!("{runs} runs: every call ran once, every stream in order"))
}

// 6 ---------------------------------------------------------------------------

fn link(latency: f64, jitter: f64, seed: u64) -> NetConditions {
    NetConditions { one_way_latency_ms: latency, jitter_ms: jitter, seed, ..NetConditions::default() }
}

fn clock_sync() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..200 {
        let latency = rng.gen_range(0..200 * 1024) as f64 / 1024.0;
        let offset = rng.gen_range(-10_000..10_000) as f64;
        let c = link(latency, 0.0, seed);
        let out = simulate_exchange(&ExchangeSetup {
            uplink: c,
            downlink: c,
            true_offset_ms: offset,
            processing_ms: rng.gen_range(0..10) as f64,
            pings: 5,
            interval_ms: 500.0,
        })
        .map_err(|e| e.to_string())?;
        ensure(out.error_ms() == Some(0.0), || format!("seed {seed}: error {:?}", out.error_ms()))?;
    }
    for seed in 0..200 {
        let out = simulate_exchange(&ExchangeSetup {
            uplink: link(rng.gen_range(1.0..80.0), 5.0, seed),
            downlink: link(rng.gen_range(1.0..80.0), 5.0, seed ^ 0xff),
            true_offset_ms: 40.0,
            processing_ms: 1.0,
            pings: 100,
            interval_ms: 500.0,
        })
        .map_err(|e| e.to_string())?;
        let (est, err) = (out.estimate.ok_or("no estimate")?, out.error_ms().ok_or("no estimate")?);
        ensure(err.abs() <= est.rtt_ms / 2.0 + 1e-9, || format!("seed {seed}: |{err}| > {}/2", est.rtt_ms))?;
    }
    Ok("200 exact symmetric runs, 200 jittered runs within rtt/2".into())
}

// 7 ---------------------------------------------------------------------------

fn load_balancer() -> Outcome {
    for n in 1..8u32 {
        for k in 1..10usize {
            let mut pool = BackendPool::new((0..n).collect(), Policy::RoundRobin).map_err(|e| e.to_string())?;
            let mut got: BTreeMap<u32, usize> = BTreeMap::new();
            for _ in 0..k * n as usize {
                *got.entry(pool.route_request().map_err(|e| e.to_string())?).or_default() += 1;
            }
            ensure(got.len() == n as usize && got.values().all(|&c| c == k), || format!("n={n} k={k}: {got:?}"))?;
        }
    }
    let vip = Address::new(0, 443);
    let mut pool = BackendPool::new(vec![0, 1, 2, 3], Policy::FlowHash).map_err(|e| e.to_string())?.with_idle_expiry(None);
    let flows: Vec<FlowKey> = (0..200).map(|i| FlowKey::new(Address::new(1000 + i, 5000), vip)).collect();
    let first: Vec<u32> = flows.iter().map(|f| pool.route(*f, 0.0)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    for round in 1..20 {
        for (f, b) in flows.iter().zip(&first) {
            let now = round as f64 * 3.6e6;
            ensure(pool.route(*f, now).map_err(|e| e.to_string())? == *b, || "flow moved".into())?;
        }
    }
    let mut pool = BackendPool::new(vec![0, 1, 2], Policy::FlowHash).map_err(|e| e.to_string())?;
    let nat = FlowKey::new(Address::new(77, 5000), vip);
    let a = pool.route(nat, 0.0).map_err(|e| e.to_string())?;
    let b = pool.route(nat, 1.0).map_err(|e| e.to_string())?;
    ensure(a == b && pool.affinity_len() == 1, || "NAT users split".into())?;
    Ok("round robin exact for n<8, k<10; 200 flows stable; NAT pair on one backend".into())
}

// 8 ---------------------------------------------------------------------------

fn broker_invariants() -> Result<(), String> {
    let mut b = Broker::new();
    b.create_topic("t", 4).map_err(|e| e.to_string())?;
    b.create_group("pull", "t", DeliveryMode::Pull).map_err(|e| e.to_string())?;
    b.create_group("push", "t", DeliveryMode::Push).map_err(|e| e.to_string())?;
    b.join_group("pull", "w").map_err(|e| e.to_string())?;
    let pushed = Arc::new(std::sync::Mutex::new(Vec::<Message>::new()));
    let sink = pushed.clone();
    b.subscribe_push("push", "w", move |m| {
        sink.lock().expect("sink").push(m.clone());
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let publisher = b.publisher();
    for i in 0..1000u32 {
        publisher.publish("t", &rng.gen::<u32>().to_be_bytes(), &i.to_be_bytes());
    }
    b.tick();
    let pulled = b.pull("pull", "w", 10_000).map_err(|e| e.to_string())?;
    let pushed = pushed.lock().expect("sink").clone();
    ensure(pulled.len() == 1000 && pushed == pulled, || "push and pull deliveries differ".into())?;
    for p in 0..4 {
        let offsets: Vec<u64> = b.log("t", p).map_err(|e| e.to_string())?.iter().map(|m| m.offset).collect();
        ensure(offsets.iter().copied().eq(0..offsets.len() as u64), || format!("gap in partition {p}"))?;
    }
    Ok(())
}

fn scaling() -> Outcome {
    let cap = |t, n| sweep(&CapacityConfig::reference(t, n)).map(|c| c.capacity_per_s).map_err(|e| e.to_string());
    let (sl1, sl3) = (cap(Topology::StatelessRpc, 1)?, cap(Topology::StatelessRpc, 3)?);
    let (sf1, sf3) = (cap(Topology::StatefulDedicated, 1)?, cap(Topology::StatefulDedicated, 3)?);
    ensure(sl1 > 0.0 && sl3 >= 2.5 * sl1, || format!("stateless {sl1}/s -> {sl3}/s"))?;
    ensure(sf1 > 0.0 && sf3 <= sf1, || format!("stateful {sf1}/s -> {sf3}/s"))?;
    broker_invariants()?;
    Ok(format!(
        "stateless {sl1}/s -> {sl3}/s ({:.1}x), pinned scene {sf1}/s -> {sf3}/s; broker order and push=pull hold",
        sl3 / sl1
    ))
}

// 9 ---------------------------------------------------------------------------

fn determinism() -> Outcome {
    let mut n = 0;
    for entry in std::fs::read_dir(manifest().join("scenarios")).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let s = Scenario::load(&path).map_err(|e| e.to_string())?;
        for seed in [s.seed, 12345] {
            let s = s.clone().with_seed(seed);
            let a = run(&s).map_err(|e| e.to_string())?.report.to_json();
            let b = run(&s).map_err(|e| e.to_string())?.report.to_json();
            ensure(a == b, || format!("{} seed {seed} differs", path.display()))?;
            n += 1;
        }
    }
    Ok(format!("{n} (scenario, seed) pairs byte-identical"))
}

// 10 --------------------------------------------------------------------------

fn golden(dir: &Path, name: &str) -> Result<Vec<u8>, String> {
    let text = std::fs::read_to_string(dir.join(name)).map_err(|e| format!("{name}: {e}"))?;
    let digits: String = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.chars().filter(|c| !c.is_whitespace()))
        .collect();
    hex::decode(digits).map_err(|e| format!("{name}: {e}"))
}

fn random_value_any(rng: &mut ChaCha8Rng) -> PropertyValue {
    match rng.gen_range(0..7) {
        0 => PropertyValue::Null,
        1 => PropertyValue::Bool(rng.gen()),
        2 => PropertyValue::Int64(rng.gen()),
        3 => PropertyValue::Float64(f64::from_bits(rng.gen())),
        4 => PropertyValue::Text((0..rng.gen_range(0..20)).map(|_| rng.gen::<char>()).collect()),
        5 => PropertyValue::Vec3([rng.gen(), rng.gen(), rng.gen()]),
        _ => PropertyValue::Bytes((0..rng.gen_range(0..40)).map(|_| rng.gen()).collect()),
    }
}

fn wire() -> Outcome {
    let dir = manifest().join("../core/tests/fixtures/golden");
    let bodies = [
        (
            "delta_luigi.hex",
            MessageBody::ReplicationDelta(WorldUpdate {
                tick: 7,
                objects: vec![ObjectChange::Update {
                    object_id: 2,
                    class_id: 1,
                    properties: vec![(1, PropertyValue::Text("Luigi".into()))],
                }],
            }),
        ),
        (
            "rpc_request_set_appearance.hex",
            MessageBody::RpcRequest(RpcRequest {
                call_id: 1,
                method_id: 10,
                target: RpcTarget::Server,
                reliable: true,
                args: vec![PropertyValue::Text("Luigi".into())],
            }),
        ),
        (
            "rpc_response_ok_int.hex",
            MessageBody::RpcResponse(RpcResponse { call_id: 2, status: RpcStatus::Ok, value: Some(PropertyValue::Int64(42)) }),
        ),
        ("clock_pong.hex", MessageBody::ClockPong { t0: 100.0, t1: 150.0, t2: 152.0 }),
        ("join.hex", MessageBody::Join { client_id: 7, schema_version: 1 }),
        ("join_ack.hex", MessageBody::JoinAck { client_id: 7, accepted: true }),
    ];
    for (name, expected) in &bodies {
        let bytes = golden(&dir, name)?;
        let got = MessageBody::decode(&bytes).map_err(|e| format!("{name}: {e}"))?;
        ensure(&got == expected, || format!("{name} decodes to {got:?}"))?;
        ensure(expected.encode().map_err(|e| e.to_string())? == bytes, || format!("{name} re-encodes differently"))?;
    }
    let ping = golden(&dir, "clock_ping_frame.hex")?;
    let frame = decode_frame(&ping).map_err(|e| e.to_string())?;
    ensure(
        MessageBody::decode(&frame.payload).map_err(|e| e.to_string())? == MessageBody::ClockPing { t0: 1000.0 },
        || "ping frame payload".into(),
    )?;
    let v = golden(&dir, "value_int64_256.hex")?;
    ensure(decode_value(&v).map_err(|e| e.to_string())? == (PropertyValue::Int64(256), 9), || "int64 value".into())?;

    const N: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..N {
        let value = random_value_any(&mut rng);
        let bytes = encode_value(&value).map_err(|e| e.to_string())?;
        let (back, used) = decode_value(&bytes).map_err(|e| format!("value {i}: {e}"))?;
        ensure(back == value && used == bytes.len(), || format!("value {i}: {value:?}"))?;

        let frame = Frame {
            flags: FrameFlags::from_bits_retain(rng.gen()),
            channel: rng.gen(),
            sequence: rng.gen(),
            ack: rng.gen(),
            ack_bits: rng.gen(),
            payload: (0..rng.gen_range(0..200)).map(|_| rng.gen()).collect(),
        };
        let bytes = encode_frame(&frame).map_err(|e| e.to_string())?;
        ensure(decode_frame(&bytes).map_err(|e| format!("frame {i}: {e}"))? == frame, || format!("frame {i}"))?;

        let body = MessageBody::RpcRequest(RpcRequest {
            call_id: rng.gen(),
            method_id: rng.gen(),
            target: RpcTarget::Client(rng.gen()),
            reliable: rng.gen(),
            args: (0..rng.gen_range(0..4)).map(|_| random_value_any(&mut rng)).collect(),
        });
        let bytes = body.encode().map_err(|e| e.to_string())?;
        ensure(MessageBody::decode(&bytes).map_err(|e| e.to_string())? == body, || format!("body {i}"))?;
    }
    Ok(format!("{} golden fixtures; {N} values, frames and bodies round-trip", bodies.len() + 2))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, u64, fn() -> Outcome); 10] = [
        (1, "frame budgets", 1, frame_budgets),
        (2, "deployment advisor", 1, advisor),
        (3, "late joiner", 60, late_joiner),
        (4, "stateless equivalence", 120, equivalence),
        (5, "reliability under loss", 60, reliability),
        (6, "clock sync", 30, clock_sync),
        (7, "load balancer", 10, load_balancer),
        (8, "scaling contrast", 120, scaling),
        (9, "determinism", 30, determinism),
        (10, "wire golden bytes", 30, wire),
    ];
    let mut failed = 0;
    for (n, name, limit_s, f) in criteria {
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        let limit = Duration::from_secs(limit_s);
        let (verdict, detail) = match result {
            Ok(d) if took <= limit => ("PASS", d),
            Ok(d) => ("FAIL", format!("over the time limit; {d}")),
            Err(e) => ("FAIL", e),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {verdict} {name} ({:.2} s, limit {limit_s} s): {detail}",
            took.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
