//! Capacity sweeps: raise the offered call rate until the latency target
//! breaks, for a given topology and backend count.

use serde::Serialize;
use serde_json::json;

use crate::report::EventClass;
use crate::runner::run;
use crate::scenario::{Scenario, Topology};
use crate::HarnessError;

const SCHEMA: &str = "version 1
class Avatar id=1
  prop position id=1 kind=vec3 replicated
end
rpc Move id=1 params=(vec3) returns=none mode=unary
";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityConfig {
    pub topology: Topology,
    pub backends: usize,
    pub clients: usize,
    pub scenes: usize,
    pub processing_ms: f64,
    /// Read and write charge each, stateless only.
    pub store_ms: f64,
    pub one_way_latency_ms: f64,
    pub duration_ms: f64,
    /// A load is sustained when no call fails and the call p99 stays under this.
    pub slo_p99_ms: f64,
    /// Offered loads in calls per second, ascending.
    pub loads: Vec<f64>,
    pub seed: u64,
}

impl CapacityConfig {
    /// One scene, 5 ms of server time per call either way.
    pub fn reference(topology: Topology, backends: usize) -> Self {
        let (processing_ms, store_ms) = match topology {
            Topology::StatelessRpc => (4.0, 0.5),
            _ => (5.0, 0.0),
        };
        Self {
            topology,
            backends,
            clients: 60,
            scenes: 1,
            processing_ms,
            store_ms,
            one_way_latency_ms: 1.0,
            duration_ms: 2000.0,
            slo_p99_ms: 50.0,
            loads: (1..=16).map(|k| 50.0 * k as f64).collect(),
            seed: 1,
        }
    }

    pub fn scenario(&self, load_per_s: f64) -> Result<Scenario, HarnessError> {
        let every_ms = 1000.0 * self.clients as f64 / load_per_s;
        let mut v = json!({
            "name": format!("capacity-{:?}-{}x-{load_per_s}", self.topology, self.backends),
            "topology": self.topology,
            "seed": self.seed,
            "duration_ms": self.duration_ms,
            "drain_ms": 1000.0,
            "schema_inline": SCHEMA,
            "avatar_class": "Avatar",
            "clients": {
                "count": self.clients,
                "scenes": self.scenes,
                "behaviors": [
                    { "method": "Move", "property": "position", "every_ms": every_ms, "values": [[1, 0, 0], [2, 0, 0]] }
                ]
            },
            "servers": self.backends,
            "net": {
                "uplink": { "one_way_latency_ms": self.one_way_latency_ms },
                "downlink": { "one_way_latency_ms": self.one_way_latency_ms }
            },
            "server": { "processing_ms": self.processing_ms, "rpc_timeout_ms": 60000.0 }
        });
        if self.topology == Topology::StatelessRpc {
            v["store"] = json!({ "read_latency_ms": self.store_ms, "write_latency_ms": self.store_ms });
        }
        Scenario::from_json(&v.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LoadPoint {
    pub offered_per_s: f64,
    pub completed_per_s: f64,
    pub p99_ms: f64,
    pub failed: u64,
    pub sustained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityCurve {
    pub points: Vec<LoadPoint>,
    /// Highest offered load below which every point was sustained.
    pub capacity_per_s: f64,
}

pub fn measure(cfg: &CapacityConfig, load_per_s: f64) -> Result<LoadPoint, HarnessError> {
    let out = run(&cfg.scenario(load_per_s)?)?;
    let r = &out.report;
    let p99_ms = r.classes.get(&EventClass::Rpc).map_or(f64::INFINITY, |c| c.p99_ms);
    Ok(LoadPoint {
        offered_per_s: load_per_s,
        completed_per_s: r.throughput_per_s,
        p99_ms,
        failed: r.calls.failed,
        sustained: r.calls.failed == 0 && p99_ms <= cfg.slo_p99_ms,
    })
}

/// Stops at the first load that is not sustained.
pub fn sweep(cfg: &CapacityConfig) -> Result<CapacityCurve, HarnessError> {
    let mut points = Vec::new();
    let mut capacity_per_s = 0.0;
    for &load in &cfg.loads {
        let p = measure(cfg, load)?;
        points.push(p);
        if !p.sustained {
            break;
        }
        capacity_per_s = load;
    }
    Ok(CapacityCurve { points, capacity_per_s })
}
