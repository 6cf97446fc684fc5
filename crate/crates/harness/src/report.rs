//! Latency reports and their JSON form.

use std::collections::BTreeMap;

use serde::Serialize;

use worldsync_core::transport::NetStats;

use crate::budget::{frame_deadline, FrameClass};
use crate::scenario::Topology;
use crate::stats::percentile_sorted;

pub const REPORT_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventClass {
    /// Call issued until the client holds the response.
    Rpc,
    /// Call issued until the authority committed it.
    Apply,
    /// Commit until a replica reflects it.
    Replication,
    /// Sensor publish until the authority committed it.
    Ingest,
}

impl EventClass {
    pub fn name(self) -> &'static str {
        match self {
            EventClass::Rpc => "rpc",
            EventClass::Apply => "apply",
            EventClass::Replication => "replication",
            EventClass::Ingest => "ingest",
        }
    }
}

/// One measured event with its time split by tier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventSample {
    pub class: EventClass,
    pub start_ms: f64,
    pub end_ms: f64,
    pub network_ms: f64,
    pub store_ms: f64,
    /// Service time plus any queueing in front of it.
    pub processing_ms: f64,
}

impl EventSample {
    pub fn latency_ms(&self) -> f64 {
        self.end_ms - self.start_ms
    }

    pub fn tier_sum_ms(&self) -> f64 {
        self.network_ms + self.store_ms + self.processing_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Meta {
    pub format: u32,
    pub version: &'static str,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Tiers {
    pub network_ms: f64,
    pub store_ms: f64,
    pub processing_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassStats {
    pub count: usize,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    pub mean_ms: f64,
    /// Mean time per event spent in each tier.
    pub mean_tiers: Tiers,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameVerdict {
    pub fps: f64,
    pub period_ms: f64,
    pub frame_class: FrameClass,
    pub event_class: EventClass,
    /// p99 of the event class fits within one frame.
    pub p99_within: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CallStats {
    pub issued: u64,
    pub completed: u64,
    pub failed: u64,
    pub retries: u64,
    pub late_responses: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StoreSummary {
    pub reads: u64,
    pub writes: u64,
    pub conflicts: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BrokerSummary {
    pub published: u64,
    pub delivered: u64,
    pub delivered_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub meta: Meta,
    pub scenario: String,
    pub scenario_sha256: String,
    pub topology: Topology,
    pub duration_ms: f64,
    /// Virtual time at which the run stopped.
    pub end_ms: f64,
    pub classes: BTreeMap<EventClass, ClassStats>,
    /// Completed calls (or ingested messages) per second of `duration_ms`.
    pub throughput_per_s: f64,
    pub calls: CallStats,
    pub disruptions: u64,
    pub transport_give_ups: u64,
    pub network: NetStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub store: Option<StoreSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub broker: Option<BrokerSummary>,
    pub frame_budgets: Vec<FrameVerdict>,
    /// Hex SHA-256 over the final authoritative objects.
    pub final_state_sha256: String,
}

impl LatencyReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Reference rates the verdicts are computed for.
pub const VERDICT_FPS: [f64; 3] = [24.0, 90.0, 144.0];

pub fn class_stats(samples: &[EventSample]) -> BTreeMap<EventClass, ClassStats> {
    let mut by_class: BTreeMap<EventClass, Vec<&EventSample>> = BTreeMap::new();
    for s in samples {
        by_class.entry(s.class).or_default().push(s);
    }
    by_class
        .into_iter()
        .map(|(class, evs)| {
            let mut lat: Vec<f64> = evs.iter().map(|e| e.latency_ms()).collect();
            lat.sort_by(f64::total_cmp);
            let n = evs.len() as f64;
            let p = |q| percentile_sorted(&lat, q).expect("non-empty");
            let stats = ClassStats {
                count: evs.len(),
                p50_ms: p(50.0),
                p90_ms: p(90.0),
                p99_ms: p(99.0),
                max_ms: *lat.last().expect("non-empty"),
                mean_ms: lat.iter().sum::<f64>() / n,
                mean_tiers: Tiers {
                    network_ms: evs.iter().map(|e| e.network_ms).sum::<f64>() / n,
                    store_ms: evs.iter().map(|e| e.store_ms).sum::<f64>() / n,
                    processing_ms: evs.iter().map(|e| e.processing_ms).sum::<f64>() / n,
                },
            };
            (class, stats)
        })
        .collect()
}

pub fn frame_verdicts(classes: &BTreeMap<EventClass, ClassStats>) -> Vec<FrameVerdict> {
    let mut out = Vec::new();
    for (class, stats) in classes {
        for fps in VERDICT_FPS {
            let b = frame_deadline(fps).expect("positive");
            out.push(FrameVerdict {
                fps,
                period_ms: b.display_ms(),
                frame_class: b.class,
                event_class: *class,
                p99_within: stats.p99_ms <= b.period_ms,
            });
        }
    }
    out
}
