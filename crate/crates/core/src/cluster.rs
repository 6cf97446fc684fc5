//! Load balancing over a pool of server instances: strict round-robin for
//! stateless requests and (address, port) flow affinity for UDP traffic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::fnv1a64;
use crate::transport::Address;

pub type BackendId = u32;
pub type SceneId = u32;

/// Default idle time after which a flow's affinity is forgotten.
pub const DEFAULT_IDLE_EXPIRY_MS: f64 = 30_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("no backend available")]
    NoBackendAvailable,
    #[error("unknown backend {0}")]
    UnknownBackend(BackendId),
    #[error("backend {0} listed twice")]
    DuplicateBackend(BackendId),
}

/// What a UDP load balancer can see of a flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub src: Address,
    pub dst: Address,
}

impl FlowKey {
    pub fn new(src: Address, dst: Address) -> Self {
        Self { src, dst }
    }

    /// src node, src port, dst node, dst port; big-endian.
    pub fn to_bytes(self) -> [u8; 12] {
        let mut out = [0u8; 12];
        out[..6].copy_from_slice(&self.src.to_bytes());
        out[6..].copy_from_slice(&self.dst.to_bytes());
        out
    }

    pub fn hash(self) -> u64 {
        fnv1a64(&self.to_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    RoundRobin,
    FlowHash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Health {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Affinity {
    backend: BackendId,
    last_seen_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BackendPool {
    backends: Vec<BackendId>,
    health: BTreeMap<BackendId, Health>,
    policy: Policy,
    cursor: usize,
    affinity: BTreeMap<FlowKey, Affinity>,
    idle_expiry_ms: Option<f64>,
    routed: BTreeMap<BackendId, u64>,
}

impl BackendPool {
    pub fn new(backends: Vec<BackendId>, policy: Policy) -> Result<Self, ClusterError> {
        let mut health = BTreeMap::new();
        for b in &backends {
            if health.insert(*b, Health::Up).is_some() {
                return Err(ClusterError::DuplicateBackend(*b));
            }
        }
        Ok(Self {
            routed: backends.iter().map(|b| (*b, 0)).collect(),
            backends,
            health,
            policy,
            cursor: 0,
            affinity: BTreeMap::new(),
            idle_expiry_ms: Some(DEFAULT_IDLE_EXPIRY_MS),
        })
    }

    /// `None` keeps affinity entries for the whole run.
    pub fn with_idle_expiry(mut self, expiry_ms: Option<f64>) -> Self {
        self.idle_expiry_ms = expiry_ms;
        self
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn backends(&self) -> &[BackendId] {
        &self.backends
    }

    pub fn health(&self, b: BackendId) -> Option<Health> {
        self.health.get(&b).copied()
    }

    pub fn up_backends(&self) -> Vec<BackendId> {
        self.backends
            .iter()
            .copied()
            .filter(|b| self.health[b] == Health::Up)
            .collect()
    }

    /// Requests or frames routed to each backend so far.
    pub fn routed_counts(&self) -> &BTreeMap<BackendId, u64> {
        &self.routed
    }

    pub fn affinity_of(&self, flow: &FlowKey) -> Option<BackendId> {
        self.affinity.get(flow).map(|a| a.backend)
    }

    pub fn affinity_len(&self) -> usize {
        self.affinity.len()
    }

    fn count(&mut self, b: BackendId) -> BackendId {
        *self.routed.entry(b).or_default() += 1;
        b
    }

    /// Next Up backend in strict rotation.
    pub fn route_request(&mut self) -> Result<BackendId, ClusterError> {
        let n = self.backends.len();
        for step in 0..n {
            let idx = (self.cursor + step) % n;
            let b = self.backends[idx];
            if self.health[&b] == Health::Up {
                self.cursor = (idx + 1) % n;
                return Ok(self.count(b));
            }
        }
        Err(ClusterError::NoBackendAvailable)
    }

    /// Routes one frame of `flow`: an existing live affinity wins, otherwise
    /// the flow hash picks among Up backends and the choice is remembered.
    pub fn route_flow(&mut self, flow: FlowKey, now_ms: f64) -> Result<BackendId, ClusterError> {
        if let Some(a) = self.affinity.get_mut(&flow) {
            let expired = self
                .idle_expiry_ms
                .is_some_and(|e| now_ms - a.last_seen_ms > e);
            if !expired && self.health[&a.backend] == Health::Up {
                a.last_seen_ms = now_ms;
                let b = a.backend;
                return Ok(self.count(b));
            }
        }
        let up = self.up_backends();
        if up.is_empty() {
            return Err(ClusterError::NoBackendAvailable);
        }
        let b = up[(flow.hash() % up.len() as u64) as usize];
        self.affinity.insert(
            flow,
            Affinity {
                backend: b,
                last_seen_ms: now_ms,
            },
        );
        Ok(self.count(b))
    }

    /// Routes according to the pool policy. Round-robin ignores the flow.
    pub fn route(&mut self, flow: FlowKey, now_ms: f64) -> Result<BackendId, ClusterError> {
        match self.policy {
            Policy::RoundRobin => self.route_request(),
            Policy::FlowHash => self.route_flow(flow, now_ms),
        }
    }

    /// Marks a backend dead and forgets every flow pinned to it. Returns the
    /// number of affinity entries purged.
    pub fn mark_down(&mut self, b: BackendId) -> Result<usize, ClusterError> {
        *self.health.get_mut(&b).ok_or(ClusterError::UnknownBackend(b))? = Health::Down;
        let before = self.affinity.len();
        self.affinity.retain(|_, a| a.backend != b);
        Ok(before - self.affinity.len())
    }

    pub fn mark_up(&mut self, b: BackendId) -> Result<(), ClusterError> {
        *self.health.get_mut(&b).ok_or(ClusterError::UnknownBackend(b))? = Health::Up;
        Ok(())
    }

    /// Drops affinity entries idle for longer than the expiry.
    pub fn expire(&mut self, now_ms: f64) -> usize {
        let Some(e) = self.idle_expiry_ms else {
            return 0;
        };
        let before = self.affinity.len();
        self.affinity.retain(|_, a| now_ms - a.last_seen_ms <= e);
        before - self.affinity.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IpChange {
    pub old_flow: FlowKey,
    pub new_flow: FlowKey,
    pub before: Option<BackendId>,
    pub after: BackendId,
}

impl IpChange {
    pub fn switched(&self) -> bool {
        self.before != Some(self.after)
    }
}

/// A client's source address changes mid-flow: the old flow is abandoned
/// and the next frame is routed as a brand-new flow.
pub fn dynamic_ip_change(
    pool: &mut BackendPool,
    old_flow: FlowKey,
    new_src: Address,
    now_ms: f64,
) -> Result<IpChange, ClusterError> {
    let before = pool.affinity.remove(&old_flow).map(|a| a.backend);
    let new_flow = FlowKey::new(new_src, old_flow.dst);
    let after = pool.route_flow(new_flow, now_ms)?;
    Ok(IpChange {
        old_flow,
        new_flow,
        before,
        after,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub backend: BackendId,
    /// The scene was previously hosted elsewhere; its in-memory state is gone.
    pub moved: bool,
}

/// Keeps every client of a scene on the same backend, as replication
/// requires shared in-memory state.
#[derive(Debug, Clone, Default)]
pub struct ScenePinning {
    pins: BTreeMap<SceneId, BackendId>,
}

impl ScenePinning {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pinned(&self, scene: SceneId) -> Option<BackendId> {
        self.pins.get(&scene).copied()
    }

    pub fn route(&mut self, scene: SceneId, pool: &mut BackendPool) -> Result<Placement, ClusterError> {
        let previous = self.pins.get(&scene).copied();
        if let Some(b) = previous {
            if pool.health(b) == Some(Health::Up) {
                return Ok(Placement { backend: pool.count(b), moved: false });
            }
        }
        let b = pool.route_request()?;
        self.pins.insert(scene, b);
        Ok(Placement {
            backend: b,
            moved: previous.is_some(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(node: u32, port: u16) -> FlowKey {
        FlowKey::new(Address::new(node, port), Address::new(100, 7777))
    }

    #[test]
    fn round_robin_rotation() {
        let mut p = BackendPool::new(vec![1, 2, 3], Policy::RoundRobin).unwrap();
        let seq: Vec<_> = (0..6).map(|_| p.route_request().unwrap()).collect();
        assert_eq!(seq, vec![1, 2, 3, 1, 2, 3]);
    }

    #[test]
    fn round_robin_skips_down() {
        let mut p = BackendPool::new(vec![1, 2, 3], Policy::RoundRobin).unwrap();
        p.mark_down(2).unwrap();
        let seq: Vec<_> = (0..4).map(|_| p.route_request().unwrap()).collect();
        assert_eq!(seq, vec![1, 3, 1, 3]);
        p.mark_down(1).unwrap();
        p.mark_down(3).unwrap();
        assert_eq!(p.route_request(), Err(ClusterError::NoBackendAvailable));
        assert_eq!(p.route_flow(flow(1, 1), 0.0), Err(ClusterError::NoBackendAvailable));
    }

    #[test]
    fn flow_hash_matches_fnv_oracle() {
        let mut p = BackendPool::new(vec![10, 20, 30, 40], Policy::FlowHash).unwrap();
        let f = flow(5, 4242);
        // oracle: FNV-1a 64 written out over the 12 canonical bytes
        let mut h: u64 = 0xcbf29ce484222325;
        for b in [0, 0, 0, 5, 0x10, 0x92, 0, 0, 0, 100, 0x1e, 0x61] {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        assert_eq!(f.hash(), h);
        let expected = [10, 20, 30, 40][(h % 4) as usize];
        assert_eq!(p.route(f, 0.0).unwrap(), expected);
        assert_eq!(p.route(f, 1.0).unwrap(), expected);
    }

    #[test]
    fn nat_collision_is_indistinguishable() {
        let mut p = BackendPool::new(vec![1, 2, 3, 4], Policy::FlowHash).unwrap();
        let alice = flow(9, 5000);
        let bob = flow(9, 5000);
        assert_eq!(p.route(alice, 0.0).unwrap(), p.route(bob, 0.0).unwrap());
        assert_eq!(p.affinity_len(), 1);
    }

    #[test]
    fn mark_down_purges_and_reroutes() {
        let mut p = BackendPool::new(vec![1, 2], Policy::FlowHash).unwrap();
        let flows: Vec<_> = (0..20).map(|i| flow(i, 1000)).collect();
        let first: Vec<_> = flows.iter().map(|f| p.route(*f, 0.0).unwrap()).collect();
        let on_one = first.iter().filter(|b| **b == 1).count();
        assert_eq!(p.mark_down(1).unwrap(), on_one);
        for f in &flows {
            assert_eq!(p.route(*f, 1.0).unwrap(), 2);
        }
    }

    #[test]
    fn idle_expiry() {
        let mut p = BackendPool::new(vec![1, 2], Policy::FlowHash).unwrap();
        p.route(flow(1, 1), 0.0).unwrap();
        assert_eq!(p.expire(30_000.0), 0);
        assert_eq!(p.expire(30_000.1), 1);
        let mut q = BackendPool::new(vec![1, 2], Policy::FlowHash)
            .unwrap()
            .with_idle_expiry(None);
        q.route(flow(1, 1), 0.0).unwrap();
        assert_eq!(q.expire(1e12), 0);
    }

    #[test]
    fn ip_change_switches_only_when_bucket_differs() {
        let mut p = BackendPool::new(vec![1, 2, 3, 4], Policy::FlowHash).unwrap();
        let old = flow(7, 3000);
        let before = p.route(old, 0.0).unwrap();
        let bucket = |f: FlowKey| [1, 2, 3, 4][(f.hash() % 4) as usize];
        let other = (1..u16::MAX)
            .map(|port| Address::new(8, port))
            .find(|a| bucket(FlowKey::new(*a, old.dst)) != before)
            .unwrap();
        let change = dynamic_ip_change(&mut p, old, other, 1.0).unwrap();
        assert!(change.switched());
        let same = (1..u16::MAX)
            .map(|port| Address::new(8, port))
            .find(|a| bucket(FlowKey::new(*a, old.dst)) == change.after)
            .unwrap();
        let again = dynamic_ip_change(&mut p, change.new_flow, same, 2.0).unwrap();
        assert!(!again.switched());
    }

    #[test]
    fn scene_pinning() {
        let mut p = BackendPool::new(vec![1, 2, 3], Policy::RoundRobin).unwrap();
        let mut s = ScenePinning::new();
        let a = s.route(7, &mut p).unwrap();
        for _ in 0..10 {
            assert_eq!(s.route(7, &mut p).unwrap(), Placement { backend: a.backend, moved: false });
        }
        p.mark_down(a.backend).unwrap();
        let moved = s.route(7, &mut p).unwrap();
        assert!(moved.moved);
        assert_ne!(moved.backend, a.backend);
    }

    #[test]
    fn duplicate_backends_rejected() {
        assert_eq!(
            BackendPool::new(vec![1, 1], Policy::RoundRobin).unwrap_err(),
            ClusterError::DuplicateBackend(1)
        );
    }
}
