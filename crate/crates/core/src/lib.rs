//! Core building blocks for synchronizing a simulated 3D world across
//! clients: contract parsing, the wire codec, a deterministic simulated
//! UDP network with an optional reliability layer, clock synchronization,
//! state replication, RPC, external state storage, load balancing and a
//! partitioned message broker.

pub mod schema;
pub mod wire;
pub mod hash;
pub mod transport;
pub mod clocksync;
pub mod replication;
pub mod rpc;
pub mod statestore;
pub mod cluster;
pub mod broker;
