//! Scenario runner, measurements, deployment advisor and frame budgets on
//! top of `worldsync-core`.

pub mod advisor;
pub mod budget;
pub mod capacity;
pub mod equivalence;
pub mod reliability;
pub mod report;
pub mod runner;
pub mod scenario;
pub mod stats;

use thiserror::Error;

use worldsync_core::broker::BrokerError;
use worldsync_core::cluster::ClusterError;
use worldsync_core::replication::ReplicationError;
use worldsync_core::rpc::RpcError;
use worldsync_core::schema::SchemaError;
use worldsync_core::statestore::StoreError;
use worldsync_core::transport::TransportError;
use worldsync_core::wire::WireError;

pub use report::LatencyReport;
pub use runner::{run_scenario, RunOutcome};
pub use scenario::Scenario;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("schema: {0}")]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Replication(#[from] ReplicationError),
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Store(#[from] StoreError),
}
