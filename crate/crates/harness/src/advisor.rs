//! Deployment advice from an end-to-end latency budget and scene size.

use serde::Serialize;
use thiserror::Error;

/// Below this budget only a direct link is fast enough.
pub const DIRECT_BELOW_MS: f64 = 5.0;
/// Upper bound (inclusive) of the dedicated-server band.
pub const DEDICATED_UP_TO_MS: f64 = 40.0;
/// Users visible in one scene that a single stateful server is expected to carry.
pub const SCENE_USERS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdviceError {
    #[error("inputs must be positive: latency {latency_ms} ms, {users} users")]
    NonPositiveInput { latency_ms: f64, users: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Direct,
    StatefulDedicated,
    StatelessHttp,
    HybridStatelessRpc,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Direct => "direct",
            Verdict::StatefulDedicated => "stateful-dedicated",
            Verdict::StatelessHttp => "stateless-http",
            Verdict::HybridStatelessRpc => "hybrid-stateless-rpc",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeploymentRecommendation {
    pub verdict: Verdict,
    pub rationale: String,
}

const SCENE_CAVEAT: &str = "The 100-user scene limit is a rough order of magnitude, not a fixed rule; measure the actual server before relying on it.";
const BUDGET_CAVEAT: &str = "The budget is end to end: network, server processing and client hardware all draw from it.";

/// Pure, total over positive inputs. Budgets of exactly 5 and 40 ms fall in
/// the dedicated band.
pub fn recommend(latency_budget_ms: f64, users_per_scene: u64) -> Result<DeploymentRecommendation, AdviceError> {
    if !(latency_budget_ms > 0.0 && latency_budget_ms.is_finite()) || users_per_scene == 0 {
        return Err(AdviceError::NonPositiveInput {
            latency_ms: latency_budget_ms,
            users: users_per_scene,
        });
    }
    let (verdict, why) = if latency_budget_ms < DIRECT_BELOW_MS {
        (
            Verdict::Direct,
            format!("{latency_budget_ms} ms is under {DIRECT_BELOW_MS} ms: connect the parties directly, with no server hop."),
        )
    } else if latency_budget_ms <= DEDICATED_UP_TO_MS && users_per_scene <= SCENE_USERS {
        (
            Verdict::StatefulDedicated,
            format!(
                "{latency_budget_ms} ms lies in [{DIRECT_BELOW_MS}, {DEDICATED_UP_TO_MS}] ms and {users_per_scene} users fit one scene server: use a stateful dedicated server with replication."
            ),
        )
    } else if latency_budget_ms <= DEDICATED_UP_TO_MS {
        (
            Verdict::HybridStatelessRpc,
            format!(
                "{latency_budget_ms} ms lies in [{DIRECT_BELOW_MS}, {DEDICATED_UP_TO_MS}] ms but {users_per_scene} users exceed one scene server: keep replication for the scene and move the rest to stateless RPC servers behind a balancer."
            ),
        )
    } else {
        (
            Verdict::StatelessHttp,
            format!("{latency_budget_ms} ms exceeds {DEDICATED_UP_TO_MS} ms: stateless HTTP servers with a shared store scale horizontally."),
        )
    };
    Ok(DeploymentRecommendation {
        verdict,
        rationale: format!("{why} {SCENE_CAVEAT} {BUDGET_CAVEAT}"),
    })
}
