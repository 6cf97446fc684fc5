//! Frame deadlines derived from a target frame rate.

use serde::Serialize;
use thiserror::Error;

/// Lowest rate still perceived as continuous motion.
pub const REALTIME_FPS: f64 = 24.0;
/// Reference rate for comfortable head-mounted display.
pub const VR_COMFORT_FPS: f64 = 90.0;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("frame rate must be a positive finite number, got {0}")]
pub struct NonPositiveFps(pub f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameClass {
    BelowRealtime,
    Realtime,
    VrComfort,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameBudget {
    pub fps: f64,
    /// Full precision; use [`FrameBudget::display_ms`] for presentation.
    pub period_ms: f64,
    pub class: FrameClass,
}

impl FrameBudget {
    /// Period rounded to 0.1 ms.
    pub fn display_ms(&self) -> f64 {
        (self.period_ms * 10.0).round() / 10.0
    }
}

impl std::fmt::Display for FrameBudget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.1} ms", self.display_ms())
    }
}

pub fn frame_deadline(fps: f64) -> Result<FrameBudget, NonPositiveFps> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(NonPositiveFps(fps));
    }
    let class = if fps >= VR_COMFORT_FPS {
        FrameClass::VrComfort
    } else if fps >= REALTIME_FPS {
        FrameClass::Realtime
    } else {
        FrameClass::BelowRealtime
    };
    Ok(FrameBudget {
        fps,
        period_ms: 1000.0 / fps,
        class,
    })
}
