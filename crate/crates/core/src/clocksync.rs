//! Four-timestamp clock offset and round-trip estimation.
//!
//! The client stamps `t0` on the ping, the server stamps `t1` on receipt and
//! `t2` on reply, the client stamps `t3` when the pong arrives. Then
//!
//! ```text
//! offset = ((t1 - t0) + (t2 - t3)) / 2      (server clock minus client clock)
//! rtt    = (t3 - t0) - (t2 - t1)
//! ```
//!
//! The offset is exact when both one-way delays are equal and otherwise off
//! by half the asymmetry, which is bounded by `rtt / 2`. Among several
//! samples the lowest-rtt one therefore has the tightest bound.

use thiserror::Error;

use crate::transport::{Address, NetConditions, SimNetwork, TransportError};
use crate::wire::{Frame, MessageBody, WireError};

pub const DEFAULT_RESAMPLE_INTERVAL_MS: f64 = 500.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClockError {
    #[error("sample yields a negative round trip ({0} ms)")]
    NegativeRtt(f64),
    #[error("no samples")]
    EmptySampleSet,
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockSample {
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockEstimate {
    pub offset_ms: f64,
    pub rtt_ms: f64,
    pub sample_count: usize,
}

/// Negative rtt down to this size is f64 rounding on a zero-latency path, not a broken clock.
pub const RTT_ROUNDING_MS: f64 = 1e-9;

pub fn estimate_offset(s: &ClockSample) -> Result<ClockEstimate, ClockError> {
    let rtt = (s.t3 - s.t0) - (s.t2 - s.t1);
    if s.t3 < s.t0 || s.t2 < s.t1 || rtt < -RTT_ROUNDING_MS || rtt.is_nan() {
        return Err(ClockError::NegativeRtt(rtt));
    }
    Ok(ClockEstimate {
        offset_ms: ((s.t1 - s.t0) + (s.t2 - s.t3)) / 2.0,
        rtt_ms: rtt.max(0.0),
        sample_count: 1,
    })
}

/// Estimate from the minimum-rtt sample; ties keep the earliest.
pub fn best_estimate(samples: &[ClockSample]) -> Result<ClockEstimate, ClockError> {
    let mut best: Option<ClockEstimate> = None;
    for s in samples {
        let e = estimate_offset(s)?;
        if best.is_none_or(|b| e.rtt_ms < b.rtt_ms) {
            best = Some(e);
        }
    }
    let mut best = best.ok_or(ClockError::EmptySampleSet)?;
    best.sample_count = samples.len();
    Ok(best)
}

pub fn to_server_time(local_ms: f64, est: &ClockEstimate) -> f64 {
    local_ms + est.offset_ms
}

/// Per-session estimator. Pings every `interval_ms` and steps to a new
/// estimate as soon as a sample with lower rtt arrives.
#[derive(Debug, Clone)]
pub struct ClockSync {
    interval_ms: f64,
    last_ping: Option<f64>,
    samples: Vec<ClockSample>,
    best: Option<(ClockSample, ClockEstimate)>,
}

impl Default for ClockSync {
    fn default() -> Self {
        Self::new(DEFAULT_RESAMPLE_INTERVAL_MS)
    }
}

impl ClockSync {
    pub fn new(interval_ms: f64) -> Self {
        Self {
            interval_ms,
            last_ping: None,
            samples: Vec::new(),
            best: None,
        }
    }

    /// A ping body when one is due at `now_ms`.
    pub fn poll(&mut self, now_ms: f64) -> Option<MessageBody> {
        match self.last_ping {
            Some(t) if now_ms < t + self.interval_ms => None,
            _ => {
                self.last_ping = Some(now_ms);
                Some(MessageBody::ClockPing { t0: now_ms })
            }
        }
    }

    pub fn next_ping_at(&self) -> f64 {
        self.last_ping.map_or(0.0, |t| t + self.interval_ms)
    }

    /// Records a pong received at local time `t3`. Returns the estimate if
    /// this sample became the new best.
    pub fn on_pong(&mut self, t0: f64, t1: f64, t2: f64, t3: f64) -> Result<Option<ClockEstimate>, ClockError> {
        let sample = ClockSample { t0, t1, t2, t3 };
        let mut est = estimate_offset(&sample)?;
        self.samples.push(sample);
        est.sample_count = self.samples.len();
        let better = self.best.is_none_or(|(_, b)| est.rtt_ms < b.rtt_ms);
        if better {
            self.best = Some((sample, est));
            return Ok(Some(est));
        }
        if let Some((_, b)) = self.best.as_mut() {
            b.sample_count = self.samples.len();
        }
        Ok(None)
    }

    pub fn estimate(&self) -> Option<ClockEstimate> {
        self.best.map(|(_, e)| e)
    }

    pub fn selected_sample(&self) -> Option<ClockSample> {
        self.best.map(|(s, _)| s)
    }

    pub fn samples(&self) -> &[ClockSample] {
        &self.samples
    }
}

/// Server side of the exchange.
pub fn pong_for(t0: f64, received_ms: f64, reply_ms: f64) -> MessageBody {
    MessageBody::ClockPong {
        t0,
        t1: received_ms,
        t2: reply_ms,
    }
}

/// Setup for [`simulate_exchange`].
#[derive(Debug, Clone, Copy)]
pub struct ExchangeSetup {
    pub uplink: NetConditions,
    pub downlink: NetConditions,
    /// Server clock minus client clock.
    pub true_offset_ms: f64,
    pub processing_ms: f64,
    pub pings: usize,
    pub interval_ms: f64,
}

#[derive(Debug, Clone)]
pub struct ExchangeOutcome {
    pub estimate: Option<ClockEstimate>,
    pub selected: Option<ClockSample>,
    pub samples: Vec<ClockSample>,
    pub true_offset_ms: f64,
}

impl ExchangeOutcome {
    pub fn error_ms(&self) -> Option<f64> {
        self.estimate.map(|e| e.offset_ms - self.true_offset_ms)
    }
}

/// Runs ping/pong over the unreliable channel of a simulated link. The
/// client clock is the virtual clock; the server clock is shifted by
/// `true_offset_ms`. Lost pings simply yield no sample.
pub fn simulate_exchange(setup: &ExchangeSetup) -> Result<ExchangeOutcome, ClockError> {
    const CLIENT: Address = Address::new(1, 40_000);
    const SERVER: Address = Address::new(2, 7777);
    let mut net = SimNetwork::new(setup.uplink)?;
    net.register(CLIENT)?;
    net.register(SERVER)?;
    net.set_link(CLIENT, SERVER, setup.uplink)?;
    net.set_link(SERVER, CLIENT, setup.downlink)?;

    let mut sync = ClockSync::new(setup.interval_ms);
    // replies waiting for their processing delay: (send time, body)
    let mut replies: Vec<(f64, MessageBody)> = Vec::new();
    let mut sent = 0usize;
    let mut seq = 0u32;
    let mut frame = |body: &MessageBody| -> Result<Frame, ClockError> {
        seq += 1;
        Ok(Frame {
            sequence: seq,
            channel: crate::transport::UNRELIABLE_CHANNEL,
            payload: body.encode()?,
            ..Frame::default()
        })
    };

    loop {
        let mut next = f64::INFINITY;
        if sent < setup.pings {
            next = next.min(sync.next_ping_at());
        }
        if let Some(t) = net.next_arrival_ms() {
            next = next.min(t);
        }
        if let Some(t) = replies.iter().map(|(t, _)| *t).min_by(f64::total_cmp) {
            next = next.min(t);
        }
        if !next.is_finite() {
            break;
        }
        for d in net.tick(next) {
            match MessageBody::decode(&d.frame.payload)? {
                MessageBody::ClockPing { t0 } if d.to == SERVER => {
                    let server_now = d.at_ms + setup.true_offset_ms;
                    replies.push((
                        d.at_ms + setup.processing_ms,
                        pong_for(t0, server_now, server_now + setup.processing_ms),
                    ));
                }
                MessageBody::ClockPong { t0, t1, t2 } if d.to == CLIENT => {
                    sync.on_pong(t0, t1, t2, d.at_ms)?;
                }
                _ => {}
            }
        }
        let now = net.now_ms();
        let (due, later): (Vec<_>, Vec<_>) = replies.into_iter().partition(|(t, _)| *t <= now);
        replies = later;
        for (_, body) in due {
            let f = frame(&body)?;
            net.send(SERVER, CLIENT, f)?;
        }
        if sent < setup.pings {
            if let Some(ping) = sync.poll(now) {
                let f = frame(&ping)?;
                net.send(CLIENT, SERVER, f)?;
                sent += 1;
            }
        }
    }

    Ok(ExchangeOutcome {
        estimate: sync.estimate(),
        selected: sync.selected_sample(),
        samples: sync.samples().to_vec(),
        true_offset_ms: setup.true_offset_ms,
    })
}
