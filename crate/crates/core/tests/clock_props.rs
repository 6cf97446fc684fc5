use proptest::prelude::*;

use worldsync_core::clocksync::{simulate_exchange, ExchangeSetup};
use worldsync_core::transport::NetConditions;

fn link(latency: f64, jitter: f64, loss: f64, seed: u64) -> NetConditions {
    NetConditions {
        one_way_latency_ms: latency,
        jitter_ms: jitter,
        loss_rate: loss,
        seed,
        ..NetConditions::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn error_within_half_selected_rtt(
        seed in any::<u64>(),
        up in 0.0f64..80.0,
        down in 0.0f64..80.0,
        jitter in 0.0f64..20.0,
        loss in 0.0f64..0.5,
        offset in -5_000.0f64..5_000.0,
        processing in 0.0f64..5.0,
    ) {
        let out = simulate_exchange(&ExchangeSetup {
            uplink: link(up, jitter, loss, seed),
            downlink: link(down, jitter, loss, seed ^ 0x5eed),
            true_offset_ms: offset,
            processing_ms: processing,
            pings: 40,
            interval_ms: 500.0,
        })
        .unwrap();
        if let (Some(est), Some(err)) = (out.estimate, out.error_ms()) {
            prop_assert!(est.rtt_ms >= 0.0);
            prop_assert!(err.abs() <= est.rtt_ms / 2.0 + 1e-9, "err {} rtt {}", err, est.rtt_ms);
            let min_rtt = out.samples.iter().map(|s| (s.t3 - s.t0) - (s.t2 - s.t1)).fold(f64::INFINITY, f64::min);
            prop_assert!((est.rtt_ms - min_rtt).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_jitter_symmetric_is_exact(
        latency_q in 0u32..200 * 1024,
        offset in -10_000i32..10_000,
        processing in 0u8..10,
        seed in any::<u64>(),
    ) {
        // 1/1024 ms steps keep every timestamp exactly representable.
        let c = link(latency_q as f64 / 1024.0, 0.0, 0.0, seed);
        let out = simulate_exchange(&ExchangeSetup {
            uplink: c,
            downlink: c,
            true_offset_ms: offset as f64,
            processing_ms: processing as f64,
            pings: 5,
            interval_ms: 500.0,
        })
        .unwrap();
        prop_assert_eq!(out.error_ms(), Some(0.0));
    }

    #[test]
    fn zero_jitter_symmetric_real_latency_within_rounding(
        latency in 0.0f64..200.0,
        offset in -10_000.0f64..10_000.0,
        processing in 0.0f64..10.0,
    ) {
        let c = link(latency, 0.0, 0.0, 1);
        let out = simulate_exchange(&ExchangeSetup {
            uplink: c,
            downlink: c,
            true_offset_ms: offset,
            processing_ms: processing,
            pings: 5,
            interval_ms: 500.0,
        })
        .unwrap();
        prop_assert!(out.error_ms().unwrap().abs() < 1e-9);
    }
}

#[test]
fn hundred_samples_jitter_5_offset_40() {
    let c = link(10.0, 5.0, 0.0, 99);
    let out = simulate_exchange(&ExchangeSetup {
        uplink: c,
        downlink: NetConditions { seed: 100, ..c },
        true_offset_ms: 40.0,
        processing_ms: 2.0,
        pings: 100,
        interval_ms: 500.0,
    })
    .unwrap();
    assert_eq!(out.samples.len(), 100);
    let max_rtt = out.samples.iter().map(|s| (s.t3 - s.t0) - (s.t2 - s.t1)).fold(0.0, f64::max);
    let est = out.estimate.unwrap();
    assert!((est.offset_ms - 40.0).abs() <= max_rtt / 2.0);
    assert!((est.offset_ms - 40.0).abs() <= est.rtt_ms / 2.0 + 1e-9);
}
