use proptest::collection::vec;
use proptest::prelude::*;

use worldsync_core::wire::{
    decode_frame, decode_value, encode_frame, encode_value, fragment, fragment_capacity, reassemble, Frame,
    FrameFlags, MessageBody, ObjectChange, ObjectRecord, PropertyValue, RpcRequest, RpcResponse, RpcStatus,
    RpcTarget, WorldUpdate, HEADER_LEN,
};

fn value() -> impl Strategy<Value = PropertyValue> {
    prop_oneof![
        Just(PropertyValue::Null),
        any::<bool>().prop_map(PropertyValue::Bool),
        any::<i64>().prop_map(PropertyValue::Int64),
        any::<f64>().prop_map(PropertyValue::Float64),
        ".{0,24}".prop_map(PropertyValue::Text),
        any::<[f64; 3]>().prop_map(PropertyValue::Vec3),
        vec(any::<u8>(), 0..48).prop_map(PropertyValue::Bytes),
    ]
}

fn frame() -> impl Strategy<Value = Frame> {
    (any::<u8>(), any::<u8>(), any::<u32>(), any::<u32>(), any::<u32>(), vec(any::<u8>(), 0..256)).prop_map(
        |(flags, channel, sequence, ack, ack_bits, payload)| Frame {
            flags: FrameFlags::from_bits_retain(flags),
            channel,
            sequence,
            ack,
            ack_bits,
            payload,
        },
    )
}

fn change() -> impl Strategy<Value = ObjectChange> {
    prop_oneof![
        (any::<u32>(), any::<u16>(), vec((any::<u16>(), value()), 0..5)).prop_map(|(object_id, class_id, properties)| {
            ObjectChange::Update { object_id, class_id, properties }
        }),
        (any::<u32>(), any::<u16>()).prop_map(|(object_id, class_id)| ObjectChange::Destroy { object_id, class_id }),
    ]
}

fn update() -> impl Strategy<Value = WorldUpdate> {
    (any::<u64>(), vec(change(), 0..6)).prop_map(|(tick, objects)| WorldUpdate { tick, objects })
}

fn target() -> impl Strategy<Value = RpcTarget> {
    prop_oneof![Just(RpcTarget::Server), any::<u32>().prop_map(RpcTarget::Client), Just(RpcTarget::Multicast)]
}

fn status() -> impl Strategy<Value = RpcStatus> {
    prop_oneof![Just(RpcStatus::Ok), any::<u16>().prop_map(RpcStatus::AppError), Just(RpcStatus::Unroutable)]
}

fn body() -> impl Strategy<Value = MessageBody> {
    prop_oneof![
        update().prop_map(MessageBody::ReplicationDelta),
        update().prop_map(MessageBody::Snapshot),
        (any::<u64>(), any::<u16>(), target(), any::<bool>(), vec(value(), 0..5)).prop_map(
            |(call_id, method_id, target, reliable, args)| MessageBody::RpcRequest(RpcRequest {
                call_id,
                method_id,
                target,
                reliable,
                args
            })
        ),
        (any::<u64>(), status(), proptest::option::of(value()))
            .prop_map(|(call_id, status, value)| MessageBody::RpcResponse(RpcResponse { call_id, status, value })),
        any::<f64>().prop_map(|t0| MessageBody::ClockPing { t0 }),
        any::<[f64; 3]>().prop_map(|[t0, t1, t2]| MessageBody::ClockPong { t0, t1, t2 }),
        (any::<u32>(), any::<u32>()).prop_map(|(client_id, schema_version)| MessageBody::Join {
            client_id,
            schema_version
        }),
        (any::<u32>(), any::<bool>()).prop_map(|(client_id, accepted)| MessageBody::JoinAck { client_id, accepted }),
        (any::<u64>(), any::<u32>(), value()).prop_map(|(stream_id, seq, value)| MessageBody::StreamData {
            stream_id,
            seq,
            value
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn value_round_trip(v in value()) {
        let bytes = encode_value(&v).unwrap();
        prop_assert_eq!(decode_value(&bytes).unwrap(), (v, bytes.len()));
    }

    #[test]
    fn frame_round_trip(f in frame()) {
        let bytes = encode_frame(&f).unwrap();
        prop_assert_eq!(bytes.len(), HEADER_LEN + f.payload.len());
        prop_assert_eq!(decode_frame(&bytes).unwrap(), f);
    }

    #[test]
    fn body_round_trip(b in body()) {
        let bytes = b.encode().unwrap();
        prop_assert_eq!(bytes[0], b.body_type());
        prop_assert_eq!(MessageBody::decode(&bytes).unwrap(), b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn record_round_trip(
        object_id in any::<u32>(),
        class_id in any::<u16>(),
        owner in proptest::option::of(any::<u32>()),
        properties in vec((any::<u16>(), value()), 0..8),
    ) {
        let r = ObjectRecord { object_id, class_id, owner, properties };
        prop_assert_eq!(ObjectRecord::decode(&r.encode().unwrap()).unwrap(), r);
    }

    #[test]
    fn truncation_never_panics(b in body(), cut in any::<prop::sample::Index>()) {
        let bytes = b.encode().unwrap();
        let n = cut.index(bytes.len());
        // a response cut right before its optional value is itself valid
        match MessageBody::decode(&bytes[..n]) {
            Ok(d) => prop_assert_ne!(d, b),
            Err(_) => {}
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1_500))]

    #[test]
    fn reassemble_inverts_fragment(
        len in 0usize..=65_536,
        mtu in 20usize..=1500,
        seed in any::<u64>(),
        base in any::<u32>(),
    ) {
        let payload: Vec<u8> = (0..len).map(|i| (i as u64).wrapping_mul(seed | 1).to_le_bytes()[0]).collect();
        let frags = fragment(&payload, mtu).unwrap();
        let cap = fragment_capacity(mtu).unwrap();
        prop_assert_eq!(frags.len(), len.div_ceil(cap).max(1));
        prop_assert!(frags.iter().all(|f| f.data.len() <= cap && f.data.len() + HEADER_LEN <= mtu));
        let frames: Vec<Frame> = frags
            .into_iter()
            .enumerate()
            .map(|(i, f)| f.into_frame(0, base.wrapping_add(i as u32)))
            .collect();
        // deliver in a seed-dependent rotation, with the first frame duplicated
        let k = (seed as usize) % frames.len();
        let mut shuffled: Vec<&Frame> = frames[k..].iter().chain(frames[..k].iter()).collect();
        shuffled.push(&frames[0]);
        prop_assert_eq!(reassemble(base, shuffled).unwrap(), Some(payload));
    }
}

#[test]
fn documented_fragment_example() {
    let frags = fragment(&[0u8; 3000], 1200).unwrap();
    let sizes: Vec<_> = frags.iter().map(|f| f.data.len()).collect();
    assert_eq!(sizes, vec![1181, 1181, 638]);
    assert!(frags[2].flags.contains(FrameFlags::LAST_FRAGMENT));
    assert_eq!(fragment(&[0u8; 100], 1200).unwrap().len(), 1);
    assert!(fragment(&[1], 19).is_err());
}
