use std::path::Path;

use worldsync_core::wire::{
    decode_frame, decode_value, encode_frame, encode_value, Frame, FrameFlags, MessageBody, ObjectChange,
    PropertyValue, RpcRequest, RpcResponse, RpcStatus, RpcTarget, WorldUpdate,
};

fn fixture(name: &str) -> Vec<u8> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let digits: String = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.chars().filter(|c| !c.is_whitespace()))
        .collect();
    hex::decode(digits).unwrap()
}

fn check_body(name: &str, expected: MessageBody) {
    let bytes = fixture(name);
    assert_eq!(MessageBody::decode(&bytes).unwrap(), expected, "{name}");
    assert_eq!(expected.encode().unwrap(), bytes, "{name}");
}

#[test]
fn clock_ping_frame_is_28_bytes() {
    let bytes = fixture("clock_ping_frame.hex");
    assert_eq!(bytes.len(), 28);
    let frame = Frame {
        sequence: 1,
        payload: MessageBody::ClockPing { t0: 1000.0 }.encode().unwrap(),
        ..Frame::default()
    };
    assert_eq!(decode_frame(&bytes).unwrap(), frame);
    assert_eq!(encode_frame(&frame).unwrap(), bytes);
    assert_eq!(
        MessageBody::decode(&frame.payload).unwrap(),
        MessageBody::ClockPing { t0: 1000.0 }
    );
}

#[test]
fn int64_value() {
    let bytes = fixture("value_int64_256.hex");
    assert_eq!(decode_value(&bytes).unwrap(), (PropertyValue::Int64(256), 9));
    assert_eq!(encode_value(&PropertyValue::Int64(256)).unwrap(), bytes);
}

#[test]
fn replication_bodies() {
    check_body(
        "delta_luigi.hex",
        MessageBody::ReplicationDelta(WorldUpdate {
            tick: 7,
            objects: vec![ObjectChange::Update {
                object_id: 2,
                class_id: 1,
                properties: vec![(1, PropertyValue::Text("Luigi".into()))],
            }],
        }),
    );
    check_body(
        "snapshot_destroy.hex",
        MessageBody::Snapshot(WorldUpdate {
            tick: 3,
            objects: vec![
                ObjectChange::Destroy { object_id: 9, class_id: 2 },
                ObjectChange::Update {
                    object_id: 4,
                    class_id: 1,
                    properties: vec![(2, PropertyValue::Vec3([1.5, 0.0, -2.0]))],
                },
            ],
        }),
    );
}

#[test]
fn rpc_bodies() {
    check_body(
        "rpc_request_set_appearance.hex",
        MessageBody::RpcRequest(RpcRequest {
            call_id: 1,
            method_id: 10,
            target: RpcTarget::Server,
            reliable: true,
            args: vec![PropertyValue::Text("Luigi".into())],
        }),
    );
    check_body(
        "rpc_request_client_target.hex",
        MessageBody::RpcRequest(RpcRequest {
            call_id: 258,
            method_id: 13,
            target: RpcTarget::Client(5),
            reliable: false,
            args: vec![],
        }),
    );
    check_body(
        "rpc_response_ok_int.hex",
        MessageBody::RpcResponse(RpcResponse {
            call_id: 2,
            status: RpcStatus::Ok,
            value: Some(PropertyValue::Int64(42)),
        }),
    );
    check_body(
        "rpc_response_app_error.hex",
        MessageBody::RpcResponse(RpcResponse {
            call_id: 3,
            status: RpcStatus::AppError(1),
            value: None,
        }),
    );
}

#[test]
fn session_bodies() {
    check_body("clock_pong.hex", MessageBody::ClockPong { t0: 100.0, t1: 150.0, t2: 152.0 });
    check_body("join.hex", MessageBody::Join { client_id: 7, schema_version: 1 });
    check_body("join_ack.hex", MessageBody::JoinAck { client_id: 7, accepted: true });
}

#[test]
fn stream_data_in_reliable_frame() {
    let bytes = fixture("stream_data_frame.hex");
    let frame = decode_frame(&bytes).unwrap();
    assert_eq!(frame.flags, FrameFlags::RELIABLE | FrameFlags::ACK_PRESENT);
    assert_eq!((frame.sequence, frame.ack, frame.ack_bits), (5, 3, 0b11));
    assert_eq!(
        MessageBody::decode(&frame.payload).unwrap(),
        MessageBody::StreamData {
            stream_id: 9,
            seq: 0,
            value: PropertyValue::Vec3([1.0, 2.0, 3.0]),
        }
    );
    assert_eq!(encode_frame(&frame).unwrap(), bytes);
}
