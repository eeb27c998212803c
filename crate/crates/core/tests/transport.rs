mod common;

use mpsl_core::protocol::{run_mpsl_sequential, run_mpsl_tcp, run_mpsl_threaded, RunOptions};
use mpsl_core::transport::{
    channel_pair, decode_frame, split_stream, tcp_listen, Direction, Endpoint, Frame, Message, MsgType, TcpEndpoint,
    HEADER_LEN,
};
use mpsl_core::Error;
use mpsl_tensor::{DType, Tensor};
use proptest::prelude::*;
use std::time::Duration;

fn tensor() -> impl Strategy<Value = Tensor> {
    (prop::collection::vec(0usize..4, 0..4), any::<bool>()).prop_flat_map(|(dims, wide)| {
        let n: usize = dims.iter().product();
        let dtype = if wide { DType::F64 } else { DType::F32 };
        prop::collection::vec(-1e6f64..1e6, n).prop_map(move |v| Tensor::new(dims.clone(), v, dtype).unwrap())
    })
}

fn message() -> impl Strategy<Value = Message> {
    let ts = || prop::collection::vec(tensor(), 0..3);
    prop_oneof![
        Just(Message::Register),
        ts().prop_map(Message::Activations),
        tensor().prop_map(Message::Prediction),
        (any::<f32>().prop_filter("finite", |v| v.is_finite()), any::<u32>())
            .prop_map(|(value, count)| Message::Loss { value, count }),
        ts().prop_map(Message::CutGrad),
        ts().prop_map(Message::ModelPull),
        ts().prop_map(Message::ModelPush),
        ".{0,20}".prop_map(Message::Abort),
    ]
}

fn frame() -> impl Strategy<Value = Frame> {
    (any::<u32>(), any::<u32>(), message()).prop_map(|(r, c, m)| Frame::new(r, c, m))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn frames_round_trip(f in frame()) {
        let bytes = f.encode();
        prop_assert_eq!(bytes.len(), f.encoded_len());
        prop_assert_eq!(Frame::decode(&bytes).unwrap(), f);
    }
}

proptest! {
    #[test]
    fn concatenated_stream_splits_back(frames in prop::collection::vec(frame(), 0..8)) {
        let stream: Vec<u8> = frames.iter().flat_map(Frame::encode).collect();
        prop_assert_eq!(split_stream(&stream).unwrap(), frames);
    }

    #[test]
    fn decoder_never_panics_on_noise(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
        let _ = decode_frame(&bytes);
        let _ = split_stream(&bytes);
    }

    #[test]
    fn truncation_is_a_decode_error(f in frame(), cut in 0usize..1000) {
        let bytes = f.encode();
        let cut = cut % bytes.len();
        let is_decode_error = matches!(Frame::decode(&bytes[..cut]), Err(Error::Decode { .. }));
        prop_assert!(is_decode_error);
    }

    #[test]
    fn corrupted_header_is_rejected(f in frame(), pos in 0usize..6, flip in 1u8..=255) {
        let mut bytes = f.encode();
        bytes[pos] ^= flip;
        prop_assume!(!(pos == 5 && MsgType::from_u8(bytes[5]).is_some()));
        let is_decode_error = matches!(Frame::decode(&bytes), Err(Error::Decode { .. }));
        prop_assert!(is_decode_error);
    }
}

#[test]
fn loss_frame_has_no_room_for_labels() {
    let f = Frame::new(3, 1, Message::Loss { value: 0.25, count: 4 });
    let bytes = f.encode();
    assert_eq!(bytes.len(), HEADER_LEN + 8);
    let mut padded = bytes.clone();
    padded[14..22].copy_from_slice(&12u64.to_le_bytes());
    padded.extend_from_slice(&[0, 1, 2, 3]);
    assert!(matches!(Frame::decode(&padded), Err(Error::Decode { .. })));
}

#[test]
fn register_payload_must_be_empty() {
    let mut bytes = Frame::new(0, 0, Message::Register).encode();
    bytes[14..22].copy_from_slice(&1u64.to_le_bytes());
    bytes.push(7);
    assert!(matches!(Frame::decode(&bytes), Err(Error::Decode { .. })));
}

#[test]
fn channel_and_tcp_deliver_identical_bytes() {
    let frames: Vec<Frame> = (0..5)
        .map(|i| {
            let t = Tensor::new(vec![2, 3], (0..6).map(|v| (v * i) as f64 * 0.5).collect(), DType::F32).unwrap();
            Frame::new(i, 2, Message::Activations(vec![t]))
        })
        .collect();
    let (mut a, mut b) = channel_pair();
    for f in &frames {
        a.send(f).unwrap();
    }
    let via_channel: Vec<Vec<u8>> = frames.iter().map(|_| b.recv_bytes(None).unwrap().unwrap()).collect();

    let listener = tcp_listen("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let sender = std::thread::spawn({
        let frames = frames.clone();
        move || {
            let mut ep = TcpEndpoint::connect(&addr, Duration::from_secs(5)).unwrap();
            for f in &frames {
                ep.send(f).unwrap();
            }
        }
    });
    let (stream, _) = listener.accept().unwrap();
    let mut server = TcpEndpoint::new(stream).unwrap();
    let via_tcp: Vec<Vec<u8>> = frames.iter().map(|_| server.recv_bytes(None).unwrap().unwrap()).collect();
    sender.join().unwrap();
    assert_eq!(via_channel, via_tcp);
    assert_eq!(via_tcp, frames.iter().map(Frame::encode).collect::<Vec<_>>());
}

#[test]
fn recv_timeout_returns_none() {
    let (_a, mut b) = channel_pair();
    assert!(b.recv_timeout(Duration::from_millis(10)).unwrap().is_none());
}

#[test]
fn closed_peer_is_a_transport_error() {
    let (a, mut b) = channel_pair();
    drop(a);
    assert!(matches!(b.recv(), Err(Error::Transport(_))));
}

#[test]
fn all_transports_record_the_same_frames() {
    let cfg = common::tiny_model(mpsl_core::model::Precision::F32, 1);
    let s = common::setup(&cfg, &common::training(3, 4, 6));
    let opts = RunOptions { record: true, ..Default::default() };
    let seq = run_mpsl_sequential(&s.fed, &s.init, &opts).unwrap();
    let thr = run_mpsl_threaded(&s.fed, &s.init, &opts).unwrap();
    let tcp = run_mpsl_tcp(&s.fed, &s.init, "127.0.0.1:0", &opts).unwrap();
    let frames = |a: &mpsl_core::protocol::TrainedArtifacts| a.recorder.as_ref().unwrap().frames();
    assert!(!frames(&seq).is_empty());
    assert_eq!(frames(&seq), frames(&thr));
    assert_eq!(frames(&seq), frames(&tcp));
    assert_eq!(seq.log, tcp.log);
    let uplink = frames(&seq).iter().filter(|r| r.direction == Direction::Uplink).count();
    assert_eq!(uplink, 3 + 3 * 4 * 3 + 3);
}
