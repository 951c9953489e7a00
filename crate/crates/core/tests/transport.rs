use std::io::Cursor;

use lapg::transport::codec::{decode, encode, read_frame, Message, MAX_PAYLOAD};
use lapg::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_message(rng: &mut ChaCha8Rng) -> Message {
    let len = rng.random_range(0..40);
    let payload: Vec<f64> = (0..len).map(|_| f64::from_bits(rng.random())).collect();
    let sigma2 = rng
        .random_bool(0.8)
        .then(|| f64::from_bits(rng.random()))
        .filter(|s| !s.is_nan());
    let (learner_id, iteration) = (rng.random(), rng.random());
    match rng.random_range(0..4) {
        0 => Message::Broadcast {
            iteration,
            theta: payload,
        },
        1 => Message::UploadDelta {
            learner_id,
            iteration,
            delta: payload,
            sigma2,
        },
        2 => Message::UploadFull {
            learner_id,
            iteration,
            grad: payload,
            sigma2,
        },
        _ => Message::Ack {
            learner_id,
            iteration,
            payload,
        },
    }
}

#[test]
fn fuzz_round_trip_hundred_thousand_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut stream = Vec::new();
    let mut failures = 0;
    for _ in 0..100_000 {
        let msg = random_message(&mut rng);
        let bytes = encode(&msg).unwrap();
        match decode(&bytes) {
            Ok((back, used)) if used == bytes.len() && encode(&back).unwrap() == bytes => {}
            _ => failures += 1,
        }
        if stream.len() < 1 << 20 {
            stream.extend_from_slice(&bytes);
        }
    }
    assert_eq!(failures, 0);

    let mut reader = Cursor::new(&stream);
    let mut offset = 0;
    while let Some(msg) = read_frame(&mut reader).unwrap() {
        let bytes = encode(&msg).unwrap();
        assert_eq!(&stream[offset..offset + bytes.len()], bytes.as_slice());
        offset += bytes.len();
    }
    assert_eq!(offset, stream.len());
}

#[test]
fn truncated_stream_is_a_decode_error() {
    let msg = Message::UploadFull {
        learner_id: 1,
        iteration: 2,
        grad: vec![1.0; 4],
        sigma2: Some(0.5),
    };
    let bytes = encode(&msg).unwrap();
    for cut in 1..bytes.len() {
        let err = read_frame(&mut Cursor::new(&bytes[..cut])).unwrap_err();
        assert!(matches!(err, Error::Decode(_) | Error::Transport(_)), "{err:?}");
    }
    assert!(read_frame(&mut Cursor::new(&[][..])).unwrap().is_none());
}

#[test]
fn oversized_payload_rejected_by_encoder() {
    let msg = Message::Broadcast {
        iteration: 0,
        theta: vec![0.0; MAX_PAYLOAD as usize + 1],
    };
    assert!(matches!(encode(&msg), Err(Error::Protocol(_))));
}

proptest! {
    #[test]
    fn frame_length_matches_encoding(len in 0usize..100, kind in 0u8..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let payload = vec![1.0; len];
        let msg = match kind {
            0 => Message::Broadcast { iteration: 1, theta: payload },
            1 => Message::UploadDelta { learner_id: 1, iteration: 1, delta: payload, sigma2: None },
            2 => Message::UploadFull { learner_id: 1, iteration: 1, grad: payload, sigma2: Some(rng.random()) },
            _ => Message::Ack { learner_id: 1, iteration: 1, payload },
        };
        prop_assert_eq!(encode(&msg).unwrap().len(), msg.frame_len());
    }
}
