//! Wire codec for the classical sifting channel.
//!
//! Every frame is `[msg_type: 1 byte][payload_len: u32 LE][payload]`.
//! BASIS_REVEAL carries repeated `{clock_index: u64 LE, basis: 1 byte}`;
//! SIFT_KEEP carries repeated `{clock_index: u64 LE}`.

use crate::error::FrameError;
use crate::protocol::Basis;

pub const MSG_BASIS_REVEAL: u8 = 0x01;
pub const MSG_SIFT_KEEP: u8 = 0x02;
pub const MSG_SESSION_CTRL: u8 = 0x03;
pub const MSG_QBER_SAMPLE: u8 = 0x04;
pub const MSG_ESTIMATE_REPORT: u8 = 0x05;

/// Frame header length: type byte plus little-endian payload length.
pub const HEADER_LEN: usize = 5;

/// Upper bound on a payload; anything larger is rejected before allocation.
pub const MAX_PAYLOAD: usize = 1 << 20;

/// Session control codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionCtrl {
    Start,
    Stop,
    Suspend,
    Resume,
}

impl SessionCtrl {
    fn as_byte(self) -> u8 {
        match self {
            SessionCtrl::Start => 0,
            SessionCtrl::Stop => 1,
            SessionCtrl::Suspend => 2,
            SessionCtrl::Resume => 3,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(SessionCtrl::Start),
            1 => Some(SessionCtrl::Stop),
            2 => Some(SessionCtrl::Suspend),
            3 => Some(SessionCtrl::Resume),
            _ => None,
        }
    }
}

/// Decoded sifting-channel message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    /// Receiver -> sender: detected clock indices and measurement bases.
    BasisReveal(Vec<(u64, Basis)>),
    /// Sender -> receiver: indices to keep (matching bases).
    SiftKeep(Vec<u64>),
    /// Receiver -> sender session control.
    SessionCtrl(SessionCtrl),
    /// Sender -> receiver: sacrificed indices with the sender's bit values,
    /// for in-protocol error estimation.
    QberSample(Vec<(u64, u8)>),
    /// Receiver -> sender: error tally over the sacrificed sample.
    EstimateReport { errors: u64, total: u64 },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::BasisReveal(_) => MSG_BASIS_REVEAL,
            Message::SiftKeep(_) => MSG_SIFT_KEEP,
            Message::SessionCtrl(_) => MSG_SESSION_CTRL,
            Message::QberSample(_) => MSG_QBER_SAMPLE,
            Message::EstimateReport { .. } => MSG_ESTIMATE_REPORT,
        }
    }
}

/// Encode a message into a single frame.
pub fn encode(msg: &Message) -> Vec<u8> {
    let payload: Vec<u8> = match msg {
        Message::BasisReveal(entries) => {
            let mut p = Vec::with_capacity(entries.len() * 9);
            for (idx, basis) in entries {
                p.extend_from_slice(&idx.to_le_bytes());
                p.push(basis.as_byte());
            }
            p
        }
        Message::SiftKeep(indices) => {
            let mut p = Vec::with_capacity(indices.len() * 8);
            for idx in indices {
                p.extend_from_slice(&idx.to_le_bytes());
            }
            p
        }
        Message::SessionCtrl(ctrl) => vec![ctrl.as_byte()],
        Message::QberSample(entries) => {
            let mut p = Vec::with_capacity(entries.len() * 9);
            for (idx, bit) in entries {
                p.extend_from_slice(&idx.to_le_bytes());
                p.push(bit & 1);
            }
            p
        }
        Message::EstimateReport { errors, total } => {
            let mut p = Vec::with_capacity(16);
            p.extend_from_slice(&errors.to_le_bytes());
            p.extend_from_slice(&total.to_le_bytes());
            p
        }
    };
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.push(msg.msg_type());
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(&payload);
    frame
}

fn read_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b[..8].try_into().expect("checked length"))
}

/// Decode one frame from the front of `bytes`; returns the message and the
/// number of bytes consumed. Truncated, over-length or unknown frames are
/// rejected.
pub fn decode(bytes: &[u8]) -> Result<(Message, usize), FrameError> {
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::Truncated {
            declared: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let msg_type = bytes[0];
    let len = u32::from_le_bytes(bytes[1..5].try_into().expect("checked length")) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::OverLength(len, MAX_PAYLOAD));
    }
    if bytes.len() < HEADER_LEN + len {
        return Err(FrameError::Truncated {
            declared: len,
            available: bytes.len() - HEADER_LEN,
        });
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + len];
    let msg = decode_payload(msg_type, payload)?;
    Ok((msg, HEADER_LEN + len))
}

/// Decode a payload whose header has already been read.
pub fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<Message, FrameError> {
    match msg_type {
        MSG_BASIS_REVEAL => {
            if payload.len() % 9 != 0 {
                return Err(FrameError::MalformedPayload(format!(
                    "basis-reveal payload length {} is not a multiple of 9",
                    payload.len()
                )));
            }
            let mut entries = Vec::with_capacity(payload.len() / 9);
            for chunk in payload.chunks_exact(9) {
                let idx = read_u64(chunk);
                let basis = Basis::from_byte(chunk[8]).ok_or_else(|| {
                    FrameError::MalformedPayload(format!("invalid basis byte {}", chunk[8]))
                })?;
                entries.push((idx, basis));
            }
            Ok(Message::BasisReveal(entries))
        }
        MSG_SIFT_KEEP => {
            if payload.len() % 8 != 0 {
                return Err(FrameError::MalformedPayload(format!(
                    "sift-keep payload length {} is not a multiple of 8",
                    payload.len()
                )));
            }
            Ok(Message::SiftKeep(
                payload.chunks_exact(8).map(read_u64).collect(),
            ))
        }
        MSG_SESSION_CTRL => {
            if payload.len() != 1 {
                return Err(FrameError::MalformedPayload(format!(
                    "session-ctrl payload must be 1 byte, got {}",
                    payload.len()
                )));
            }
            SessionCtrl::from_byte(payload[0])
                .map(Message::SessionCtrl)
                .ok_or_else(|| {
                    FrameError::MalformedPayload(format!("invalid ctrl code {}", payload[0]))
                })
        }
        MSG_QBER_SAMPLE => {
            if payload.len() % 9 != 0 {
                return Err(FrameError::MalformedPayload(format!(
                    "qber-sample payload length {} is not a multiple of 9",
                    payload.len()
                )));
            }
            let mut entries = Vec::with_capacity(payload.len() / 9);
            for chunk in payload.chunks_exact(9) {
                if chunk[8] > 1 {
                    return Err(FrameError::MalformedPayload(format!(
                        "invalid bit byte {}",
                        chunk[8]
                    )));
                }
                entries.push((read_u64(chunk), chunk[8]));
            }
            Ok(Message::QberSample(entries))
        }
        MSG_ESTIMATE_REPORT => {
            if payload.len() != 16 {
                return Err(FrameError::MalformedPayload(format!(
                    "estimate-report payload must be 16 bytes, got {}",
                    payload.len()
                )));
            }
            Ok(Message::EstimateReport {
                errors: read_u64(&payload[..8]),
                total: read_u64(&payload[8..]),
            })
        }
        other => Err(FrameError::UnknownType(other)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_payload_is_a_five_byte_frame() {
        let frame = encode(&Message::SiftKeep(vec![]));
        assert_eq!(frame.len(), 5);
        let (msg, used) = decode(&frame).unwrap();
        assert_eq!(msg, Message::SiftKeep(vec![]));
        assert_eq!(used, 5);
    }

    #[test]
    fn thousand_entry_reveal_round_trips() {
        let entries: Vec<(u64, Basis)> = (0..1000u64)
            .map(|i| (i * 7 + 3, if i % 3 == 0 { Basis::Z } else { Basis::X }))
            .collect();
        let msg = Message::BasisReveal(entries);
        let frame = encode(&msg);
        assert_eq!(frame.len(), 5 + 9 * 1000);
        let (decoded, used) = decode(&frame).unwrap();
        assert_eq!(decoded, msg);
        assert_eq!(used, frame.len());
    }

    #[test]
    fn truncated_frame_is_rejected() {
        let mut frame = Vec::new();
        frame.push(MSG_SIFT_KEEP);
        frame.extend_from_slice(&10u32.to_le_bytes());
        frame.extend_from_slice(&[0u8; 9]); // one byte short
        match decode(&frame) {
            Err(FrameError::Truncated {
                declared: 10,
                available: 9,
            }) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_type_is_rejected() {
        let mut frame = vec![0x7f];
        frame.extend_from_slice(&0u32.to_le_bytes());
        assert_eq!(decode(&frame), Err(FrameError::UnknownType(0x7f)));
    }

    #[test]
    fn over_length_is_rejected_before_allocation() {
        let mut frame = vec![MSG_SIFT_KEEP];
        frame.extend_from_slice(&(u32::MAX).to_le_bytes());
        match decode(&frame) {
            Err(FrameError::OverLength(_, _)) => {}
            other => panic!("expected over-length error, got {other:?}"),
        }
    }

    #[test]
    fn ctrl_codes_round_trip() {
        for ctrl in [
            SessionCtrl::Start,
            SessionCtrl::Stop,
            SessionCtrl::Suspend,
            SessionCtrl::Resume,
        ] {
            let frame = encode(&Message::SessionCtrl(ctrl));
            let (msg, _) = decode(&frame).unwrap();
            assert_eq!(msg, Message::SessionCtrl(ctrl));
        }
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        prop_oneof![
            prop::collection::vec((any::<u64>(), prop::bool::ANY), 0..200).prop_map(|v| {
                Message::BasisReveal(
                    v.into_iter()
                        .map(|(i, x)| (i, if x { Basis::X } else { Basis::Z }))
                        .collect(),
                )
            }),
            prop::collection::vec(any::<u64>(), 0..200).prop_map(Message::SiftKeep),
            (0u8..4).prop_map(|c| Message::SessionCtrl(SessionCtrl::from_byte(c).unwrap())),
            prop::collection::vec((any::<u64>(), 0u8..2), 0..200).prop_map(Message::QberSample),
            (any::<u64>(), any::<u64>())
                .prop_map(|(errors, total)| Message::EstimateReport { errors, total }),
        ]
    }

    proptest! {
        #[test]
        fn decode_encode_is_identity(msg in arb_message()) {
            let frame = encode(&msg);
            let (decoded, used) = decode(&frame).unwrap();
            prop_assert_eq!(decoded, msg);
            prop_assert_eq!(used, frame.len());
        }

        #[test]
        fn decoder_never_panics_on_arbitrary_bytes(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode(&bytes);
        }

        #[test]
        fn decoder_never_panics_on_mutated_valid_frames(
            msg in arb_message(),
            cut in 0usize..64,
            flip in any::<(usize, u8)>(),
        ) {
            let mut frame = encode(&msg);
            if !frame.is_empty() {
                let i = flip.0 % frame.len();
                frame[i] ^= flip.1;
            }
            let keep = frame.len().saturating_sub(cut);
            let _ = decode(&frame[..keep]);
        }
    }
}
