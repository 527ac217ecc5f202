//! Frame format shared by the Timekeeper endpoints.
//!
//! A frame is a 4-byte big-endian unsigned length `N` followed by `N` bytes of
//! UTF-8 JSON. The JSON object carries a `"type"` discriminator and flat
//! payload fields. 64-bit nanosecond quantities (timestamps, offsets) are
//! decimal strings; every other integer is a JSON number. Unknown fields are
//! ignored on decode.

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{ClockOffset, VirtualTimestamp};

/// Frames larger than this are rejected as malformed.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

const HEADER_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Actor,
    Observer,
}

/// Error codes carried in acknowledgement frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    RegistrationSealed,
    NoActors,
    UnknownClient,
    RoleViolation,
    ExpectedMismatch,
    AlreadyArrived,
    InvalidRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    Register {
        role: Role,
    },
    RegisterAck {
        client_id: String,
        offset: ClockOffset,
        seq: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<ErrorCode>,
    },
    /// Client to server: close registration. Echoed back as the reply.
    Seal {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        client_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<ErrorCode>,
    },
    JumpRequest {
        client_id: String,
        target: VirtualTimestamp,
    },
    JumpAck {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<ErrorCode>,
    },
    ClockUpdate {
        offset: ClockOffset,
        seq: u64,
    },
    CollectiveEnter {
        client_id: String,
        group_id: String,
        expected: u32,
    },
    CollectiveRelease {
        group_id: String,
        generation: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<ErrorCode>,
    },
    Deregister {
        client_id: String,
    },
    Shutdown {},
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Register { .. } => "REGISTER",
            Message::RegisterAck { .. } => "REGISTER_ACK",
            Message::Seal { .. } => "SEAL",
            Message::JumpRequest { .. } => "JUMP_REQUEST",
            Message::JumpAck { .. } => "JUMP_ACK",
            Message::ClockUpdate { .. } => "CLOCK_UPDATE",
            Message::CollectiveEnter { .. } => "COLLECTIVE_ENTER",
            Message::CollectiveRelease { .. } => "COLLECTIVE_RELEASE",
            Message::Deregister { .. } => "DEREGISTER",
            Message::Shutdown {} => "SHUTDOWN",
        }
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("incomplete frame: need {needed} bytes, have {available}")]
    FrameTooShort { needed: usize, available: usize },
    #[error("malformed frame body: {0}")]
    MalformedBody(String),
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte limit")]
    FrameTooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Serializes any frame body. Used for the Timekeeper messages and for the
/// engine ingress channel, which shares the framing.
pub fn encode_frame<T: Serialize>(body: &T) -> Vec<u8> {
    let json = serde_json::to_vec(body).expect("frame bodies serialize infallibly");
    let len = u32::try_from(json.len()).expect("frame body exceeds u32");
    let mut out = Vec::with_capacity(HEADER_LEN + json.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&json);
    out
}

/// Decodes one frame from the front of `bytes`, returning the body and the
/// number of bytes consumed.
pub fn decode_frame<T: DeserializeOwned>(bytes: &[u8]) -> Result<(T, usize), WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::FrameTooShort {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let len = u32::from_be_bytes(bytes[..HEADER_LEN].try_into().unwrap()) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let total = HEADER_LEN + len;
    if bytes.len() < total {
        return Err(WireError::FrameTooShort {
            needed: total,
            available: bytes.len(),
        });
    }
    let body = serde_json::from_slice(&bytes[HEADER_LEN..total])
        .map_err(|e| WireError::MalformedBody(e.to_string()))?;
    Ok((body, total))
}

pub fn encode(msg: &Message) -> Vec<u8> {
    encode_frame(msg)
}

pub fn decode(bytes: &[u8]) -> Result<(Message, usize), WireError> {
    decode_frame(bytes)
}

/// Reads one frame from a blocking stream. Returns `Ok(None)` on a clean EOF
/// at a frame boundary.
pub fn read_frame<T: DeserializeOwned, R: Read>(reader: &mut R) -> Result<Option<T>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => {
                return Err(WireError::FrameTooShort {
                    needed: HEADER_LEN,
                    available: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::FrameTooShort {
            needed: HEADER_LEN + len,
            available: HEADER_LEN,
        },
        _ => WireError::Io(e),
    })?;
    serde_json::from_slice(&body)
        .map(Some)
        .map_err(|e| WireError::MalformedBody(e.to_string()))
}

pub fn write_frame<T: Serialize, W: Write>(writer: &mut W, body: &T) -> io::Result<()> {
    writer.write_all(&encode_frame(body))?;
    writer.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn body_json(frame: &[u8]) -> serde_json::Value {
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        assert_eq!(len, frame.len() - 4);
        serde_json::from_slice(&frame[4..]).unwrap()
    }

    #[test]
    fn clock_update_encoding() {
        let frame = encode(&Message::ClockUpdate {
            offset: ClockOffset::ZERO,
            seq: 1,
        });
        let body = body_json(&frame);
        assert_eq!(body["type"], "CLOCK_UPDATE");
        assert_eq!(body["offset"], "0");
        assert_eq!(body["seq"], 1);
        let text = std::str::from_utf8(&frame[4..]).unwrap();
        assert!(text.contains(r#""type":"CLOCK_UPDATE""#));
        assert!(text.contains(r#""offset":"0""#));
        assert!(text.contains(r#""seq":1"#));
    }

    #[test]
    fn jump_request_target_is_a_string() {
        let frame = encode(&Message::JumpRequest {
            client_id: "w0".into(),
            target: VirtualTimestamp::from_nanos(1_000_000_000),
        });
        let text = std::str::from_utf8(&frame[4..]).unwrap();
        assert!(text.contains(r#""target":"1000000000""#));
        assert!(text.contains(r#""client_id":"w0""#));
    }

    #[test]
    fn truncated_frame_is_too_short() {
        let mut bytes = 50u32.to_be_bytes().to_vec();
        bytes.extend_from_slice(&[b' '; 6]);
        assert_eq!(bytes.len(), 10);
        match decode(&bytes) {
            Err(WireError::FrameTooShort { needed, available }) => {
                assert_eq!(needed, 54);
                assert_eq!(available, 10);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(decode(&[0, 0]), Err(WireError::FrameTooShort { .. })));
    }

    #[test]
    fn missing_type_is_malformed() {
        let frame = encode_frame(&serde_json::json!({"offset": "0", "seq": 1}));
        assert!(matches!(decode(&frame), Err(WireError::MalformedBody(_))));
    }

    #[test]
    fn unknown_type_and_bad_json_are_malformed() {
        let frame = encode_frame(&serde_json::json!({"type": "TELEPORT"}));
        assert!(matches!(decode(&frame), Err(WireError::MalformedBody(_))));
        let mut raw = 3u32.to_be_bytes().to_vec();
        raw.extend_from_slice(b"{{{");
        assert!(matches!(decode(&raw), Err(WireError::MalformedBody(_))));
    }

    #[test]
    fn oversized_length_rejected() {
        let raw = u32::MAX.to_be_bytes();
        assert!(matches!(decode(&raw), Err(WireError::FrameTooLarge(_))));
    }

    #[test]
    fn extra_fields_are_tolerated() {
        let frame = encode_frame(&serde_json::json!({
            "type": "CLOCK_UPDATE", "offset": "42", "seq": 3, "future_field": [1, 2]
        }));
        let (msg, used) = decode(&frame).unwrap();
        assert_eq!(used, frame.len());
        assert_eq!(
            msg,
            Message::ClockUpdate {
                offset: ClockOffset::from_nanos(42).unwrap(),
                seq: 3
            }
        );
    }

    fn every_type() -> Vec<Message> {
        vec![
            Message::Register { role: Role::Actor },
            Message::Register {
                role: Role::Observer,
            },
            Message::RegisterAck {
                client_id: "c1".into(),
                offset: ClockOffset::from_nanos(99).unwrap(),
                seq: 4,
                error: None,
            },
            Message::RegisterAck {
                client_id: String::new(),
                offset: ClockOffset::ZERO,
                seq: 0,
                error: Some(ErrorCode::RegistrationSealed),
            },
            Message::Seal {
                client_id: Some("c1".into()),
                error: None,
            },
            Message::Seal {
                client_id: None,
                error: Some(ErrorCode::NoActors),
            },
            Message::JumpRequest {
                client_id: "c2".into(),
                target: VirtualTimestamp::MAX,
            },
            Message::JumpAck { error: None },
            Message::JumpAck {
                error: Some(ErrorCode::RoleViolation),
            },
            Message::ClockUpdate {
                offset: ClockOffset::from_nanos(i64::MAX).unwrap(),
                seq: u64::MAX,
            },
            Message::CollectiveEnter {
                client_id: "c3".into(),
                group_id: "tp0".into(),
                expected: 4,
            },
            Message::CollectiveRelease {
                group_id: "tp0".into(),
                generation: 7,
                error: None,
            },
            Message::CollectiveRelease {
                group_id: "tp0".into(),
                generation: 0,
                error: Some(ErrorCode::ExpectedMismatch),
            },
            Message::Deregister {
                client_id: "c4".into(),
            },
            Message::Shutdown {},
        ]
    }

    #[test]
    fn every_message_type_round_trips() {
        for msg in every_type() {
            let frame = encode(&msg);
            let (back, used) = decode(&frame).unwrap();
            assert_eq!(used, frame.len(), "{}", msg.type_name());
            assert_eq!(back, msg);
            let body = body_json(&frame);
            assert_eq!(body["type"], msg.type_name());
        }
    }

    #[test]
    fn stream_reader_handles_concatenated_frames_and_eof() {
        let msgs = every_type();
        let mut buf = Vec::new();
        for m in &msgs {
            write_frame(&mut buf, m).unwrap();
        }
        let mut cursor = io::Cursor::new(buf);
        for m in &msgs {
            let got: Message = read_frame(&mut cursor).unwrap().unwrap();
            assert_eq!(&got, m);
        }
        assert!(read_frame::<Message, _>(&mut cursor).unwrap().is_none());

        let mut partial = io::Cursor::new(vec![0u8, 0, 0, 9, b'{']);
        assert!(matches!(
            read_frame::<Message, _>(&mut partial),
            Err(WireError::FrameTooShort { .. })
        ));
    }

    fn arb_id() -> impl Strategy<Value = String> {
        "[a-z0-9/_-]{0,12}"
    }

    fn arb_error() -> impl Strategy<Value = Option<ErrorCode>> {
        prop_oneof![
            Just(None),
            Just(Some(ErrorCode::RegistrationSealed)),
            Just(Some(ErrorCode::UnknownClient)),
            Just(Some(ErrorCode::ExpectedMismatch)),
        ]
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        let off = (0i64..=i64::MAX).prop_map(|v| ClockOffset::from_nanos(v).unwrap());
        let ts = any::<i64>().prop_map(VirtualTimestamp::from_nanos);
        prop_oneof![
            prop_oneof![Just(Role::Actor), Just(Role::Observer)].prop_map(|role| Message::Register { role }),
            (arb_id(), off.clone(), any::<u64>(), arb_error()).prop_map(|(client_id, offset, seq, error)| {
                Message::RegisterAck { client_id, offset, seq, error }
            }),
            (proptest::option::of(arb_id()), arb_error())
                .prop_map(|(client_id, error)| Message::Seal { client_id, error }),
            (arb_id(), ts).prop_map(|(client_id, target)| Message::JumpRequest { client_id, target }),
            arb_error().prop_map(|error| Message::JumpAck { error }),
            (off, any::<u64>()).prop_map(|(offset, seq)| Message::ClockUpdate { offset, seq }),
            (arb_id(), arb_id(), any::<u32>()).prop_map(|(client_id, group_id, expected)| {
                Message::CollectiveEnter { client_id, group_id, expected }
            }),
            (arb_id(), any::<u64>(), arb_error()).prop_map(|(group_id, generation, error)| {
                Message::CollectiveRelease { group_id, generation, error }
            }),
            arb_id().prop_map(|client_id| Message::Deregister { client_id }),
            Just(Message::Shutdown {}),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn decode_inverts_encode(msg in arb_message()) {
            let frame = encode(&msg);
            let (back, used) = decode(&frame).unwrap();
            prop_assert_eq!(used, frame.len());
            prop_assert_eq!(back, msg);
        }
    }

    proptest! {
        #[test]
        fn concatenated_frames_are_self_delimiting(msgs in proptest::collection::vec(arb_message(), 0..20)) {
            let mut buf = Vec::new();
            for m in &msgs {
                buf.extend(encode(m));
            }
            let mut at = 0;
            let mut out = Vec::new();
            while at < buf.len() {
                let (m, used) = decode(&buf[at..]).unwrap();
                out.push(m);
                at += used;
            }
            prop_assert_eq!(out, msgs);
        }
    }
}
