//! Control-plane framing.
//!
//! A frame is a 4-byte little-endian payload length, a 1-byte message type,
//! then the payload. Every payload starts with the 32-bit sender id; the rest
//! is type specific. Strings are a `u16` length plus UTF-8, byte strings a
//! `u32` length plus bytes. All integers are little-endian.
//!
//! | type | code | body after `sender` |
//! |------|------|---------------------|
//! | REGISTER        | 1  | role u8, node u32, ranks u32 |
//! | REGISTER_ACK    | 2  | dest u32, accepted u8, expected u32, reason str |
//! | BARRIER_ENTER   | 3  | name str, ok u8 |
//! | BARRIER_RELEASE | 4  | name str, ok u8 |
//! | PUBLISH         | 5  | req u32, claim u8, key str, generation u32, value bytes |
//! | QUERY           | 6  | req u32, key str |
//! | QUERY_REPLY     | 7  | dest u32, req u32, status u8, generation u32, seq u64, value bytes |
//! | CKPT_REQUEST    | 8  | dest u32, ckpt_id u32 |
//! | PHASE_ACK       | 9  | ckpt_id u32, phase u8 |
//! | AGGREGATE       | 10 | count u32, then `count` complete inner frames |
//! | SHUTDOWN        | 11 | reason str |

use std::io::{self, Read, Write};

use thiserror::Error;

/// Sender id used by the root coordinator.
pub const ROOT_ID: u32 = u32::MAX;
/// Upper bound on a single frame payload.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MsgType {
    Register = 1,
    RegisterAck = 2,
    BarrierEnter = 3,
    BarrierRelease = 4,
    Publish = 5,
    Query = 6,
    QueryReply = 7,
    CkptRequest = 8,
    PhaseAck = 9,
    Aggregate = 10,
    Shutdown = 11,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        use MsgType::*;
        Some(match v {
            1 => Register,
            2 => RegisterAck,
            3 => BarrierEnter,
            4 => BarrierRelease,
            5 => Publish,
            6 => Query,
            7 => QueryReply,
            8 => CkptRequest,
            9 => PhaseAck,
            10 => Aggregate,
            11 => Shutdown,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Role {
    Rank = 0,
    Sub = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ReplyStatus {
    Found = 0,
    NotFound = 1,
    ClaimOk = 2,
    ClaimConflict = 3,
}

impl ReplyStatus {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => ReplyStatus::Found,
            1 => ReplyStatus::NotFound,
            2 => ReplyStatus::ClaimOk,
            3 => ReplyStatus::ClaimConflict,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Register { role: Role, node: u32, ranks: u32 },
    RegisterAck { dest: u32, accepted: bool, expected: u32, reason: String },
    BarrierEnter { name: String, ok: bool },
    BarrierRelease { name: String, ok: bool },
    Publish { req: u32, claim: bool, key: String, generation: u32, value: Vec<u8> },
    Query { req: u32, key: String },
    QueryReply { dest: u32, req: u32, status: ReplyStatus, generation: u32, seq: u64, value: Vec<u8> },
    CkptRequest { dest: u32, ckpt_id: u32 },
    PhaseAck { ckpt_id: u32, phase: u8 },
    Aggregate { frames: Vec<ControlMessage> },
    Shutdown { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlMessage {
    pub sender: u32,
    pub body: Body,
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("truncated frame")]
    Truncated,
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("invalid field: {0}")]
    Invalid(&'static str),
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ControlMessage {
    pub fn new(sender: u32, body: Body) -> Self {
        Self { sender, body }
    }

    pub fn msg_type(&self) -> MsgType {
        match &self.body {
            Body::Register { .. } => MsgType::Register,
            Body::RegisterAck { .. } => MsgType::RegisterAck,
            Body::BarrierEnter { .. } => MsgType::BarrierEnter,
            Body::BarrierRelease { .. } => MsgType::BarrierRelease,
            Body::Publish { .. } => MsgType::Publish,
            Body::Query { .. } => MsgType::Query,
            Body::QueryReply { .. } => MsgType::QueryReply,
            Body::CkptRequest { .. } => MsgType::CkptRequest,
            Body::PhaseAck { .. } => MsgType::PhaseAck,
            Body::Aggregate { .. } => MsgType::Aggregate,
            Body::Shutdown { .. } => MsgType::Shutdown,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32);
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&[0; 4]);
        out.push(self.msg_type() as u8);
        put_u32(out, self.sender);
        match &self.body {
            Body::Register { role, node, ranks } => {
                out.push(*role as u8);
                put_u32(out, *node);
                put_u32(out, *ranks);
            }
            Body::RegisterAck { dest, accepted, expected, reason } => {
                put_u32(out, *dest);
                out.push(*accepted as u8);
                put_u32(out, *expected);
                put_str(out, reason);
            }
            Body::BarrierEnter { name, ok } | Body::BarrierRelease { name, ok } => {
                put_str(out, name);
                out.push(*ok as u8);
            }
            Body::Publish { req, claim, key, generation, value } => {
                put_u32(out, *req);
                out.push(*claim as u8);
                put_str(out, key);
                put_u32(out, *generation);
                put_bytes(out, value);
            }
            Body::Query { req, key } => {
                put_u32(out, *req);
                put_str(out, key);
            }
            Body::QueryReply { dest, req, status, generation, seq, value } => {
                put_u32(out, *dest);
                put_u32(out, *req);
                out.push(*status as u8);
                put_u32(out, *generation);
                out.extend_from_slice(&seq.to_le_bytes());
                put_bytes(out, value);
            }
            Body::CkptRequest { dest, ckpt_id } => {
                put_u32(out, *dest);
                put_u32(out, *ckpt_id);
            }
            Body::PhaseAck { ckpt_id, phase } => {
                put_u32(out, *ckpt_id);
                out.push(*phase);
            }
            Body::Aggregate { frames } => {
                put_u32(out, frames.len() as u32);
                for f in frames {
                    f.encode_into(out);
                }
            }
            Body::Shutdown { reason } => put_str(out, reason),
        }
        let payload_len = (out.len() - start - 5) as u32;
        out[start..start + 4].copy_from_slice(&payload_len.to_le_bytes());
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let (msg, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(WireError::Trailing(bytes.len() - used));
        }
        Ok(msg)
    }

    /// Decodes one frame from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize), WireError> {
        if bytes.len() < 5 {
            return Err(WireError::Truncated);
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        if len > MAX_FRAME {
            return Err(WireError::TooLarge(len));
        }
        let ty = MsgType::from_u8(bytes[4]).ok_or(WireError::UnknownType(bytes[4]))?;
        let end = 5usize.checked_add(len).ok_or(WireError::Truncated)?;
        if bytes.len() < end {
            return Err(WireError::Truncated);
        }
        let mut r = Reader { buf: &bytes[5..end] };
        let msg = decode_payload(ty, &mut r)?;
        if !r.buf.is_empty() {
            return Err(WireError::Trailing(r.buf.len()));
        }
        Ok((msg, end))
    }

    /// Writes one frame and flushes it immediately.
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }

    /// Reads one frame; `Ok(None)` on a clean end of stream.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Self>, WireError> {
        let mut header = [0u8; 5];
        let mut got = 0;
        while got < header.len() {
            match r.read(&mut header[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(WireError::Truncated),
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let len = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
        if len > MAX_FRAME {
            return Err(WireError::TooLarge(len));
        }
        let mut frame = Vec::with_capacity(5 + len);
        frame.extend_from_slice(&header);
        frame.resize(5 + len, 0);
        r.read_exact(&mut frame[5..]).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => WireError::Truncated,
            _ => WireError::Io(e),
        })?;
        Self::decode(&frame).map(Some)
    }
}

fn decode_payload(ty: MsgType, r: &mut Reader<'_>) -> Result<ControlMessage, WireError> {
    let sender = r.u32()?;
    let body = match ty {
        MsgType::Register => {
            let role = match r.u8()? {
                0 => Role::Rank,
                1 => Role::Sub,
                _ => return Err(WireError::Invalid("role")),
            };
            Body::Register { role, node: r.u32()?, ranks: r.u32()? }
        }
        MsgType::RegisterAck => Body::RegisterAck {
            dest: r.u32()?,
            accepted: r.bool()?,
            expected: r.u32()?,
            reason: r.string()?,
        },
        MsgType::BarrierEnter => Body::BarrierEnter { name: r.string()?, ok: r.bool()? },
        MsgType::BarrierRelease => Body::BarrierRelease { name: r.string()?, ok: r.bool()? },
        MsgType::Publish => Body::Publish {
            req: r.u32()?,
            claim: r.bool()?,
            key: r.string()?,
            generation: r.u32()?,
            value: r.bytes()?,
        },
        MsgType::Query => Body::Query { req: r.u32()?, key: r.string()? },
        MsgType::QueryReply => Body::QueryReply {
            dest: r.u32()?,
            req: r.u32()?,
            status: ReplyStatus::from_u8(r.u8()?).ok_or(WireError::Invalid("reply status"))?,
            generation: r.u32()?,
            seq: r.u64()?,
            value: r.bytes()?,
        },
        MsgType::CkptRequest => Body::CkptRequest { dest: r.u32()?, ckpt_id: r.u32()? },
        MsgType::PhaseAck => Body::PhaseAck { ckpt_id: r.u32()?, phase: r.u8()? },
        MsgType::Aggregate => {
            let count = r.u32()? as usize;
            let mut frames = Vec::with_capacity(count.min(1024));
            for _ in 0..count {
                let (inner, used) = ControlMessage::decode_prefix(r.buf)?;
                r.buf = &r.buf[used..];
                frames.push(inner);
            }
            Body::Aggregate { frames }
        }
        MsgType::Shutdown => Body::Shutdown { reason: r.string()? },
    };
    Ok(ControlMessage { sender, body })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    let len = u16::try_from(bytes.len()).expect("control-plane strings fit in u16");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(bytes);
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(WireError::Invalid("bool")),
        }
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, WireError> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| WireError::Invalid("utf-8"))
    }

    fn bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn barrier_enter_layout_is_exact() {
        let msg = ControlMessage::new(7, Body::BarrierEnter { name: "ab".into(), ok: true });
        let bytes = msg.encode();
        // payload = sender(4) + strlen(2) + "ab"(2) + ok(1) = 9
        assert_eq!(bytes, vec![9, 0, 0, 0, 3, 7, 0, 0, 0, 2, 0, b'a', b'b', 1]);
        assert_eq!(ControlMessage::decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn aggregate_nests_complete_frames() {
        let inner: Vec<_> = (0..3)
            .map(|r| ControlMessage::new(r, Body::BarrierEnter { name: "suspend".into(), ok: true }))
            .collect();
        let agg = ControlMessage::new(100, Body::Aggregate { frames: inner.clone() });
        let bytes = agg.encode();
        let count = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
        assert_eq!(count, 3);
        let first = ControlMessage::decode_prefix(&bytes[13..]).unwrap().0;
        assert_eq!(first, inner[0]);
        match ControlMessage::decode(&bytes).unwrap().body {
            Body::Aggregate { frames } => assert_eq!(frames, inner),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_malformed() {
        assert!(matches!(ControlMessage::decode(&[1, 0, 0]), Err(WireError::Truncated)));
        assert!(matches!(ControlMessage::decode(&[0, 0, 0, 0, 99]), Err(WireError::UnknownType(99))));
        let mut bytes = ControlMessage::new(1, Body::Shutdown { reason: "x".into() }).encode();
        bytes.push(0);
        assert!(matches!(ControlMessage::decode(&bytes), Err(WireError::Trailing(1))));
        let bad_bool = vec![7, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0, 2];
        assert!(matches!(ControlMessage::decode(&bad_bool), Err(WireError::Invalid("bool"))));
    }

    #[test]
    fn stream_read_write() {
        let msgs = vec![
            ControlMessage::new(1, Body::Query { req: 4, key: "ud:1:64".into() }),
            ControlMessage::new(ROOT_ID, Body::CkptRequest { dest: 1, ckpt_id: 2 }),
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            m.write_to(&mut buf).unwrap();
        }
        let mut cursor = io::Cursor::new(buf);
        let mut got = Vec::new();
        while let Some(m) = ControlMessage::read_from(&mut cursor).unwrap() {
            got.push(m);
        }
        assert_eq!(got, msgs);
    }

    fn arb_str() -> impl Strategy<Value = String> {
        "[a-z0-9:_]{0,24}"
    }

    fn arb_leaf() -> impl Strategy<Value = ControlMessage> {
        let body = prop_oneof![
            (any::<bool>(), any::<u32>(), any::<u32>()).prop_map(|(s, node, ranks)| Body::Register {
                role: if s { Role::Sub } else { Role::Rank },
                node,
                ranks
            }),
            (any::<u32>(), any::<bool>(), any::<u32>(), arb_str())
                .prop_map(|(dest, accepted, expected, reason)| Body::RegisterAck { dest, accepted, expected, reason }),
            (arb_str(), any::<bool>()).prop_map(|(name, ok)| Body::BarrierEnter { name, ok }),
            (arb_str(), any::<bool>()).prop_map(|(name, ok)| Body::BarrierRelease { name, ok }),
            (any::<u32>(), any::<bool>(), arb_str(), any::<u32>(), proptest::collection::vec(any::<u8>(), 0..32))
                .prop_map(|(req, claim, key, generation, value)| Body::Publish { req, claim, key, generation, value }),
            (any::<u32>(), arb_str()).prop_map(|(req, key)| Body::Query { req, key }),
            (any::<u32>(), any::<u32>(), 0u8..4, any::<u32>(), any::<u64>(), proptest::collection::vec(any::<u8>(), 0..16))
                .prop_map(|(dest, req, st, generation, seq, value)| Body::QueryReply {
                    dest,
                    req,
                    status: ReplyStatus::from_u8(st).unwrap(),
                    generation,
                    seq,
                    value
                }),
            (any::<u32>(), any::<u32>()).prop_map(|(dest, ckpt_id)| Body::CkptRequest { dest, ckpt_id }),
            (any::<u32>(), any::<u8>()).prop_map(|(ckpt_id, phase)| Body::PhaseAck { ckpt_id, phase }),
            arb_str().prop_map(|reason| Body::Shutdown { reason }),
        ];
        (any::<u32>(), body).prop_map(|(sender, body)| ControlMessage { sender, body })
    }

    fn arb_msg() -> impl Strategy<Value = ControlMessage> {
        arb_leaf().prop_recursive(2, 16, 6, |inner| {
            (any::<u32>(), proptest::collection::vec(inner, 0..6))
                .prop_map(|(sender, frames)| ControlMessage::new(sender, Body::Aggregate { frames }))
        })
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(msg in arb_msg()) {
            let bytes = msg.encode();
            prop_assert_eq!(bytes.len() - 5, u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize);
            prop_assert_eq!(ControlMessage::decode(&bytes).unwrap(), msg);
        }
    }
}
