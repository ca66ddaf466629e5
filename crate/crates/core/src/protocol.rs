//! Length-prefixed binary frames for the gateway ↔ engine hop.
//!
//! ```text
//! +-------------+---------+-----------------------+
//! | len: u32 LE | kind: u8| payload (len - 1 B)   |
//! +-------------+---------+-----------------------+
//! ```
//!
//! `len` counts the kind byte plus the payload. Integers are little-endian
//! and fixed width, floats are IEEE-754 LE, strings are a `u32 LE` byte
//! length followed by UTF-8. See `docs/protocol.md` for per-frame layouts.

use bytes::{Buf, BufMut, BytesMut};
use thiserror::Error;
use tokio_util::codec::{Decoder, Encoder};

pub const KIND_SUBMIT: u8 = 0x01;
pub const KIND_TOKEN: u8 = 0x02;
pub const KIND_DONE: u8 = 0x03;
pub const KIND_ERROR: u8 = 0x04;
pub const KIND_PING: u8 = 0x05;
pub const KIND_PONG: u8 = 0x06;

/// Default upper bound on `len`.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

/// ERROR frame codes.
pub mod code {
    pub const OVERLOADED: u16 = 1;
    pub const INVALID_REQUEST: u16 = 2;
    pub const BUSY: u16 = 3;
    pub const INTERNAL: u16 = 4;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmitFrame {
    pub request_id: u64,
    /// Prompt length in tokens; 0 means "count the whitespace-separated
    /// words of `prompt`".
    pub prompt_tokens: u32,
    pub max_tokens: u32,
    pub temperature: f32,
    pub top_p: f32,
    pub seed: u64,
    pub prompt: String,
}

impl SubmitFrame {
    pub fn effective_prompt_tokens(&self) -> u32 {
        if self.prompt_tokens > 0 {
            self.prompt_tokens
        } else {
            (self.prompt.split_whitespace().count() as u32).max(1)
        }
    }
}

/// End of a request's token stream, with the engine's own timing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DoneFrame {
    pub request_id: u64,
    pub total_tokens: u32,
    /// receipt of SUBMIT → inference start
    pub queue_ns: u64,
    /// inference start → first token
    pub first_token_ns: u64,
    /// inference start → last token
    pub inference_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Submit(SubmitFrame),
    Token { request_id: u64, seq: u32, text: String },
    Done(DoneFrame),
    Error { request_id: u64, code: u16, message: String },
    Ping { nonce: u64 },
    Pong { nonce: u64 },
}

impl Frame {
    pub fn kind(&self) -> u8 {
        match self {
            Frame::Submit(_) => KIND_SUBMIT,
            Frame::Token { .. } => KIND_TOKEN,
            Frame::Done(_) => KIND_DONE,
            Frame::Error { .. } => KIND_ERROR,
            Frame::Ping { .. } => KIND_PING,
            Frame::Pong { .. } => KIND_PONG,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame of {len} bytes exceeds the {max} byte limit")]
    FrameTooLarge { len: usize, max: usize },
    #[error("unknown frame kind 0x{0:02x}")]
    UnknownKind(u8),
    #[error("frame payload truncated")]
    Truncated,
    #[error("{0} trailing bytes after frame payload")]
    TrailingBytes(usize),
    #[error("string is not valid UTF-8")]
    InvalidUtf8,
    #[error("empty frame")]
    Empty,
}

fn put_str(dst: &mut BytesMut, s: &str) {
    dst.put_u32_le(s.len() as u32);
    dst.put_slice(s.as_bytes());
}

fn encode_payload(frame: &Frame, dst: &mut BytesMut) {
    match frame {
        Frame::Submit(s) => {
            dst.put_u64_le(s.request_id);
            dst.put_u32_le(s.prompt_tokens);
            dst.put_u32_le(s.max_tokens);
            dst.put_f32_le(s.temperature);
            dst.put_f32_le(s.top_p);
            dst.put_u64_le(s.seed);
            put_str(dst, &s.prompt);
        }
        Frame::Token { request_id, seq, text } => {
            dst.put_u64_le(*request_id);
            dst.put_u32_le(*seq);
            put_str(dst, text);
        }
        Frame::Done(d) => {
            dst.put_u64_le(d.request_id);
            dst.put_u32_le(d.total_tokens);
            dst.put_u64_le(d.queue_ns);
            dst.put_u64_le(d.first_token_ns);
            dst.put_u64_le(d.inference_ns);
        }
        Frame::Error { request_id, code, message } => {
            dst.put_u64_le(*request_id);
            dst.put_u16_le(*code);
            put_str(dst, message);
        }
        Frame::Ping { nonce } | Frame::Pong { nonce } => dst.put_u64_le(*nonce),
    }
}

/// Appends the encoded frame to `dst`.
pub fn encode_frame(frame: &Frame, dst: &mut BytesMut) {
    let start = dst.len();
    dst.put_u32_le(0);
    dst.put_u8(frame.kind());
    encode_payload(frame, dst);
    let len = (dst.len() - start - 4) as u32;
    dst[start..start + 4].copy_from_slice(&len.to_le_bytes());
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn need(&self, n: usize) -> Result<(), ProtocolError> {
        if self.0.remaining() < n {
            Err(ProtocolError::Truncated)
        } else {
            Ok(())
        }
    }
    fn u16(&mut self) -> Result<u16, ProtocolError> {
        self.need(2)?;
        Ok(self.0.get_u16_le())
    }
    fn u32(&mut self) -> Result<u32, ProtocolError> {
        self.need(4)?;
        Ok(self.0.get_u32_le())
    }
    fn u64(&mut self) -> Result<u64, ProtocolError> {
        self.need(8)?;
        Ok(self.0.get_u64_le())
    }
    fn f32(&mut self) -> Result<f32, ProtocolError> {
        self.need(4)?;
        Ok(self.0.get_f32_le())
    }
    fn string(&mut self) -> Result<String, ProtocolError> {
        let len = self.u32()? as usize;
        self.need(len)?;
        let (head, tail) = self.0.split_at(len);
        self.0 = tail;
        String::from_utf8(head.to_vec()).map_err(|_| ProtocolError::InvalidUtf8)
    }
}

/// Decodes one frame body (kind byte plus payload, without the length
/// prefix).
pub fn decode_body(body: &[u8]) -> Result<Frame, ProtocolError> {
    let (&kind, payload) = body.split_first().ok_or(ProtocolError::Empty)?;
    let mut r = Reader(payload);
    let frame = match kind {
        KIND_SUBMIT => Frame::Submit(SubmitFrame {
            request_id: r.u64()?,
            prompt_tokens: r.u32()?,
            max_tokens: r.u32()?,
            temperature: r.f32()?,
            top_p: r.f32()?,
            seed: r.u64()?,
            prompt: r.string()?,
        }),
        KIND_TOKEN => Frame::Token { request_id: r.u64()?, seq: r.u32()?, text: r.string()? },
        KIND_DONE => Frame::Done(DoneFrame {
            request_id: r.u64()?,
            total_tokens: r.u32()?,
            queue_ns: r.u64()?,
            first_token_ns: r.u64()?,
            inference_ns: r.u64()?,
        }),
        KIND_ERROR => Frame::Error { request_id: r.u64()?, code: r.u16()?, message: r.string()? },
        KIND_PING => Frame::Ping { nonce: r.u64()? },
        KIND_PONG => Frame::Pong { nonce: r.u64()? },
        other => return Err(ProtocolError::UnknownKind(other)),
    };
    if !r.0.is_empty() {
        return Err(ProtocolError::TrailingBytes(r.0.len()));
    }
    Ok(frame)
}

/// `tokio_util` codec for [`Frame`]s.
#[derive(Debug, Clone)]
pub struct FrameCodec {
    max_frame_len: usize,
}

impl FrameCodec {
    pub fn new() -> Self {
        Self { max_frame_len: MAX_FRAME_LEN }
    }

    pub fn with_max_frame_len(max_frame_len: usize) -> Self {
        Self { max_frame_len }
    }
}

impl Default for FrameCodec {
    fn default() -> Self {
        Self::new()
    }
}

impl Decoder for FrameCodec {
    type Item = Frame;
    type Error = ProtocolError;

    fn decode(&mut self, src: &mut BytesMut) -> Result<Option<Frame>, ProtocolError> {
        if src.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_le_bytes([src[0], src[1], src[2], src[3]]) as usize;
        if len > self.max_frame_len {
            return Err(ProtocolError::FrameTooLarge { len, max: self.max_frame_len });
        }
        if src.len() < 4 + len {
            src.reserve(4 + len - src.len());
            return Ok(None);
        }
        src.advance(4);
        let body = src.split_to(len);
        decode_body(&body).map(Some)
    }
}

impl Encoder<Frame> for FrameCodec {
    type Error = ProtocolError;

    fn encode(&mut self, frame: Frame, dst: &mut BytesMut) -> Result<(), ProtocolError> {
        let start = dst.len();
        encode_frame(&frame, dst);
        let len = dst.len() - start - 4;
        if len > self.max_frame_len {
            dst.truncate(start);
            return Err(ProtocolError::FrameTooLarge { len, max: self.max_frame_len });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ping_layout_is_bit_exact() {
        let mut buf = BytesMut::new();
        encode_frame(&Frame::Ping { nonce: 0x0102030405060708 }, &mut buf);
        assert_eq!(&buf[..], &[9, 0, 0, 0, KIND_PING, 8, 7, 6, 5, 4, 3, 2, 1]);
    }

    #[test]
    fn token_layout_is_bit_exact() {
        let mut buf = BytesMut::new();
        encode_frame(&Frame::Token { request_id: 7, seq: 2, text: "hi".into() }, &mut buf);
        let expected: Vec<u8> = [
            &19u32.to_le_bytes()[..],
            &[KIND_TOKEN],
            &7u64.to_le_bytes(),
            &2u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            b"hi",
        ]
        .concat();
        assert_eq!(&buf[..], &expected[..]);
    }

    #[test]
    fn decoder_waits_for_complete_frame() {
        let mut full = BytesMut::new();
        encode_frame(&Frame::Pong { nonce: 9 }, &mut full);
        let mut codec = FrameCodec::new();
        let mut partial = BytesMut::from(&full[..6]);
        assert!(codec.decode(&mut partial).unwrap().is_none());
        partial.extend_from_slice(&full[6..]);
        assert_eq!(codec.decode(&mut partial).unwrap(), Some(Frame::Pong { nonce: 9 }));
        assert!(partial.is_empty());
    }

    #[test]
    fn rejects_oversized_and_unknown() {
        let mut codec = FrameCodec::with_max_frame_len(8);
        let mut buf = BytesMut::from(&100u32.to_le_bytes()[..]);
        assert!(matches!(codec.decode(&mut buf), Err(ProtocolError::FrameTooLarge { .. })));

        let mut codec = FrameCodec::new();
        let mut buf = BytesMut::from(&[1, 0, 0, 0, 0x7f][..]);
        assert!(matches!(codec.decode(&mut buf), Err(ProtocolError::UnknownKind(0x7f))));

        let mut buf = BytesMut::from(&[3, 0, 0, 0, KIND_PING, 1, 2][..]);
        assert!(matches!(codec.decode(&mut buf), Err(ProtocolError::Truncated)));
    }

    #[test]
    fn rejects_bad_utf8() {
        let mut body = vec![KIND_ERROR];
        body.extend_from_slice(&1u64.to_le_bytes());
        body.extend_from_slice(&2u16.to_le_bytes());
        body.extend_from_slice(&2u32.to_le_bytes());
        body.extend_from_slice(&[0xff, 0xfe]);
        assert!(matches!(decode_body(&body), Err(ProtocolError::InvalidUtf8)));
    }

    fn any_frame() -> impl Strategy<Value = Frame> {
        prop_oneof![
            (any::<u64>(), any::<u32>(), any::<u32>(), any::<f32>(), any::<f32>(), any::<u64>(), ".{0,40}")
                .prop_filter("NaN breaks equality", |t| !t.3.is_nan() && !t.4.is_nan())
                .prop_map(|(request_id, prompt_tokens, max_tokens, temperature, top_p, seed, prompt)| {
                    Frame::Submit(SubmitFrame {
                        request_id,
                        prompt_tokens,
                        max_tokens,
                        temperature,
                        top_p,
                        seed,
                        prompt,
                    })
                }),
            (any::<u64>(), any::<u32>(), ".{0,20}").prop_map(|(request_id, seq, text)| Frame::Token {
                request_id,
                seq,
                text
            }),
            (any::<u64>(), any::<u32>(), any::<u64>(), any::<u64>(), any::<u64>()).prop_map(
                |(request_id, total_tokens, queue_ns, first_token_ns, inference_ns)| Frame::Done(DoneFrame {
                    request_id,
                    total_tokens,
                    queue_ns,
                    first_token_ns,
                    inference_ns,
                })
            ),
            (any::<u64>(), any::<u16>(), ".{0,20}").prop_map(|(request_id, code, message)| Frame::Error {
                request_id,
                code,
                message
            }),
            any::<u64>().prop_map(|nonce| Frame::Ping { nonce }),
            any::<u64>().prop_map(|nonce| Frame::Pong { nonce }),
        ]
    }

    proptest! {
        #[test]
        fn stream_of_frames_round_trips(frames in prop::collection::vec(any_frame(), 1..20), cut in 1usize..64) {
            let mut wire = BytesMut::new();
            for f in &frames {
                encode_frame(f, &mut wire);
            }
            // Feed the decoder in arbitrary chunk sizes.
            let mut codec = FrameCodec::new();
            let mut buf = BytesMut::new();
            let mut out = Vec::new();
            for chunk in wire.chunks(cut) {
                buf.extend_from_slice(chunk);
                while let Some(f) = codec.decode(&mut buf).unwrap() {
                    out.push(f);
                }
            }
            prop_assert_eq!(out, frames);
        }
    }
}
