// SPDX-License-Identifier: Apache-2.0

//! Wire protocol and link model between the two migration managers.
//!
//! Frames are length-prefixed: `[u32 length LE][u8 type][body]` where
//! `length = |body| + 1`. Page-bearing frames carry
//! `[u64 page_index][16-byte IV][ciphertext]`; the remaining sealed payloads
//! (key bundle, metadata buffer) travel as opaque sealed-bundle bytes.
//!
//! Two link flavors speak this format: [`SimLink`] charges serialization and
//! latency to a virtual clock for reproducible experiments, and
//! [`FrameStream`] runs the identical byte layout over a real stream socket.

use std::collections::VecDeque;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seal::SealedPage;

/// Upper bound on a frame body accepted from an untrusted stream.
pub const MAX_FRAME_BODY: u32 = 256 * 1024 * 1024;

/// Protocol version advertised in the HELLO body.
pub const PROTOCOL_VERSION: u8 = 0x01;

const TYPE_HELLO: u8 = 0x01;
const TYPE_KEY_BUNDLE: u8 = 0x02;
const TYPE_MBUFF: u8 = 0x03;
const TYPE_PAGE: u8 = 0x04;
const TYPE_PAGE_REQUEST: u8 = 0x05;
const TYPE_PAGE_RESPONSE: u8 = 0x06;
const TYPE_DONE: u8 = 0x07;
const TYPE_ACK: u8 = 0x08;
const TYPE_ABORT: u8 = 0x09;

#[derive(Debug, Error)]
pub enum TransportError {
    /// Input ends before a complete frame; feed more bytes and retry.
    #[error("need more bytes to decode a frame")]
    NeedMoreBytes,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("frame body of {0} bytes exceeds the {MAX_FRAME_BODY}-byte limit")]
    FrameTooLarge(u64),
    #[error("transport failure: {0}")]
    Failure(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One protocol message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Hello { payload: Vec<u8> },
    KeyBundle { bundle: Vec<u8> },
    MBuff { blob: Vec<u8> },
    Page { page: SealedPage },
    PageRequest { index: u64 },
    PageResponse { page: SealedPage },
    Done,
    Ack { index: u64 },
    Abort { reason: Vec<u8> },
}

impl Frame {
    pub fn type_byte(&self) -> u8 {
        match self {
            Frame::Hello { .. } => TYPE_HELLO,
            Frame::KeyBundle { .. } => TYPE_KEY_BUNDLE,
            Frame::MBuff { .. } => TYPE_MBUFF,
            Frame::Page { .. } => TYPE_PAGE,
            Frame::PageRequest { .. } => TYPE_PAGE_REQUEST,
            Frame::PageResponse { .. } => TYPE_PAGE_RESPONSE,
            Frame::Done => TYPE_DONE,
            Frame::Ack { .. } => TYPE_ACK,
            Frame::Abort { .. } => TYPE_ABORT,
        }
    }

    fn body_len(&self) -> usize {
        match self {
            Frame::Hello { payload } => payload.len(),
            Frame::KeyBundle { bundle } => bundle.len(),
            Frame::MBuff { blob } => blob.len(),
            Frame::Page { page } | Frame::PageResponse { page } => 8 + 16 + page.ciphertext.len(),
            Frame::PageRequest { .. } => 8,
            Frame::Done => 0,
            Frame::Ack { .. } => 8,
            Frame::Abort { reason } => reason.len(),
        }
    }

    /// Total encoded size on the wire, including the length prefix and type.
    pub fn wire_len(&self) -> u64 {
        4 + 1 + self.body_len() as u64
    }

    /// True for frames that jump the background queue on a simulated link.
    pub fn is_priority(&self) -> bool {
        matches!(
            self,
            Frame::PageRequest { .. } | Frame::PageResponse { .. } | Frame::Abort { .. }
        )
    }
}

fn put_sealed_page(out: &mut Vec<u8>, page: &SealedPage) {
    out.extend_from_slice(&page.page_index.to_le_bytes());
    out.extend_from_slice(&page.iv);
    out.extend_from_slice(&page.ciphertext);
}

fn take_sealed_page(body: &[u8]) -> Result<SealedPage, TransportError> {
    if body.len() < 8 + 16 {
        return Err(TransportError::Protocol(
            "page frame body shorter than index + IV".into(),
        ));
    }
    let page_index = u64::from_le_bytes(body[..8].try_into().unwrap());
    let mut iv = [0u8; 16];
    iv.copy_from_slice(&body[8..24]);
    Ok(SealedPage {
        page_index,
        iv,
        ciphertext: body[24..].to_vec(),
    })
}

/// Encodes a frame into its wire representation.
pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let body_len = frame.body_len();
    let mut out = Vec::with_capacity(4 + 1 + body_len);
    out.extend_from_slice(&(body_len as u32 + 1).to_le_bytes());
    out.push(frame.type_byte());
    match frame {
        Frame::Hello { payload } => out.extend_from_slice(payload),
        Frame::KeyBundle { bundle } => out.extend_from_slice(bundle),
        Frame::MBuff { blob } => out.extend_from_slice(blob),
        Frame::Page { page } | Frame::PageResponse { page } => put_sealed_page(&mut out, page),
        Frame::PageRequest { index } => out.extend_from_slice(&index.to_le_bytes()),
        Frame::Done => {}
        Frame::Ack { index } => out.extend_from_slice(&index.to_le_bytes()),
        Frame::Abort { reason } => out.extend_from_slice(reason),
    }
    out
}

/// Decodes one frame from the front of `buf`, returning it and the number of
/// bytes consumed. Truncated input yields [`TransportError::NeedMoreBytes`];
/// malformed input yields a protocol error. Never panics.
pub fn decode_frame(buf: &[u8]) -> Result<(Frame, usize), TransportError> {
    if buf.len() < 4 {
        return Err(TransportError::NeedMoreBytes);
    }
    let length = u32::from_le_bytes(buf[..4].try_into().unwrap());
    if length == 0 {
        return Err(TransportError::Protocol("zero-length frame".into()));
    }
    if length - 1 > MAX_FRAME_BODY {
        return Err(TransportError::FrameTooLarge(u64::from(length - 1)));
    }
    let total = 4 + length as usize;
    if buf.len() < total {
        return Err(TransportError::NeedMoreBytes);
    }
    let ty = buf[4];
    let body = &buf[5..total];
    let frame = match ty {
        TYPE_HELLO => Frame::Hello {
            payload: body.to_vec(),
        },
        TYPE_KEY_BUNDLE => Frame::KeyBundle {
            bundle: body.to_vec(),
        },
        TYPE_MBUFF => Frame::MBuff {
            blob: body.to_vec(),
        },
        TYPE_PAGE => Frame::Page {
            page: take_sealed_page(body)?,
        },
        TYPE_PAGE_REQUEST => {
            if body.len() != 8 {
                return Err(TransportError::Protocol(
                    "page request body must be exactly 8 bytes".into(),
                ));
            }
            Frame::PageRequest {
                index: u64::from_le_bytes(body.try_into().unwrap()),
            }
        }
        TYPE_PAGE_RESPONSE => Frame::PageResponse {
            page: take_sealed_page(body)?,
        },
        TYPE_DONE => {
            if !body.is_empty() {
                return Err(TransportError::Protocol("DONE carries no body".into()));
            }
            Frame::Done
        }
        TYPE_ACK => {
            if body.len() != 8 {
                return Err(TransportError::Protocol(
                    "ack body must be exactly 8 bytes".into(),
                ));
            }
            Frame::Ack {
                index: u64::from_le_bytes(body.try_into().unwrap()),
            }
        }
        TYPE_ABORT => Frame::Abort {
            reason: body.to_vec(),
        },
        other => {
            return Err(TransportError::Protocol(format!(
                "unknown frame type {other:#04x}"
            )))
        }
    };
    Ok((frame, total))
}

/// Link mode selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkMode {
    Real,
    Simulated,
}

/// Bandwidth/latency description of the migration link.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinkModel {
    /// Payload rate in bytes per second.
    pub bandwidth_bytes_per_sec: u64,
    pub one_way_latency_ns: u64,
    pub mode: LinkMode,
}

impl Default for LinkModel {
    /// Gigabit link: 125 MB/s, 100 us one-way latency.
    fn default() -> Self {
        Self {
            bandwidth_bytes_per_sec: 125_000_000,
            one_way_latency_ns: 100_000,
            mode: LinkMode::Simulated,
        }
    }
}

/// Transfer direction over the duplex link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    SourceToDest,
    DestToSource,
}

#[derive(Debug, Default)]
struct DirState {
    /// Virtual time at which the serializer becomes free.
    next_free_ns: u64,
    /// Frames in flight, ordered by arrival time (FIFO by construction).
    in_flight: VecDeque<(u64, Frame)>,
    bytes_sent: u64,
    frames_sent: u64,
}

/// Simulated duplex link: per-direction FIFO with serialization time
/// `wire_len / bandwidth` plus a fixed one-way latency, all charged to the
/// caller's virtual clock.
#[derive(Debug)]
pub struct SimLink {
    model: LinkModel,
    fwd: DirState,
    rev: DirState,
    closed: bool,
    fail_at_ns: Option<u64>,
}

impl SimLink {
    pub fn new(model: LinkModel) -> Self {
        Self {
            model,
            fwd: DirState::default(),
            rev: DirState::default(),
            closed: false,
            fail_at_ns: None,
        }
    }

    /// Fault injection: transmissions at or after `t_ns` fail.
    pub fn set_fail_at(&mut self, t_ns: u64) {
        self.fail_at_ns = Some(t_ns);
    }

    pub fn model(&self) -> &LinkModel {
        &self.model
    }

    fn dir_mut(&mut self, dir: Direction) -> &mut DirState {
        match dir {
            Direction::SourceToDest => &mut self.fwd,
            Direction::DestToSource => &mut self.rev,
        }
    }

    fn dir(&self, dir: Direction) -> &DirState {
        match dir {
            Direction::SourceToDest => &self.fwd,
            Direction::DestToSource => &self.rev,
        }
    }

    /// Time to push `bytes` through the serializer.
    pub fn serialization_ns(&self, bytes: u64) -> u64 {
        let num = (bytes as u128) * 1_000_000_000u128;
        let den = self.model.bandwidth_bytes_per_sec as u128;
        num.div_ceil(den) as u64
    }

    /// Accounts for the transmission of `wire_len` bytes at virtual time
    /// `now_ns` without holding the frame: returns `(depart, arrive)` times.
    /// Engine code that keeps frames in its own event queue uses this form.
    pub fn charge(
        &mut self,
        dir: Direction,
        now_ns: u64,
        wire_len: u64,
    ) -> Result<(u64, u64), TransportError> {
        if self.closed {
            return Err(TransportError::Failure("peer closed".into()));
        }
        if self.fail_at_ns.is_some_and(|t| now_ns >= t) {
            return Err(TransportError::Failure("link lost".into()));
        }
        let ser = self.serialization_ns(wire_len);
        let latency = self.model.one_way_latency_ns;
        let state = self.dir_mut(dir);
        let start = state.next_free_ns.max(now_ns);
        let depart = start + ser;
        state.next_free_ns = depart;
        state.bytes_sent += wire_len;
        state.frames_sent += 1;
        Ok((depart, depart + latency))
    }

    /// Queues `frame` for transmission at virtual time `now_ns`, returning its
    /// arrival time on the far side. Frames within one direction arrive in
    /// transmit order.
    pub fn transmit(
        &mut self,
        dir: Direction,
        now_ns: u64,
        frame: Frame,
    ) -> Result<u64, TransportError> {
        let (_, arrive) = self.charge(dir, now_ns, frame.wire_len())?;
        self.dir_mut(dir).in_flight.push_back((arrive, frame));
        Ok(arrive)
    }

    /// Virtual time at which the serializer in `dir` is free again.
    pub fn serializer_free_ns(&self, dir: Direction) -> u64 {
        self.dir(dir).next_free_ns
    }

    /// Pops the next frame whose arrival time is `<= now_ns`.
    pub fn poll_arrival(&mut self, dir: Direction, now_ns: u64) -> Option<(u64, Frame)> {
        let state = self.dir_mut(dir);
        match state.in_flight.front() {
            Some((arrive, _)) if *arrive <= now_ns => state.in_flight.pop_front(),
            _ => None,
        }
    }

    /// Arrival time of the next in-flight frame in `dir`, if any.
    pub fn next_arrival_ns(&self, dir: Direction) -> Option<u64> {
        self.dir(dir).in_flight.front().map(|(t, _)| *t)
    }

    pub fn bytes_sent(&self, dir: Direction) -> u64 {
        self.dir(dir).bytes_sent
    }

    pub fn total_bytes(&self) -> u64 {
        self.fwd.bytes_sent + self.rev.bytes_sent
    }

    /// Marks the peer as gone; subsequent transmits fail.
    pub fn close(&mut self) {
        self.closed = true;
    }
}

/// Blocking framed transport over a real byte stream (TCP, Unix socket).
pub struct FrameStream<S> {
    stream: S,
    rx_buf: Vec<u8>,
}

impl<S: Read + Write> FrameStream<S> {
    pub fn new(stream: S) -> Self {
        Self {
            stream,
            rx_buf: Vec::new(),
        }
    }

    pub fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        let bytes = encode_frame(frame);
        self.stream
            .write_all(&bytes)
            .map_err(|e| TransportError::Failure(format!("send failed: {e}")))?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Frame, TransportError> {
        loop {
            match decode_frame(&self.rx_buf) {
                Ok((frame, used)) => {
                    self.rx_buf.drain(..used);
                    return Ok(frame);
                }
                Err(TransportError::NeedMoreBytes) => {
                    let mut chunk = [0u8; 64 * 1024];
                    let n = self
                        .stream
                        .read(&mut chunk)
                        .map_err(|e| TransportError::Failure(format!("recv failed: {e}")))?;
                    if n == 0 {
                        return Err(TransportError::Failure("peer closed".into()));
                    }
                    self.rx_buf.extend_from_slice(&chunk[..n]);
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hello_empty_body_wire_image() {
        let frame = Frame::Hello { payload: vec![] };
        assert_eq!(encode_frame(&frame), vec![0x01, 0x00, 0x00, 0x00, 0x01]);
    }

    #[test]
    fn page_frame_round_trip() {
        // 4144-byte sealed body: 16-byte IV + 4128-byte ciphertext.
        let page = SealedPage {
            page_index: 42,
            iv: [7u8; 16],
            ciphertext: vec![0xAB; 4128],
        };
        let frame = Frame::Page { page };
        let bytes = encode_frame(&frame);
        assert_eq!(bytes.len() as u64, frame.wire_len());
        let (back, used) = decode_frame(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, frame);
    }

    #[test]
    fn truncated_input_needs_more_bytes() {
        let bytes = encode_frame(&Frame::Ack { index: 9 });
        for cut in 0..bytes.len() {
            match decode_frame(&bytes[..cut]) {
                Err(TransportError::NeedMoreBytes) => {}
                other => panic!("cut at {cut}: expected NeedMoreBytes, got {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_type_rejected() {
        let bytes = vec![0x01, 0x00, 0x00, 0x00, 0x7F];
        assert!(matches!(
            decode_frame(&bytes),
            Err(TransportError::Protocol(_))
        ));
    }

    #[test]
    fn simulated_fifo_and_clock_accounting() {
        let model = LinkModel {
            bandwidth_bytes_per_sec: 1_000_000,
            one_way_latency_ns: 50_000,
            mode: LinkMode::Simulated,
        };
        let mut link = SimLink::new(model);
        let frame = Frame::Ack { index: 1 };
        let ser = link.serialization_ns(frame.wire_len());
        let n = 64u64;
        let mut last = 0;
        for _ in 0..n {
            last = link
                .transmit(Direction::SourceToDest, 0, frame.clone())
                .unwrap();
        }
        // Pipelined: N serializations plus one latency.
        let expected = n * ser + model.one_way_latency_ns;
        assert_eq!(last, expected);
        // FIFO arrival order.
        let mut prev = 0;
        while let Some((t, _)) = link.poll_arrival(Direction::SourceToDest, u64::MAX) {
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn closed_link_fails() {
        let mut link = SimLink::new(LinkModel::default());
        link.close();
        assert!(matches!(
            link.transmit(Direction::SourceToDest, 0, Frame::Done),
            Err(TransportError::Failure(_))
        ));
    }
}
