//! `ARIS1` line protocol between the inference host and the PLC.
//!
//! ```text
//! packet = "ARIS1 F=" u64 " T=" u64 ";" [ tuple *( ";" tuple ) ] "\n"
//! tuple  = paddle "," flick_at "," ton "," fragment
//! ack    = "ARIS1 ACK F=" u64 ( " OK" | " PARTIAL=" u32 ) "\n"
//!        | "ARIS1 ACK MALFORMED\n"
//! ```
//!
//! Numbers are unsigned decimal without sign or leading zeros, so every
//! packet has exactly one encoding. Paddles are 1-based, at most
//! [`MAX_PADDLE`]. Times are milliseconds.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::control::{
    ActuationEvent, EnqueueOutcome, FsmEvent, FsmState, PaddleCommand, RejectReason, Scheduler,
};

pub const MAGIC: &str = "ARIS1";
pub const MAX_PADDLE: u16 = 64;
/// Longest accepted line, newline included.
pub const MAX_LINE_BYTES: usize = 8192;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FramePacket {
    pub frame_id: u64,
    pub capture_ts_ms: u64,
    pub commands: Vec<PaddleCommand>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AckStatus {
    Accepted,
    PartiallyRejected(u32),
    Malformed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ack {
    /// `None` only for [`AckStatus::Malformed`].
    pub frame_id: Option<u64>,
    pub status: AckStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("line is not newline-terminated")]
    Framing,
    #[error("line exceeds {MAX_LINE_BYTES} bytes")]
    TooLong,
    #[error("line contains non-ASCII or control bytes")]
    BadByte,
    #[error("missing ARIS1 magic")]
    BadMagic,
    #[error("malformed header")]
    BadHeader,
    #[error("field `{0}` is not a canonical unsigned integer")]
    NonNumeric(&'static str),
    #[error("command tuple must have four fields")]
    BadTuple,
    #[error("paddle {0} outside 1..=64")]
    PaddleOutOfRange(u64),
    #[error("frame id {got} does not follow {last}")]
    NonMonotone { last: u64, got: u64 },
}

impl ProtocolError {
    pub fn reason(&self) -> &'static str {
        match self {
            Self::Framing => "framing",
            Self::TooLong => "too_long",
            Self::BadByte => "bad_byte",
            Self::BadMagic => "bad_magic",
            Self::BadHeader => "bad_header",
            Self::NonNumeric(_) => "non_numeric",
            Self::BadTuple => "bad_tuple",
            Self::PaddleOutOfRange(_) => "paddle_range",
            Self::NonMonotone { .. } => "non_monotone",
        }
    }
}

pub fn encode(p: &FramePacket) -> String {
    let mut s = String::with_capacity(24 + 32 * p.commands.len());
    let _ = write!(s, "{MAGIC} F={} T={};", p.frame_id, p.capture_ts_ms);
    for (i, c) in p.commands.iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        let _ = write!(s, "{},{},{},{}", c.paddle, c.flick_at, c.ton_ms, c.fragment_id);
    }
    s.push('\n');
    s
}

fn parse_num<T: TryFrom<u64>>(field: &'static str, s: &[u8]) -> Result<T, ProtocolError> {
    let err = ProtocolError::NonNumeric(field);
    if s.is_empty() || s.len() > 20 || (s.len() > 1 && s[0] == b'0') {
        return Err(err);
    }
    let mut v: u64 = 0;
    for &b in s {
        if !b.is_ascii_digit() {
            return Err(err);
        }
        v = v.checked_mul(10).and_then(|v| v.checked_add(u64::from(b - b'0'))).ok_or(err)?;
    }
    T::try_from(v).map_err(|_| err)
}

fn strip<'a>(s: &'a [u8], prefix: &[u8]) -> Option<&'a [u8]> {
    s.strip_prefix(prefix)
}

/// Decode one line, newline included, without session context.
pub fn decode(line: &[u8]) -> Result<FramePacket, ProtocolError> {
    if line.len() > MAX_LINE_BYTES {
        return Err(ProtocolError::TooLong);
    }
    let body = line.strip_suffix(b"\n").ok_or(ProtocolError::Framing)?;
    if body.iter().any(|&b| !(0x20..0x7f).contains(&b)) {
        return Err(ProtocolError::BadByte);
    }
    let rest = strip(body, MAGIC.as_bytes()).ok_or(ProtocolError::BadMagic)?;
    let rest = strip(rest, b" F=").ok_or(ProtocolError::BadHeader)?;
    let sp = rest.iter().position(|&b| b == b' ').ok_or(ProtocolError::BadHeader)?;
    let frame_id = parse_num("frame_id", &rest[..sp])?;
    let rest = strip(&rest[sp..], b" T=").ok_or(ProtocolError::BadHeader)?;
    let semi = rest.iter().position(|&b| b == b';').ok_or(ProtocolError::BadHeader)?;
    let capture_ts_ms = parse_num("capture_ts", &rest[..semi])?;
    let tuples = &rest[semi + 1..];
    let mut commands = Vec::new();
    if !tuples.is_empty() {
        for t in tuples.split(|&b| b == b';') {
            let f: Vec<&[u8]> = t.split(|&b| b == b',').collect();
            if f.len() != 4 {
                return Err(ProtocolError::BadTuple);
            }
            let paddle: u64 = parse_num("paddle", f[0])?;
            if paddle == 0 || paddle > u64::from(MAX_PADDLE) {
                return Err(ProtocolError::PaddleOutOfRange(paddle));
            }
            commands.push(PaddleCommand {
                paddle: paddle as u16,
                flick_at: parse_num("flick_at", f[1])?,
                ton_ms: parse_num("ton", f[2])?,
                fragment_id: parse_num("fragment", f[3])?,
            });
        }
    }
    Ok(FramePacket { frame_id, capture_ts_ms, commands })
}

/// Decode and require `frame_id` to exceed the last accepted one.
pub fn decode_after(line: &[u8], last: Option<u64>) -> Result<FramePacket, ProtocolError> {
    let p = decode(line)?;
    match last {
        Some(last) if p.frame_id <= last => Err(ProtocolError::NonMonotone { last, got: p.frame_id }),
        _ => Ok(p),
    }
}

pub fn encode_ack(a: &Ack) -> String {
    let mut s = String::new();
    match (a.status, a.frame_id) {
        (AckStatus::Accepted, Some(f)) => {
            let _ = writeln!(s, "{MAGIC} ACK F={f} OK");
        }
        (AckStatus::PartiallyRejected(n), Some(f)) => {
            let _ = writeln!(s, "{MAGIC} ACK F={f} PARTIAL={n}");
        }
        _ => {
            let _ = writeln!(s, "{MAGIC} ACK MALFORMED");
        }
    }
    s
}

pub fn decode_ack(line: &[u8]) -> Result<Ack, ProtocolError> {
    let body = line.strip_suffix(b"\n").ok_or(ProtocolError::Framing)?;
    let rest = strip(body, MAGIC.as_bytes()).ok_or(ProtocolError::BadMagic)?;
    let rest = strip(rest, b" ACK ").ok_or(ProtocolError::BadHeader)?;
    if rest == b"MALFORMED" {
        return Ok(Ack { frame_id: None, status: AckStatus::Malformed });
    }
    let rest = strip(rest, b"F=").ok_or(ProtocolError::BadHeader)?;
    let sp = rest.iter().position(|&b| b == b' ').ok_or(ProtocolError::BadHeader)?;
    let frame_id = Some(parse_num("frame_id", &rest[..sp])?);
    let tail = &rest[sp + 1..];
    let status = if tail == b"OK" {
        AckStatus::Accepted
    } else if let Some(n) = strip(tail, b"PARTIAL=") {
        AckStatus::PartiallyRejected(parse_num("partial", n)?)
    } else {
        return Err(ProtocolError::BadHeader);
    };
    Ok(Ack { frame_id, status })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BreachReason {
    Protocol(ProtocolError),
    Rejected(RejectReason),
    TransportLost,
}

impl BreachReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Protocol(e) => e.reason(),
            Self::Rejected(r) => r.as_str(),
            Self::TransportLost => "transport_lost",
        }
    }
}

/// One logged breach: `ts,frame_id,reason,raw_line`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BreachRecord {
    pub ts: u64,
    pub frame_id: Option<u64>,
    pub reason: BreachReason,
    pub raw_line: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineOutcome {
    pub ack: Ack,
    pub packet: Option<FramePacket>,
    /// Per-command scheduler verdicts, in packet order.
    pub outcomes: Vec<EnqueueOutcome>,
}

/// Server side of a session: decode, drive the FSM, feed the scheduler and
/// log breaches. Pure; the caller owns the transport and the clock.
#[derive(Clone, Debug)]
pub struct PlcSession {
    scheduler: Scheduler,
    last_frame_id: Option<u64>,
    breaches: Vec<BreachRecord>,
}

impl PlcSession {
    pub fn new(scheduler: Scheduler) -> Self {
        Self { scheduler, last_frame_id: None, breaches: Vec::new() }
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn breaches(&self) -> &[BreachRecord] {
        &self.breaches
    }

    pub fn take_breaches(&mut self) -> Vec<BreachRecord> {
        core::mem::take(&mut self.breaches)
    }

    pub fn breach_count(&self) -> u64 {
        self.scheduler.counters().breaches
    }

    pub fn last_frame_id(&self) -> Option<u64> {
        self.last_frame_id
    }

    /// A new client starts its own frame numbering. Queued commands stay.
    pub fn reset_connection(&mut self) {
        self.last_frame_id = None;
        self.scheduler.transition(FsmEvent::TransportLost);
    }

    fn log(&mut self, ts: u64, frame_id: Option<u64>, reason: BreachReason, raw: &[u8]) {
        self.breaches.push(BreachRecord {
            ts,
            frame_id,
            reason,
            raw_line: String::from_utf8_lossy(raw).trim_end_matches('\n').into(),
        });
    }

    /// Handle one received line at time `now`.
    pub fn handle_line(&mut self, line: &[u8], now: u64) -> LineOutcome {
        self.scheduler.transition(FsmEvent::DataArrived);
        self.scheduler.transition(FsmEvent::LineComplete);
        let packet = match decode_after(line, self.last_frame_id) {
            Ok(p) => p,
            Err(e) => {
                self.scheduler.transition(FsmEvent::ParseFailed);
                self.scheduler.record_breach();
                self.log(now, None, BreachReason::Protocol(e), line);
                return LineOutcome {
                    ack: Ack { frame_id: None, status: AckStatus::Malformed },
                    packet: None,
                    outcomes: Vec::new(),
                };
            }
        };
        if self.scheduler.transition(FsmEvent::ParseOk) == FsmState::Idle {
            // recovered from a fault; run this packet through the normal path
            self.scheduler.transition(FsmEvent::DataArrived);
            self.scheduler.transition(FsmEvent::LineComplete);
            self.scheduler.transition(FsmEvent::ParseOk);
        }
        debug_assert_eq!(self.scheduler.state(), FsmState::Scheduling);
        self.last_frame_id = Some(packet.frame_id);
        let mut outcomes = Vec::with_capacity(packet.commands.len());
        let mut rejected = 0u32;
        for &c in &packet.commands {
            let o = self.scheduler.enqueue(c, now);
            if let EnqueueOutcome::Rejected(r) = o {
                rejected += 1;
                let mut raw = String::new();
                let _ = write!(raw, "{},{},{},{}", c.paddle, c.flick_at, c.ton_ms, c.fragment_id);
                self.log(now, Some(packet.frame_id), BreachReason::Rejected(r), raw.as_bytes());
            }
            outcomes.push(o);
        }
        self.scheduler.transition(FsmEvent::Scheduled);
        let status = if rejected == 0 { AckStatus::Accepted } else { AckStatus::PartiallyRejected(rejected) };
        LineOutcome { ack: Ack { frame_id: Some(packet.frame_id), status }, packet: Some(packet), outcomes }
    }

    /// The byte stream ended with `partial` unterminated bytes.
    pub fn transport_lost(&mut self, partial: &[u8], now: u64) {
        self.scheduler.record_breach();
        self.log(now, None, BreachReason::TransportLost, partial);
        self.scheduler.transition(FsmEvent::TransportLost);
    }

    pub fn tick(&mut self, now: u64) -> Vec<ActuationEvent> {
        self.scheduler.tick(now)
    }

    pub fn drain(&mut self) -> Vec<ActuationEvent> {
        self.scheduler.drain()
    }
}
