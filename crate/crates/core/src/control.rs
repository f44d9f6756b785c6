//! Sort control: which paddle fires, when, and the PLC-side scheduler that
//! turns commands into non-overlapping paddle actuations.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::geometry::{BeltCalibration, MM_PER_INCH};

pub const STANDARD_GRAVITY: f64 = 9.806_65;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControlError {
    #[error("x = {0} px lies outside the belt")]
    OutsideBelt(f64),
    #[error("y = {0} px lies outside the frame")]
    OutsideFrame(f64),
    #[error("belt is stopped; flick time is undefined")]
    BeltStopped,
    #[error("invalid paddle layout: {0}")]
    Layout(&'static str),
}

/// Mechanical layout of the paddle sorter.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PaddleLayout {
    pub paddle_count: u16,
    pub pitch_mm: f64,
    pub actuate_ms: u32,
    pub return_ms: u32,
    /// Horizontal distance from the belt discharge edge to the strike line.
    pub standoff_from_belt_edge_mm: f64,
    /// Vertical drop from the belt surface to the strike point.
    pub drop_below_belt_mm: f64,
    /// Hold time used for new commands.
    pub default_ton_ms: u32,
}

impl Default for PaddleLayout {
    fn default() -> Self {
        Self {
            paddle_count: 64,
            pitch_mm: MM_PER_INCH,
            actuate_ms: 20,
            return_ms: 20,
            standoff_from_belt_edge_mm: 203.2,
            drop_below_belt_mm: 152.4,
            default_ton_ms: 20,
        }
    }
}

impl PaddleLayout {
    pub fn cycle_ms(&self) -> u32 {
        self.actuate_ms + self.return_ms
    }

    /// Maximum flicks a single paddle can make per second.
    pub fn max_flicks_per_second(&self) -> u32 {
        1000 / self.cycle_ms().max(1)
    }

    pub fn validate(&self, cal: &BeltCalibration) -> Result<(), ControlError> {
        if self.paddle_count == 0 {
            return Err(ControlError::Layout("paddle_count must be positive"));
        }
        if self.actuate_ms == 0 {
            return Err(ControlError::Layout("actuate_ms must be positive"));
        }
        if self.default_ton_ms < self.actuate_ms {
            return Err(ControlError::Layout("default_ton_ms must be at least actuate_ms"));
        }
        let span = f64::from(self.paddle_count) * self.pitch_mm;
        let belt = cal.belt_width_mm();
        if ((span - belt) / belt).abs() > 0.01 {
            return Err(ControlError::Layout("paddle span must match belt width within 1%"));
        }
        if !(self.drop_below_belt_mm >= 0.0) {
            return Err(ControlError::Layout("drop_below_belt_mm must be non-negative"));
        }
        Ok(())
    }

    pub fn px_per_paddle(&self, cal: &BeltCalibration) -> f64 {
        f64::from(cal.belt_width_px) / f64::from(self.paddle_count)
    }
}

/// Paddle (1-based) whose lane contains global column `x`.
///
/// Lanes are half-open: paddle `k + 1` covers `[k * w, (k + 1) * w)` with
/// `w = belt_width_px / paddle_count`.
pub fn paddle_for_x(x_global: f64, cal: &BeltCalibration, layout: &PaddleLayout) -> Result<u16, ControlError> {
    if !(0.0..f64::from(cal.belt_width_px)).contains(&x_global) {
        return Err(ControlError::OutsideBelt(x_global));
    }
    let k = libm::floor(x_global / layout.px_per_paddle(cal)) as u16 + 1;
    Ok(k.clamp(1, layout.paddle_count))
}

/// Constant terms of the flick-time sum.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct FlickTiming {
    /// Fall time from the belt edge to the strike point.
    pub t_to_hit_ms: f64,
    /// Empirical correction.
    pub t_offset_ms: f64,
}

impl FlickTiming {
    /// Free-fall time over the layout's drop height.
    pub fn from_layout(layout: &PaddleLayout) -> Self {
        let h_m = layout.drop_below_belt_mm / 1000.0;
        Self { t_to_hit_ms: libm::sqrt(2.0 * h_m / STANDARD_GRAVITY) * 1000.0, t_offset_ms: 0.0 }
    }
}

/// Horizontal distance a fragment leaving the belt at `speed_mps` covers in
/// `t_ms` (no drag).
pub fn horizontal_travel_mm(t_ms: f64, speed_mps: f64) -> f64 {
    t_ms * speed_mps
}

/// Belt distance from global row `y` to the discharge edge.
pub fn distance_to_belt_edge_mm(y_global: f64, cal: &BeltCalibration) -> f64 {
    cal.fov_to_belt_edge_mm + y_global / cal.px_per_mm
}

/// Absolute time at which the paddle should strike a fragment seen at row
/// `y_global` in the frame captured at `capture_ts_ms`:
/// capture time + time to the belt edge + fall time + offset.
pub fn flick_time(
    y_global: f64,
    capture_ts_ms: f64,
    cal: &BeltCalibration,
    timing: &FlickTiming,
) -> Result<f64, ControlError> {
    if !(0.0..=cal.frame_height_px()).contains(&y_global) {
        return Err(ControlError::OutsideFrame(y_global));
    }
    let v = cal.speed_mm_per_ms();
    if !(v > 0.0) {
        return Err(ControlError::BeltStopped);
    }
    let t_belt_edge = distance_to_belt_edge_mm(y_global, cal) / v;
    Ok(capture_ts_ms + t_belt_edge + timing.t_to_hit_ms + timing.t_offset_ms)
}

/// One scheduled actuation request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PaddleCommand {
    /// 1-based.
    pub paddle: u16,
    pub flick_at: u64,
    pub ton_ms: u32,
    pub fragment_id: u64,
}

/// A completed paddle actuation. `end` is when the hold ended; the paddle
/// is home again `return_ms` later.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActuationEvent {
    pub paddle: u16,
    pub start: u64,
    pub end: u64,
    /// Commands served by this actuation, in enqueue order.
    pub fragments: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RejectReason {
    /// `flick_at` was not in the future.
    Late,
    /// The scheduler was in [`FsmState::Fault`].
    Fault,
    /// Earlier than, and not overlapping, the tail of the paddle's queue.
    OutOfOrder,
    /// Paddle index outside the layout or hold shorter than the stroke.
    Invalid,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Late => "late",
            Self::Fault => "fault",
            Self::OutOfOrder => "out_of_order",
            Self::Invalid => "invalid",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Queued,
    /// Folded into the tail actuation by extending its hold.
    Merged,
    /// The paddle was still returning; start pushed back to when it is home.
    Deferred { by_ms: u64 },
    Rejected(RejectReason),
}

impl EnqueueOutcome {
    pub fn accepted(&self) -> bool {
        !matches!(self, Self::Rejected(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FsmState {
    Idle,
    Receiving,
    Parsing,
    Scheduling,
    Fault,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsmEvent {
    DataArrived,
    LineComplete,
    ParseOk,
    ParseFailed,
    Scheduled,
    TransportLost,
}

impl FsmState {
    /// Transition table. Anything not listed is a protocol fault.
    pub fn next(self, ev: FsmEvent) -> FsmState {
        use FsmEvent::*;
        use FsmState::*;
        match (self, ev) {
            (_, TransportLost) => Idle,
            (Idle, DataArrived) => Receiving,
            (Receiving, DataArrived) => Receiving,
            (Receiving, LineComplete) => Parsing,
            (Parsing, ParseOk) => Scheduling,
            (Scheduling, Scheduled) => Idle,
            // a well-formed packet clears a fault
            (Fault, ParseOk) => Idle,
            (Fault, DataArrived | LineComplete | ParseFailed) => Fault,
            _ => Fault,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SchedulerCounters {
    pub accepted: u64,
    pub merged: u64,
    pub deferred: u64,
    pub flicks_executed: u64,
    pub breaches: u64,
    pub late: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Pending {
    start: u64,
    hold_end: u64,
    fragments: Vec<u64>,
}

#[derive(Clone, Debug, Default)]
struct PaddleQueue {
    queue: VecDeque<Pending>,
    /// When the paddle is home after its last completed actuation.
    home_at: u64,
}

/// PLC-side scheduler: one FIFO per paddle plus the receive/parse/schedule
/// state machine.
///
/// Each paddle's actuation occupies `[start, hold_end + return_ms)`. A new
/// command whose window overlaps the queue tail is merged into it by
/// extending the hold; one that arrives while the paddle is still returning
/// from a finished actuation is deferred until it is home. Windows on one
/// paddle therefore never overlap and starts are at least one cycle apart.
///
/// Time only moves forward. Completed actuations are collected as soon as
/// time passes their hold end, so the result does not depend on how often
/// [`Scheduler::tick`] is called.
#[derive(Clone, Debug)]
pub struct Scheduler {
    layout: PaddleLayout,
    paddles: Vec<PaddleQueue>,
    state: FsmState,
    now: u64,
    outbox: Vec<ActuationEvent>,
    counters: SchedulerCounters,
}

impl Scheduler {
    pub fn new(layout: PaddleLayout) -> Self {
        let paddles = (0..layout.paddle_count).map(|_| PaddleQueue::default()).collect();
        Self {
            layout,
            paddles,
            state: FsmState::Idle,
            now: 0,
            outbox: Vec::new(),
            counters: SchedulerCounters::default(),
        }
    }

    pub fn layout(&self) -> &PaddleLayout {
        &self.layout
    }

    pub fn state(&self) -> FsmState {
        self.state
    }

    pub fn counters(&self) -> SchedulerCounters {
        self.counters
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Apply an FSM event and return the new state.
    pub fn transition(&mut self, ev: FsmEvent) -> FsmState {
        self.state = self.state.next(ev);
        self.state
    }

    /// Record a breach that did not come through [`Scheduler::enqueue`]
    /// (malformed packet, lost transport).
    pub fn record_breach(&mut self) {
        self.counters.breaches += 1;
    }

    /// Commands queued and not yet completed.
    pub fn pending(&self) -> usize {
        self.paddles.iter().map(|p| p.queue.len()).sum()
    }

    fn advance(&mut self, now: u64) {
        if now < self.now {
            return;
        }
        self.now = now;
        let ret = u64::from(self.layout.return_ms);
        for (i, p) in self.paddles.iter_mut().enumerate() {
            while p.queue.front().is_some_and(|h| h.hold_end <= now) {
                let h = p.queue.pop_front().expect("front checked");
                p.home_at = h.hold_end + ret;
                self.counters.flicks_executed += 1;
                self.outbox.push(ActuationEvent {
                    paddle: i as u16 + 1,
                    start: h.start,
                    end: h.hold_end,
                    fragments: h.fragments,
                });
            }
        }
    }

    /// Offer a command at time `now`.
    pub fn enqueue(&mut self, cmd: PaddleCommand, now: u64) -> EnqueueOutcome {
        let out = self.enqueue_inner(cmd, now);
        match out {
            EnqueueOutcome::Rejected(reason) => {
                self.counters.breaches += 1;
                if reason == RejectReason::Late {
                    self.counters.late += 1;
                }
            }
            EnqueueOutcome::Merged => {
                self.counters.accepted += 1;
                self.counters.merged += 1;
            }
            EnqueueOutcome::Deferred { .. } => {
                self.counters.accepted += 1;
                self.counters.deferred += 1;
            }
            EnqueueOutcome::Queued => self.counters.accepted += 1,
        }
        out
    }

    fn enqueue_inner(&mut self, cmd: PaddleCommand, now: u64) -> EnqueueOutcome {
        use EnqueueOutcome::*;
        if self.state == FsmState::Fault {
            return Rejected(RejectReason::Fault);
        }
        if cmd.paddle == 0 || cmd.paddle > self.layout.paddle_count || cmd.ton_ms < self.layout.actuate_ms {
            return Rejected(RejectReason::Invalid);
        }
        self.advance(now);
        if cmd.flick_at <= self.now {
            return Rejected(RejectReason::Late);
        }
        let ret = u64::from(self.layout.return_ms);
        let start = cmd.flick_at;
        let hold_end = start + u64::from(cmd.ton_ms);
        let p = &mut self.paddles[usize::from(cmd.paddle - 1)];
        let len = p.queue.len();
        if let Some(tail) = p.queue.back() {
            let overlaps = start < tail.hold_end + ret && tail.start < hold_end + ret;
            if overlaps {
                if start < tail.start {
                    // pulling the tail earlier must not collide with what precedes it
                    let floor = if len >= 2 { p.queue[len - 2].hold_end + ret } else { p.home_at };
                    if start < floor {
                        return Rejected(RejectReason::OutOfOrder);
                    }
                }
                let tail = p.queue.back_mut().expect("tail checked");
                tail.start = tail.start.min(start);
                tail.hold_end = tail.hold_end.max(hold_end);
                tail.fragments.push(cmd.fragment_id);
                return Merged;
            }
            if start < tail.start {
                return Rejected(RejectReason::OutOfOrder);
            }
            p.queue.push_back(Pending { start, hold_end, fragments: alloc::vec![cmd.fragment_id] });
            return Queued;
        }
        if start < p.home_at {
            let by = p.home_at - start;
            let s = p.home_at;
            p.queue.push_back(Pending {
                start: s,
                hold_end: s + u64::from(cmd.ton_ms),
                fragments: alloc::vec![cmd.fragment_id],
            });
            return Deferred { by_ms: by };
        }
        p.queue.push_back(Pending { start, hold_end, fragments: alloc::vec![cmd.fragment_id] });
        Queued
    }

    /// Advance to `now` and return actuations completed since the last call,
    /// ordered by start time then paddle.
    pub fn tick(&mut self, now: u64) -> Vec<ActuationEvent> {
        self.advance(now);
        let mut out = core::mem::take(&mut self.outbox);
        out.sort_by_key(|e| (e.start, e.paddle));
        out
    }

    /// Run every queued command to completion.
    pub fn drain(&mut self) -> Vec<ActuationEvent> {
        let last = self
            .paddles
            .iter()
            .filter_map(|p| p.queue.back().map(|t| t.hold_end))
            .max()
            .unwrap_or(self.now);
        self.tick(last.max(self.now))
    }
}
