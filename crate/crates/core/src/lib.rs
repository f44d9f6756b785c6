//! Detection-to-actuation pipeline for an optical paddle sorter of shredded
//! e-waste, together with the arithmetic used to evaluate it.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is pure: file
//! formats, sockets and the command line live in the `aris` crate.
//!
//! Layout:
//!
//! * [`geometry`]: coordinate spaces, belt calibration, IoU and the
//!   segment/global remapping of the batched inference pipeline.
//! * [`detector`]: oracle and stochastic stand-ins for the object detector,
//!   plus class-wise non-maximum suppression.
//! * [`metrics`]: matching, PR curves, AP/mAP, confusion matrices, baselines
//!   and stream purity.
//! * [`control`]: paddle mapping, flick timing and the PLC-side FIFO scheduler.
//! * [`wire`]: the line protocol between inference host and PLC.
//! * [`sim`]: the deterministic discrete-event simulation of the whole line.

#![no_std]
#![forbid(unsafe_code)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

mod class;
pub mod control;
pub mod detector;
pub mod geometry;
pub mod metrics;
pub mod sim;
pub mod wire;

pub use class::{MaterialClass, PerClass, UnknownClass};
pub use control::{flick_time, paddle_for_x, FlickTiming, PaddleCommand, PaddleLayout, Scheduler};
pub use detector::{nms_classwise, ConfusionModel, Detection, Detector};
pub use geometry::{iou, BBox, BeltCalibration, GeometryError, Space};
pub use metrics::MetricsReport;
pub use sim::{run, SimConfig, SimReport};
pub use wire::{decode, encode, FramePacket, PlcSession};
