//! Coordinate spaces and belt calibration.
//!
//! Three spaces are in play:
//!
//! * [`Space::Normalized`]: YOLO-style boxes, every field in `[0, 1]`.
//! * [`Space::Segment`]: pixels of one camera segment after it has been
//!   resized to the square network input (640 x 640 by default).
//! * [`Space::Global`]: pixels of the stitched belt frame (5760 x 1200).
//!
//! In the global frame `x` runs across the belt and `y` runs *against* the
//! direction of travel: row 0 is the downstream edge of the field of view,
//! the one closest to the belt discharge.

use core::fmt;

use crate::MaterialClass;

pub const MM_PER_INCH: f64 = 25.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Space {
    Normalized,
    /// Network-input pixels of the given camera segment.
    Segment(u8),
    Global,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Space::Normalized => f.write_str("normalized"),
            Space::Segment(i) => write!(f, "segment[{i}]"),
            Space::Global => f.write_str("global"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("coordinate space mismatch: {0} vs {1}")]
    SpaceMismatch(Space, Space),
    #[error("expected {expected} box, got {got}")]
    WrongSpace { expected: &'static str, got: Space },
    #[error("degenerate box (zero area)")]
    Degenerate,
    #[error("normalized box field out of [0, 1]")]
    OutOfUnitRange,
    #[error("segment index {index} out of range (segment count {count})")]
    SegmentOutOfRange { index: u32, count: u32 },
    #[error("invalid calibration: {0}")]
    Calibration(&'static str),
}

/// Camera and belt calibration of the imaging station.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct BeltCalibration {
    pub belt_width_px: u32,
    pub belt_width_in: f64,
    pub segment_count: u32,
    pub segment_width_px: u32,
    pub segment_height_px: u32,
    pub net_input_px: u32,
    pub px_per_mm: f64,
    pub belt_speed_mps: f64,
    /// Belt length between the downstream edge of the field of view and the
    /// discharge edge of the belt.
    pub fov_to_belt_edge_mm: f64,
}

impl Default for BeltCalibration {
    fn default() -> Self {
        let belt_width_px = 5760;
        let belt_width_in = 64.0;
        Self {
            belt_width_px,
            belt_width_in,
            segment_count: 3,
            segment_width_px: 1920,
            segment_height_px: 1200,
            net_input_px: 640,
            px_per_mm: f64::from(belt_width_px) / (belt_width_in * MM_PER_INCH),
            belt_speed_mps: 1.2,
            fov_to_belt_edge_mm: 600.0,
        }
    }
}

impl BeltCalibration {
    pub const MAX_BELT_SPEED_MPS: f64 = 1.3;

    pub fn validate(&self) -> Result<(), GeometryError> {
        use GeometryError::Calibration as C;
        if self.segment_count == 0 || self.segment_width_px == 0 || self.segment_height_px == 0 {
            return Err(C("segment dimensions must be positive"));
        }
        if self.net_input_px == 0 {
            return Err(C("net_input_px must be positive"));
        }
        if u64::from(self.segment_count) * u64::from(self.segment_width_px)
            != u64::from(self.belt_width_px)
        {
            return Err(C("segment_count x segment_width_px must equal belt_width_px"));
        }
        if !(self.px_per_mm > 0.0) || !self.px_per_mm.is_finite() {
            return Err(C("px_per_mm must be positive"));
        }
        if !(0.0..=Self::MAX_BELT_SPEED_MPS).contains(&self.belt_speed_mps) {
            return Err(C("belt_speed_mps must lie in [0, 1.3]"));
        }
        let implied = f64::from(self.belt_width_px) / (self.belt_width_in * MM_PER_INCH);
        if ((implied - self.px_per_mm) / implied).abs() > 0.02 {
            return Err(C("px_per_mm disagrees with belt width by more than 2%"));
        }
        if !(self.fov_to_belt_edge_mm >= 0.0) {
            return Err(C("fov_to_belt_edge_mm must be non-negative"));
        }
        Ok(())
    }

    pub fn belt_width_mm(&self) -> f64 {
        self.belt_width_in * MM_PER_INCH
    }

    /// Belt length covered by one frame.
    pub fn fov_length_mm(&self) -> f64 {
        f64::from(self.segment_height_px) / self.px_per_mm
    }

    /// Belt speed in mm per ms (numerically equal to m/s).
    pub fn speed_mm_per_ms(&self) -> f64 {
        self.belt_speed_mps
    }

    pub fn frame_height_px(&self) -> f64 {
        f64::from(self.segment_height_px)
    }

    /// Global x range `[start, end)` of segment `i`.
    pub fn segment_viewport(&self, i: u32) -> (f64, f64) {
        let w = f64::from(self.segment_width_px);
        (f64::from(i) * w, f64::from(i + 1) * w)
    }

    /// Segment that owns global column `x` (half-open viewports, clamped).
    pub fn segment_of_x(&self, x: f64) -> u32 {
        let i = libm::floor(x / f64::from(self.segment_width_px));
        if i < 0.0 {
            0
        } else {
            (i as u32).min(self.segment_count - 1)
        }
    }

    fn scale_x(&self) -> f64 {
        f64::from(self.segment_width_px) / f64::from(self.net_input_px)
    }

    fn scale_y(&self) -> f64 {
        f64::from(self.segment_height_px) / f64::from(self.net_input_px)
    }
}

pub fn px_to_mm(x_px: f64, cal: &BeltCalibration) -> f64 {
    x_px / cal.px_per_mm
}

pub fn mm_to_px(x_mm: f64, cal: &BeltCalibration) -> f64 {
    x_mm * cal.px_per_mm
}

/// Axis-aligned box given by center and extent, tagged with its space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub space: Space,
    pub class: MaterialClass,
    pub x_c: f64,
    pub y_c: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

impl BBox {
    /// Pixel-space box. No validation beyond what the caller guarantees.
    pub fn new(space: Space, class: MaterialClass, x_c: f64, y_c: f64, w: f64, h: f64) -> Self {
        Self { space, class, x_c, y_c, w, h, confidence: 1.0 }
    }

    /// Validated normalized box.
    pub fn normalized(
        class: MaterialClass,
        x_c: f64,
        y_c: f64,
        w: f64,
        h: f64,
    ) -> Result<Self, GeometryError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(x_c) && unit(y_c) && unit(w) && unit(h)) {
            return Err(GeometryError::OutOfUnitRange);
        }
        if !(w * h > 0.0) {
            return Err(GeometryError::Degenerate);
        }
        Ok(Self::new(Space::Normalized, class, x_c, y_c, w, h))
    }

    /// Box from corner coordinates.
    pub fn from_corners(
        space: Space,
        class: MaterialClass,
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    ) -> Self {
        Self::new(space, class, (x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn x0(&self) -> f64 {
        self.x_c - self.w / 2.0
    }
    pub fn x1(&self) -> f64 {
        self.x_c + self.w / 2.0
    }
    pub fn y0(&self) -> f64 {
        self.y_c - self.h / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.y_c + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Clamp to `[0, w] x [0, h]`; errors if nothing with positive area is left.
    pub fn clamp_to(&self, frame_w: f64, frame_h: f64) -> Result<Self, GeometryError> {
        let x0 = self.x0().clamp(0.0, frame_w);
        let x1 = self.x1().clamp(0.0, frame_w);
        let y0 = self.y0().clamp(0.0, frame_h);
        let y1 = self.y1().clamp(0.0, frame_h);
        if !(x1 > x0 && y1 > y0) {
            return Err(GeometryError::Degenerate);
        }
        let mut b = Self::from_corners(self.space, self.class, x0, y0, x1, y1);
        b.confidence = self.confidence;
        Ok(b)
    }
}

/// Intersection over union of two boxes in the same space.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    if a.space != b.space {
        return Err(GeometryError::SpaceMismatch(a.space, b.space));
    }
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x1().min(b.x1()) - a.x0().max(b.x0());
    let ih = a.y1().min(b.y1()) - a.y0().max(b.y0());
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Map a box from network-input pixels of segment `i` to the stitched frame.
///
/// Undoes the segment-to-network resize, shifts by the segment offset, and
/// clamps the result to the segment viewport.
pub fn segment_to_global(b: &BBox, cal: &BeltCalibration) -> Result<BBox, GeometryError> {
    let Space::Segment(i) = b.space else {
        return Err(GeometryError::WrongSpace { expected: "segment", got: b.space });
    };
    let i = u32::from(i);
    if i >= cal.segment_count {
        return Err(GeometryError::SegmentOutOfRange { index: i, count: cal.segment_count });
    }
    let (sx, sy) = (cal.scale_x(), cal.scale_y());
    let (x_start, x_end) = cal.segment_viewport(i);
    let x0 = (b.x0() * sx + x_start).clamp(x_start, x_end);
    let x1 = (b.x1() * sx + x_start).clamp(x_start, x_end);
    let y0 = (b.y0() * sy).clamp(0.0, cal.frame_height_px());
    let y1 = (b.y1() * sy).clamp(0.0, cal.frame_height_px());
    if !(x1 > x0 && y1 > y0) {
        return Err(GeometryError::Degenerate);
    }
    Ok(BBox::from_corners(Space::Global, b.class, x0, y0, x1, y1).with_confidence(b.confidence))
}

/// Map a global box into the segment that owns its center, clamping it to
/// that segment's viewport. Boxes never get split across segments.
pub fn global_to_segment(b: &BBox, cal: &BeltCalibration) -> Result<BBox, GeometryError> {
    if b.space != Space::Global {
        return Err(GeometryError::WrongSpace { expected: "global", got: b.space });
    }
    let i = cal.segment_of_x(b.x_c);
    let (x_start, x_end) = cal.segment_viewport(i);
    let h = cal.frame_height_px();
    let x0 = b.x0().clamp(x_start, x_end);
    let x1 = b.x1().clamp(x_start, x_end);
    let y0 = b.y0().clamp(0.0, h);
    let y1 = b.y1().clamp(0.0, h);
    if !(x1 > x0 && y1 > y0) {
        return Err(GeometryError::Degenerate);
    }
    let (sx, sy) = (cal.scale_x(), cal.scale_y());
    Ok(BBox::from_corners(
        Space::Segment(i as u8),
        b.class,
        (x0 - x_start) / sx,
        y0 / sy,
        (x1 - x_start) / sx,
        y1 / sy,
    )
    .with_confidence(b.confidence))
}

/// Scale a normalized box to a pixel frame and clamp it there.
pub fn denormalize(
    b: &BBox,
    target: Space,
    frame_w: f64,
    frame_h: f64,
) -> Result<BBox, GeometryError> {
    if b.space != Space::Normalized {
        return Err(GeometryError::WrongSpace { expected: "normalized", got: b.space });
    }
    if !(b.w * b.h > 0.0) {
        return Err(GeometryError::Degenerate);
    }
    let px = BBox {
        space: target,
        x_c: b.x_c * frame_w,
        y_c: b.y_c * frame_h,
        w: b.w * frame_w,
        h: b.h * frame_h,
        ..*b
    };
    px.clamp_to(frame_w, frame_h)
}

/// Inverse of [`denormalize`] for boxes inside the frame.
pub fn normalize(b: &BBox, frame_w: f64, frame_h: f64) -> Result<BBox, GeometryError> {
    if b.space == Space::Normalized {
        return Err(GeometryError::WrongSpace { expected: "pixel", got: b.space });
    }
    let c = b.clamp_to(frame_w, frame_h)?;
    let mut n = BBox::normalized(
        b.class,
        c.x_c / frame_w,
        c.y_c / frame_h,
        c.w / frame_w,
        c.h / frame_h,
    )?;
    n.confidence = b.confidence;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const M: MaterialClass = MaterialClass::Metal;

    fn unit_sq(x: f64, y: f64) -> BBox {
        BBox::from_corners(Space::Global, M, x, y, x + 1.0, y + 1.0)
    }

    #[test]
    fn iou_examples() {
        let a = unit_sq(0.0, 0.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &unit_sq(5.0, 5.0)).unwrap(), 0.0);
        // intersection 0.5, union 1.5
        let v = iou(&a, &unit_sq(0.5, 0.0)).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_rejects_mixed_spaces() {
        let a = unit_sq(0.0, 0.0);
        let mut b = a;
        b.space = Space::Segment(0);
        assert!(matches!(iou(&a, &b), Err(GeometryError::SpaceMismatch(..))));
    }

    #[test]
    fn default_calibration() {
        let cal = BeltCalibration::default();
        cal.validate().unwrap();
        assert!((3.4..=3.7).contains(&cal.px_per_mm));
        assert!((cal.fov_length_mm() - 338.666_666).abs() < 1e-3);
        assert!((px_to_mm(5760.0, &cal) - 1625.6).abs() < 1e-9);
        assert_eq!(px_to_mm(0.0, &cal), 0.0);
        assert!((px_to_mm(354.0, &cal) - 99.906).abs() < 1e-3);
        let x = 1234.5;
        assert!((mm_to_px(px_to_mm(x, &cal), &cal) - x).abs() < 1e-9);
    }

    #[test]
    fn calibration_rejects_bad_speed_and_tiling() {
        let mut cal = BeltCalibration { belt_speed_mps: 1.4, ..Default::default() };
        assert!(cal.validate().is_err());
        cal.belt_speed_mps = 1.2;
        cal.segment_width_px = 1900;
        assert!(cal.validate().is_err());
    }

    #[test]
    fn viewports_tile_the_belt() {
        let cal = BeltCalibration::default();
        let mut edge = 0.0;
        for i in 0..cal.segment_count {
            let (a, b) = cal.segment_viewport(i);
            assert_eq!(a, edge);
            assert!(b > a);
            edge = b;
        }
        assert_eq!(edge, f64::from(cal.belt_width_px));
        assert_eq!(cal.segment_of_x(1919.999), 0);
        assert_eq!(cal.segment_of_x(1920.0), 1);
        assert_eq!(cal.segment_of_x(5759.9), 2);
    }

    #[test]
    fn segment_to_global_examples() {
        let cal = BeltCalibration::default();
        let b = BBox::new(Space::Segment(0), M, 320.0, 320.0, 20.0, 20.0);
        let g = segment_to_global(&b, &cal).unwrap();
        assert!((g.x_c - 960.0).abs() < 1e-9);
        assert!((g.y_c - 600.0).abs() < 1e-9);
        assert!((g.w - 60.0).abs() < 1e-9);

        let b = BBox::new(Space::Segment(2), M, 5.0, 100.0, 10.0, 10.0);
        let g = segment_to_global(&b, &cal).unwrap();
        assert!((g.x0() - 3840.0).abs() < 1e-9);

        let bad = BBox::new(Space::Segment(3), M, 5.0, 100.0, 10.0, 10.0);
        assert!(segment_to_global(&bad, &cal).is_err());
    }

    #[test]
    fn global_segment_round_trip() {
        let cal = BeltCalibration::default();
        let g = BBox::new(Space::Global, M, 4000.25, 700.5, 80.0, 60.0);
        let s = global_to_segment(&g, &cal).unwrap();
        assert_eq!(s.space, Space::Segment(2));
        let back = segment_to_global(&s, &cal).unwrap();
        assert!((back.x_c - g.x_c).abs() < 0.5);
        assert!((back.y_c - g.y_c).abs() < 0.5);
    }

    #[test]
    fn straddling_box_is_clamped_not_split() {
        let cal = BeltCalibration::default();
        let g = BBox::new(Space::Global, M, 1910.0, 600.0, 40.0, 40.0);
        let s = global_to_segment(&g, &cal).unwrap();
        assert_eq!(s.space, Space::Segment(0));
        let back = segment_to_global(&s, &cal).unwrap();
        assert!((back.x1() - 1920.0).abs() < 1e-9);
    }

    #[test]
    fn denormalize_examples() {
        let n = BBox::normalized(M, 0.5, 0.5, 1.0, 1.0).unwrap();
        let p = denormalize(&n, Space::Segment(0), 640.0, 640.0).unwrap();
        assert_eq!((p.x_c, p.y_c, p.w, p.h), (320.0, 320.0, 640.0, 640.0));

        let n = BBox::normalized(M, 0.25, 0.5, 0.1, 0.2).unwrap();
        let p = denormalize(&n, Space::Segment(0), 1920.0, 1200.0).unwrap();
        assert!((p.x_c - 480.0).abs() < 1e-9 && (p.y_c - 600.0).abs() < 1e-9);
        assert!((p.w - 192.0).abs() < 1e-9 && (p.h - 240.0).abs() < 1e-9);

        assert_eq!(BBox::normalized(M, 0.5, 0.5, 0.0, 0.2), Err(GeometryError::Degenerate));
        assert_eq!(BBox::normalized(M, 1.5, 0.5, 0.1, 0.2), Err(GeometryError::OutOfUnitRange));
        // clamped away entirely
        let edge = BBox { w: 1e-300, h: 1e-300, ..BBox::normalized(M, 1.0, 1.0, 0.1, 0.1).unwrap() };
        assert!(denormalize(&edge, Space::Global, 10.0, 10.0).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.1..50.0f64, 0.1..50.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(Space::Global, M, x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            let ba = iou(&b, &a).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn full_remap_round_trip(
            seg in 0u8..3,
            x in 0.05..0.95f64, y in 0.05..0.95f64,
            w in 0.001..0.05f64, h in 0.001..0.05f64,
        ) {
            let cal = BeltCalibration::default();
            let net = f64::from(cal.net_input_px);
            let n = BBox::normalized(M, x, y, w, h).unwrap();
            let s = denormalize(&n, Space::Segment(seg), net, net).unwrap();
            let g = segment_to_global(&s, &cal).unwrap();
            let s2 = global_to_segment(&g, &cal).unwrap();
            prop_assert_eq!(s2.space, Space::Segment(seg));
            let n2 = normalize(&s2, net, net).unwrap();
            for (p, q) in [(n.x_c, n2.x_c), (n.y_c, n2.y_c), (n.w, n2.w), (n.h, n2.h)] {
                prop_assert!((p - q).abs() <= 1e-9 * p.abs().max(1.0));
            }
        }
    }
}
