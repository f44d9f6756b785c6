//! Stand-ins for the object detector and the class-wise NMS that follows it.
//!
//! Two detectors are provided. [`OracleDetector`] reports every visible
//! fragment with its exact bounds and class. [`StochasticDetector`] samples
//! each fragment's outcome from a [`ConfusionModel`] whose rows are solved
//! from published test-set statistics (recall, precision, class priors and
//! two measured plastic confusion rates), then jitters the box.
//!
//! Both emit boxes in network-input pixels of the camera segment that owns
//! the fragment, which is what a real batched detector would hand back.

use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::geometry::{global_to_segment, iou_unchecked, BBox, BeltCalibration, GeometryError, Space};
use crate::{MaterialClass, PerClass};

/// Tolerance for row sums.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("{class} row sums to {sum}, expected 1")]
    RowSum { class: MaterialClass, sum: f64 },
    #[error("{class} row has a probability outside [0, 1]")]
    Probability { class: MaterialClass },
    #[error("negative jitter or rate")]
    Negative,
    #[error("published statistics are inconsistent: solved {what} = {value}")]
    Unsolvable { what: &'static str, value: f64 },
}

/// Outcome distribution for fragments of one true class.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct OutcomeRow {
    pub metal: f64,
    pub circuit_board: f64,
    pub plastic: f64,
    pub miss: f64,
}

impl OutcomeRow {
    pub fn predicted(&self, c: MaterialClass) -> f64 {
        match c {
            MaterialClass::Metal => self.metal,
            MaterialClass::CircuitBoard => self.circuit_board,
            MaterialClass::Plastic => self.plastic,
        }
    }

    fn predicted_mut(&mut self, c: MaterialClass) -> &mut f64 {
        match c {
            MaterialClass::Metal => &mut self.metal,
            MaterialClass::CircuitBoard => &mut self.circuit_board,
            MaterialClass::Plastic => &mut self.plastic,
        }
    }

    pub fn sum(&self) -> f64 {
        self.metal + self.circuit_board + self.plastic + self.miss
    }

    /// Identity row: always detected, always with the right class.
    pub fn perfect(c: MaterialClass) -> Self {
        let mut r = Self::default();
        *r.predicted_mut(c) = 1.0;
        r
    }

    /// Sample an outcome from a uniform draw in `[0, 1)`; `None` is a miss.
    fn sample(&self, u: f64) -> Option<MaterialClass> {
        let mut acc = 0.0;
        for c in MaterialClass::ALL {
            acc += self.predicted(c);
            if u < acc {
                return Some(c);
            }
        }
        None
    }
}

/// Mean and standard deviation of a clamped normal.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ConfidenceDist {
    pub mean: f64,
    pub std: f64,
}

impl Default for ConfidenceDist {
    fn default() -> Self {
        Self { mean: 0.85, std: 0.08 }
    }
}

/// Error model of the stochastic detector.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ConfusionModel {
    /// `rows[t]` is the outcome distribution for true class `t`.
    pub rows: PerClass<OutcomeRow>,
    /// Std of the box-center jitter, global pixels.
    pub center_jitter_px: f64,
    /// Std of the multiplicative box-size jitter.
    pub size_jitter_frac: f64,
    /// Confidence per (true class, predicted class) cell.
    pub confidence: PerClass<PerClass<ConfidenceDist>>,
    /// Expected spurious detections per frame, per class.
    pub false_positives_per_frame: PerClass<f64>,
    pub false_positive_confidence: ConfidenceDist,
}

impl Default for ConfusionModel {
    fn default() -> Self {
        Self::published(PlasticAsMetal::StatedPercent)
    }
}

impl ConfusionModel {
    /// A model that never errs and never jitters.
    pub fn perfect() -> Self {
        Self {
            rows: PerClass::from_fn(OutcomeRow::perfect),
            center_jitter_px: 0.0,
            size_jitter_frac: 0.0,
            confidence: PerClass::from_fn(|_| PerClass::from_fn(|_| ConfidenceDist { mean: 1.0, std: 0.0 })),
            false_positives_per_frame: PerClass::default(),
            false_positive_confidence: ConfidenceDist::default(),
        }
    }

    /// Rows solved from the published test-set statistics.
    pub fn published(variant: PlasticAsMetal) -> Self {
        let rows = PublishedStats::test_set(variant)
            .solve()
            .expect("published statistics are consistent");
        Self {
            rows,
            center_jitter_px: 2.0,
            size_jitter_frac: 0.02,
            confidence: PerClass::default(),
            false_positives_per_frame: PerClass::default(),
            false_positive_confidence: ConfidenceDist::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (class, row) in self.rows.iter() {
            let cells = [row.metal, row.circuit_board, row.plastic, row.miss];
            if cells.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(ModelError::Probability { class });
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(ModelError::RowSum { class, sum });
            }
        }
        let fp_ok = self.false_positives_per_frame.iter().all(|(_, r)| *r >= 0.0);
        if !(self.center_jitter_px >= 0.0 && self.size_jitter_frac >= 0.0 && fp_ok) {
            return Err(ModelError::Negative);
        }
        let conf_ok = self
            .confidence
            .iter()
            .flat_map(|(_, r)| r.iter().map(|(_, d)| *d))
            .chain(core::iter::once(self.false_positive_confidence))
            .all(|d| d.std >= 0.0);
        if !conf_ok {
            return Err(ModelError::Negative);
        }
        Ok(())
    }

    pub fn recall(&self, c: MaterialClass) -> f64 {
        self.rows[c].predicted(c)
    }

    /// Expected precision of class `c` under the given feed priors, i.e.
    /// `P(true = c | predicted = c)` by Bayes' rule.
    pub fn expected_precision(&self, c: MaterialClass, priors: &PerClass<f64>) -> f64 {
        let num = priors[c] * self.rows[c].predicted(c);
        let den: f64 = MaterialClass::ALL
            .iter()
            .map(|&t| priors[t] * self.rows[t].predicted(c))
            .sum();
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }
}

/// The measured plastic-as-metal rate is quoted both as a percentage and
/// as a count that implies a different percentage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PlasticAsMetal {
    /// 4.8 %, as stated.
    StatedPercent,
    /// 20 of 608 plastic samples (about 3.3 %).
    StatedCount,
}

/// Published test-set statistics from which confusion rows are solved.
#[derive(Clone, Debug, PartialEq)]
pub struct PublishedStats {
    pub test_counts: PerClass<f64>,
    pub recall: PerClass<f64>,
    pub precision: PerClass<f64>,
    /// Measured off-diagonal cells, `(true, predicted, probability)`.
    pub known_cells: Vec<(MaterialClass, MaterialClass, f64)>,
}

impl PublishedStats {
    pub fn test_set(variant: PlasticAsMetal) -> Self {
        use MaterialClass::*;
        let plastic_as_metal = match variant {
            PlasticAsMetal::StatedPercent => 0.048,
            PlasticAsMetal::StatedCount => 20.0 / 608.0,
        };
        Self {
            test_counts: PerClass::new(534.0, 729.0, 608.0),
            recall: PerClass::new(0.863, 0.941, 0.562),
            precision: PerClass::new(0.928, 0.785, 0.997),
            known_cells: alloc::vec![
                (Plastic, CircuitBoard, 0.270),
                (Plastic, Metal, plastic_as_metal),
            ],
        }
    }

    /// Fill the unknown off-diagonal cells so that every predicted column
    /// reproduces its precision under the test counts.
    ///
    /// Per predicted class `j`: the false-positive mass is
    /// `TP_j * (1 / precision_j - 1)` with `TP_j = n_j * recall_j`. The
    /// known cells of column `j` are subtracted and the remainder is spread
    /// over the true classes with unknown cells at one common per-sample
    /// rate. The miss probability closes each row.
    pub fn solve(&self) -> Result<PerClass<OutcomeRow>, ModelError> {
        let mut rows = PerClass::from_fn(|c| {
            let mut r = OutcomeRow::default();
            *r.predicted_mut(c) = self.recall[c];
            r
        });
        let known = |t: MaterialClass, p: MaterialClass| {
            self.known_cells.iter().find(|(kt, kp, _)| *kt == t && *kp == p).map(|k| k.2)
        };
        for j in MaterialClass::ALL {
            let tp = self.test_counts[j] * self.recall[j];
            let fp = tp * (1.0 / self.precision[j] - 1.0);
            let mut residual = fp;
            let mut unknown_n = 0.0;
            for t in MaterialClass::ALL.into_iter().filter(|&t| t != j) {
                match known(t, j) {
                    Some(p) => {
                        *rows[t].predicted_mut(j) = p;
                        residual -= self.test_counts[t] * p;
                    }
                    None => unknown_n += self.test_counts[t],
                }
            }
            if unknown_n > 0.0 {
                let rate = residual / unknown_n;
                if !(0.0..=1.0).contains(&rate) {
                    return Err(ModelError::Unsolvable { what: "off-diagonal rate", value: rate });
                }
                for t in MaterialClass::ALL.into_iter().filter(|&t| t != j) {
                    if known(t, j).is_none() {
                        *rows[t].predicted_mut(j) = rate;
                    }
                }
            }
        }
        for c in MaterialClass::ALL {
            let r = &mut rows[c];
            let miss = 1.0 - (r.metal + r.circuit_board + r.plastic);
            if miss < -ROW_SUM_TOL {
                return Err(ModelError::Unsolvable { what: "miss probability", value: miss });
            }
            r.miss = miss.max(0.0);
        }
        Ok(rows)
    }
}

/// One detector output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub frame_id: u64,
    /// Ground-truth particle that produced this box, if any. Only scoring
    /// code may look at it.
    pub source: Option<u64>,
}

/// Ground-truth footprint of a fragment inside the current frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub particle_id: u64,
    /// Exact bounds, [`Space::Global`].
    pub bbox: BBox,
}

pub trait Detector {
    /// Detections for one frame, in segment (network-input) space.
    fn detect(&mut self, frame_id: u64, visible: &[Footprint], cal: &BeltCalibration) -> Vec<Detection>;
}

/// Perfect detector.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleDetector;

impl Detector for OracleDetector {
    fn detect(&mut self, frame_id: u64, visible: &[Footprint], cal: &BeltCalibration) -> Vec<Detection> {
        detect_oracle(frame_id, visible, cal)
    }
}

pub fn detect_oracle(frame_id: u64, visible: &[Footprint], cal: &BeltCalibration) -> Vec<Detection> {
    visible
        .iter()
        .filter_map(|f| {
            let g = f.bbox.with_confidence(1.0);
            to_segment(g, cal).ok().map(|bbox| Detection {
                bbox,
                frame_id,
                source: Some(f.particle_id),
            })
        })
        .collect()
}

fn to_segment(g: BBox, cal: &BeltCalibration) -> Result<BBox, GeometryError> {
    let g = g.clamp_to(f64::from(cal.belt_width_px), cal.frame_height_px())?;
    global_to_segment(&g, cal)
}

/// Detector that reproduces a [`ConfusionModel`]. Owns its RNG.
#[derive(Clone, Debug)]
pub struct StochasticDetector {
    model: ConfusionModel,
    rng: ChaCha8Rng,
}

impl StochasticDetector {
    pub fn new(model: ConfusionModel, seed: u64) -> Result<Self, ModelError> {
        model.validate()?;
        Ok(Self { model, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn model(&self) -> &ConfusionModel {
        &self.model
    }
}

impl Detector for StochasticDetector {
    fn detect(&mut self, frame_id: u64, visible: &[Footprint], cal: &BeltCalibration) -> Vec<Detection> {
        detect_stochastic(frame_id, visible, &self.model, cal, &mut self.rng)
    }
}

fn clamped_normal<R: Rng + ?Sized>(d: ConfidenceDist, rng: &mut R) -> f64 {
    let v = if d.std > 0.0 {
        Normal::new(d.mean, d.std).map(|n| n.sample(rng)).unwrap_or(d.mean)
    } else {
        d.mean
    };
    v.clamp(0.0, 1.0)
}

fn gaussian<R: Rng + ?Sized>(std: f64, rng: &mut R) -> f64 {
    if std > 0.0 {
        Normal::new(0.0, std).map(|n| n.sample(rng)).unwrap_or(0.0)
    } else {
        0.0
    }
}

pub fn detect_stochastic<R: Rng + ?Sized>(
    frame_id: u64,
    visible: &[Footprint],
    model: &ConfusionModel,
    cal: &BeltCalibration,
    rng: &mut R,
) -> Vec<Detection> {
    let mut out = Vec::with_capacity(visible.len());
    for f in visible {
        let truth = f.bbox.class;
        let u: f64 = rng.random();
        let Some(pred) = model.rows[truth].sample(u) else {
            continue;
        };
        let b = f.bbox;
        let dx = gaussian(model.center_jitter_px, rng);
        let dy = gaussian(model.center_jitter_px, rng);
        let sw = (1.0 + gaussian(model.size_jitter_frac, rng)).max(0.05);
        let sh = (1.0 + gaussian(model.size_jitter_frac, rng)).max(0.05);
        let conf = clamped_normal(model.confidence[truth][pred], rng);
        let g = BBox::new(Space::Global, pred, b.x_c + dx, b.y_c + dy, b.w * sw, b.h * sh)
            .with_confidence(conf);
        if let Ok(bbox) = to_segment(g, cal) {
            out.push(Detection { bbox, frame_id, source: Some(f.particle_id) });
        }
    }
    let (fw, fh) = (f64::from(cal.belt_width_px), cal.frame_height_px());
    for class in MaterialClass::ALL {
        let rate = model.false_positives_per_frame[class];
        if rate <= 0.0 {
            continue;
        }
        let n = Poisson::new(rate).map(|p| p.sample(rng) as u64).unwrap_or(0);
        for _ in 0..n {
            let w = 90.0 + 150.0 * rng.random::<f64>();
            let h = 90.0 + 150.0 * rng.random::<f64>();
            let x = fw * rng.random::<f64>();
            let y = fh * rng.random::<f64>();
            let conf = clamped_normal(model.false_positive_confidence, rng);
            let g = BBox::new(Space::Global, class, x, y, w, h).with_confidence(conf);
            if let Ok(bbox) = to_segment(g, cal) {
                out.push(Detection { bbox, frame_id, source: None });
            }
        }
    }
    out
}

/// Priority order for suppression: higher confidence first, then smaller
/// source id (sourceless boxes last), then smaller `x_c`.
fn priority(a: &Detection, b: &Detection) -> Ordering {
    b.bbox
        .confidence
        .total_cmp(&a.bbox.confidence)
        .then_with(|| match (a.source, b.source) {
            (Some(x), Some(y)) => x.cmp(&y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        })
        .then_with(|| a.bbox.x_c.total_cmp(&b.bbox.x_c))
}

/// Greedy class-wise non-maximum suppression.
///
/// Drops boxes with confidence below `conf_thresh`, then walks the rest in
/// priority order keeping a box unless an already kept box of the same
/// class overlaps it with IoU at or above `iou_thresh`. Boxes of different
/// classes never suppress each other. Output is in priority order.
pub fn nms_classwise(
    dets: &[Detection],
    conf_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<Detection>, GeometryError> {
    if let Some(first) = dets.first() {
        if let Some(d) = dets.iter().find(|d| d.bbox.space != first.bbox.space) {
            return Err(GeometryError::SpaceMismatch(first.bbox.space, d.bbox.space));
        }
    }
    let mut cands: Vec<Detection> =
        dets.iter().filter(|d| d.bbox.confidence >= conf_thresh).copied().collect();
    cands.sort_by(priority);
    let mut kept: PerClass<Vec<BBox>> = PerClass::default();
    let mut out = Vec::new();
    for d in cands {
        let same = &mut kept[d.bbox.class];
        if same.iter().all(|k| iou_unchecked(k, &d.bbox) < iou_thresh) {
            same.push(d.bbox);
            out.push(d);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{iou, segment_to_global};
    use proptest::prelude::*;
    use MaterialClass::*;

    fn det(class: MaterialClass, x: f64, y: f64, s: f64, conf: f64, src: u64) -> Detection {
        Detection {
            bbox: BBox::new(Space::Global, class, x, y, s, s).with_confidence(conf),
            frame_id: 0,
            source: Some(src),
        }
    }

    #[test]
    fn solved_rows_match_hand_derivation() {
        let rows = PublishedStats::test_set(PlasticAsMetal::StatedPercent).solve().unwrap();
        // P(board | metal) and P(metal | board) from board/metal precision.
        assert!((rows.metal.circuit_board - 0.044_424).abs() < 1e-5);
        assert!((rows.circuit_board.metal - 0.009_014).abs() < 1e-5);
        // 99.7 % plastic precision forces a tiny plastic column.
        assert!((rows.metal.plastic - 0.000_814).abs() < 1e-5);
        assert_eq!(rows.metal.plastic, rows.circuit_board.plastic);
        assert!((rows.plastic.miss - 0.120).abs() < 1e-9);
        for (_, r) in rows.iter() {
            assert!((r.sum() - 1.0).abs() < ROW_SUM_TOL);
        }
        let m = ConfusionModel::default();
        m.validate().unwrap();
        let counts = PerClass::new(534.0, 729.0, 608.0);
        assert!((m.expected_precision(Metal, &counts) - 0.928).abs() < 1e-9);
        assert!((m.expected_precision(CircuitBoard, &counts) - 0.785).abs() < 1e-9);
        assert!((m.expected_precision(Plastic, &counts) - 0.997).abs() < 1e-9);
    }

    #[test]
    fn count_variant_moves_mass_to_miss() {
        let m = ConfusionModel::published(PlasticAsMetal::StatedCount);
        m.validate().unwrap();
        assert!((m.rows.plastic.metal - 20.0 / 608.0).abs() < 1e-12);
        assert!(m.rows.plastic.miss > ConfusionModel::default().rows.plastic.miss);
    }

    #[test]
    fn validate_rejects_bad_rows() {
        let mut m = ConfusionModel::default();
        m.rows.metal.miss += 0.01;
        assert!(matches!(m.validate(), Err(ModelError::RowSum { class: Metal, .. })));
        let m = ConfusionModel { center_jitter_px: -1.0, ..ConfusionModel::default() };
        assert_eq!(m.validate(), Err(ModelError::Negative));
    }

    fn footprints(n: u64, class: MaterialClass) -> Vec<Footprint> {
        (0..n)
            .map(|i| Footprint {
                particle_id: i,
                bbox: BBox::new(Space::Global, class, 100.0 + (i % 50) as f64 * 110.0, 600.0, 100.0, 100.0),
            })
            .collect()
    }

    #[test]
    fn oracle_is_exact() {
        let cal = BeltCalibration::default();
        assert!(detect_oracle(0, &[], &cal).is_empty());
        let fps = footprints(3, Plastic);
        let dets = detect_oracle(4, &fps, &cal);
        assert_eq!(dets.len(), 3);
        for (d, f) in dets.iter().zip(&fps) {
            let g = segment_to_global(&d.bbox, &cal).unwrap();
            assert!((iou(&g, &f.bbox).unwrap() - 1.0).abs() < 1e-9);
            assert_eq!(g.class, Plastic);
            assert_eq!(d.source, Some(f.particle_id));
            assert_eq!(d.frame_id, 4);
        }
    }

    #[test]
    fn degenerate_model_equals_oracle() {
        let cal = BeltCalibration::default();
        let fps = footprints(40, Metal);
        let mut d = StochasticDetector::new(ConfusionModel::perfect(), 9).unwrap();
        assert_eq!(d.detect(1, &fps, &cal), detect_oracle(1, &fps, &cal));
    }

    fn outcome_fractions(class: MaterialClass, n: u64, seed: u64) -> [f64; 4] {
        let cal = BeltCalibration::default();
        let mut d = StochasticDetector::new(ConfusionModel::default(), seed).unwrap();
        let fps = footprints(n, class);
        let mut counts = [0u64; 4];
        let dets = d.detect(0, &fps, &cal);
        for det in &dets {
            counts[det.bbox.class.index()] += 1;
        }
        counts[3] = n - dets.len() as u64;
        counts.map(|c| c as f64 / n as f64)
    }

    #[test]
    fn stochastic_rates_plastic_and_metal() {
        let p = outcome_fractions(Plastic, 10_000, 1);
        assert!((p[CircuitBoard.index()] - 0.270).abs() < 0.015, "{p:?}");
        let m = outcome_fractions(Metal, 10_000, 2);
        assert!((m[Metal.index()] - 0.863).abs() < 0.012, "{m:?}");
    }

    #[test]
    fn stochastic_rates_converge_within_three_sigma() {
        let n = 100_000u64;
        let model = ConfusionModel::default();
        for (k, class) in MaterialClass::ALL.into_iter().enumerate() {
            let got = outcome_fractions(class, n, k as u64);
            let r = model.rows[class];
            for (i, want) in [r.metal, r.circuit_board, r.plastic, r.miss].into_iter().enumerate() {
                let se = libm::sqrt(want * (1.0 - want) / n as f64).max(1e-6);
                assert!((got[i] - want).abs() <= 3.0 * se + 1e-9, "{class} cell {i}: {} vs {want}", got[i]);
            }
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let cal = BeltCalibration::default();
        let fps = footprints(500, CircuitBoard);
        let mut a = StochasticDetector::new(ConfusionModel::default(), 77).unwrap();
        let mut b = a.clone();
        assert_eq!(a.detect(0, &fps, &cal), b.detect(0, &fps, &cal));
    }

    #[test]
    fn false_positives_are_sourceless() {
        let cal = BeltCalibration::default();
        let mut model = ConfusionModel::perfect();
        model.false_positives_per_frame.metal = 3.0;
        let mut d = StochasticDetector::new(model, 5).unwrap();
        let mut spurious = 0;
        for f in 0..200 {
            spurious += d.detect(f, &[], &cal).iter().filter(|d| d.source.is_none()).count();
        }
        assert!((spurious as f64 / 200.0 - 3.0).abs() < 0.5);
    }

    #[test]
    fn nms_examples() {
        // IoU of 100-px squares offset by 5 px is 0.905.
        let a = det(Metal, 100.0, 100.0, 100.0, 0.9, 0);
        let b = det(Metal, 105.0, 100.0, 100.0, 0.8, 1);
        let kept = nms_classwise(&[b, a], 0.5, 0.5).unwrap();
        assert_eq!(kept, alloc::vec![a]);

        let c = det(Plastic, 105.0, 100.0, 100.0, 0.8, 1);
        let kept = nms_classwise(&[a, c], 0.5, 0.5).unwrap();
        assert_eq!(kept.len(), 2);

        let low = det(Metal, 900.0, 100.0, 100.0, 0.49, 2);
        assert!(nms_classwise(&[low], 0.5, 0.5).unwrap().is_empty());
        let at = det(Metal, 900.0, 100.0, 100.0, 0.5, 2);
        assert_eq!(nms_classwise(&[at], 0.5, 0.5).unwrap().len(), 1);
    }

    #[test]
    fn nms_ties_break_by_source_then_x() {
        let a = det(Metal, 100.0, 100.0, 100.0, 0.7, 9);
        let b = det(Metal, 101.0, 100.0, 100.0, 0.7, 3);
        assert_eq!(nms_classwise(&[a, b], 0.5, 0.5).unwrap(), alloc::vec![b]);
        let mut c = a;
        c.source = None;
        let mut d = b;
        d.source = None;
        d.bbox.x_c = 99.0;
        assert_eq!(nms_classwise(&[c, d], 0.5, 0.5).unwrap(), alloc::vec![d]);
    }

    #[test]
    fn nms_rejects_mixed_spaces() {
        let a = det(Metal, 100.0, 100.0, 100.0, 0.7, 0);
        let mut b = a;
        b.bbox.space = Space::Segment(1);
        assert!(nms_classwise(&[a, b], 0.5, 0.5).is_err());
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        proptest::collection::vec(
            (0usize..3, 0.0..500.0f64, 0.0..500.0f64, 10.0..120.0f64, 0.0..1.0f64),
            0..60,
        )
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (c, x, y, s, conf))| {
                    det(MaterialClass::from_index(c).unwrap(), x, y, s, (conf * 10.0).round() / 10.0, i as u64)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn nms_output_suppression_free_and_idempotent(dets in arb_dets()) {
            let once = nms_classwise(&dets, 0.5, 0.5).unwrap();
            for (i, a) in once.iter().enumerate() {
                prop_assert!(a.bbox.confidence >= 0.5);
                for b in &once[i + 1..] {
                    if a.bbox.class == b.bbox.class {
                        prop_assert!(iou(&a.bbox, &b.bbox).unwrap() < 0.5);
                    }
                    prop_assert!(a.bbox.confidence >= b.bbox.confidence);
                }
            }
            let twice = nms_classwise(&once, 0.5, 0.5).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
