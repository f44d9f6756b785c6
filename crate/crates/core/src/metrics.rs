//! Detection and sortation metrics.
//!
//! Matching is greedy by descending confidence. AP uses 101-point
//! interpolation of the precision envelope (recall 0.00, 0.01, ..., 1.00).
//! Classes without ground truth are left out of mAP instead of scoring 0.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::detector::Detection;
use crate::geometry::{iou, BBox, GeometryError};
use crate::{MaterialClass, PerClass};

pub const AP_SAMPLES: usize = 101;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    core::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no ground truth for {0}; recall is undefined")]
    NoGroundTruth(MaterialClass),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Annotated object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassMode {
    /// Detections only match ground truth of their own class.
    Aware,
    /// Any class may match; used to build confusion matrices.
    Agnostic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetMatch {
    pub class: MaterialClass,
    pub confidence: f64,
    pub tp: bool,
    /// Index into the ground-truth slice.
    pub gt: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtMatch {
    pub class: MaterialClass,
    /// Index into the detection slice.
    pub det: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub iou_thresh: f64,
    pub dets: Vec<DetMatch>,
    pub gts: Vec<GtMatch>,
}

impl MatchResult {
    pub fn counts(&self, class: MaterialClass) -> Counts {
        let tp = self.dets.iter().filter(|d| d.class == class && d.tp).count() as u64;
        let det = self.dets.iter().filter(|d| d.class == class).count() as u64;
        let gt = self.gts.iter().filter(|g| g.class == class).count() as u64;
        Counts { tp, fp: det - tp, fn_: gt - tp }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Greedy one-to-one matching of detections to ground truth.
///
/// Detections are visited by descending confidence (input order breaks
/// ties). Each one looks at the unmatched ground truth in its image
/// (restricted to its class under [`ClassMode::Aware`]), picks the highest
/// IoU, and is a true positive iff that IoU reaches `iou_thresh`.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
    mode: ClassMode,
) -> Result<MatchResult, MetricsError> {
    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].bbox.confidence.total_cmp(&dets[a].bbox.confidence).then(a.cmp(&b)));

    let mut gt_taken: Vec<Option<usize>> = alloc::vec![None; gts.len()];
    let mut det_out: Vec<DetMatch> = dets
        .iter()
        .map(|d| DetMatch { class: d.bbox.class, confidence: d.bbox.confidence, tp: false, gt: None })
        .collect();
    for di in order {
        let d = &dets[di];
        let Some(cands) = by_image.get(&d.frame_id) else { continue };
        let mut best: Option<(usize, f64)> = None;
        for &gi in cands {
            if gt_taken[gi].is_some() {
                continue;
            }
            let g = &gts[gi];
            if mode == ClassMode::Aware && g.bbox.class != d.bbox.class {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox)?;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, v)) = best {
            if v >= iou_thresh {
                gt_taken[gi] = Some(di);
                det_out[di].tp = true;
                det_out[di].gt = Some(gi);
            }
        }
    }
    let gts_out = gts
        .iter()
        .zip(&gt_taken)
        .map(|(g, t)| GtMatch { class: g.bbox.class, det: *t })
        .collect();
    Ok(MatchResult { iou_thresh, dets: det_out, gts: gts_out })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Cumulative precision/recall sweep for one class.
///
/// Detections with equal confidence enter together, so only the end of
/// each tie block produces a point.
pub fn pr_curve(m: &MatchResult, class: MaterialClass) -> Result<Vec<PrPoint>, MetricsError> {
    let n_gt = m.gts.iter().filter(|g| g.class == class).count();
    if n_gt == 0 {
        return Err(MetricsError::NoGroundTruth(class));
    }
    let mut ds: Vec<&DetMatch> = m.dets.iter().filter(|d| d.class == class).collect();
    ds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut out = Vec::new();
    let (mut tp, mut seen) = (0u64, 0u64);
    for (i, d) in ds.iter().enumerate() {
        seen += 1;
        tp += u64::from(d.tp);
        let block_end = ds.get(i + 1).is_none_or(|n| n.confidence != d.confidence);
        if block_end {
            out.push(PrPoint { recall: tp as f64 / n_gt as f64, precision: tp as f64 / seen as f64 });
        }
    }
    Ok(out)
}

/// 101-point interpolated area under a PR curve.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len() - 1).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let total: f64 = (0..AP_SAMPLES)
        .map(|k| {
            let r = k as f64 / (AP_SAMPLES - 1) as f64;
            let idx = curve.partition_point(|p| p.recall < r);
            envelope.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    total / AP_SAMPLES as f64
}

/// AP per class at one threshold; `None` for classes without ground truth.
pub fn class_aps(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
) -> Result<PerClass<Option<f64>>, MetricsError> {
    let m = match_detections(dets, gts, iou_thresh, ClassMode::Aware)?;
    Ok(PerClass::from_fn(|c| pr_curve(&m, c).ok().map(|curve| average_precision(&curve))))
}

/// Arithmetic mean of the defined per-class APs (0 if none is defined).
pub fn mean_ap(aps: impl IntoIterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = aps.into_iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn map_at(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Result<f64, MetricsError> {
    let aps = class_aps(dets, gts, iou_thresh)?;
    Ok(mean_ap(aps.iter().map(|(_, v)| *v)))
}

/// Mean of mAP over the given IoU thresholds.
pub fn map_range(dets: &[Detection], gts: &[GroundTruth], thresholds: &[f64]) -> Result<f64, MetricsError> {
    if thresholds.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &t in thresholds {
        sum += map_at(dets, gts, t)?;
    }
    Ok(sum / thresholds.len() as f64)
}

/// Counts of predicted label (last column: missed) per true class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 4]; 3],
}

impl ConfusionMatrix {
    pub const MISS: usize = 3;

    pub fn record(&mut self, truth: MaterialClass, predicted: Option<MaterialClass>) {
        let col = predicted.map_or(Self::MISS, MaterialClass::index);
        self.counts[truth.index()][col] += 1;
    }

    /// Build from a class-agnostic match.
    pub fn from_match(m: &MatchResult) -> Self {
        let mut cm = Self::default();
        for g in &m.gts {
            cm.record(g.class, g.det.map(|d| m.dets[d].class));
        }
        cm
    }

    pub fn row_total(&self, truth: MaterialClass) -> u64 {
        self.counts[truth.index()].iter().sum()
    }

    /// Rows normalized to sum to 1; rows without samples stay all zero.
    pub fn normalized(&self) -> [[f64; 4]; 3] {
        core::array::from_fn(|t| {
            let total: u64 = self.counts[t].iter().sum();
            core::array::from_fn(|p| ratio(self.counts[t][p], total))
        })
    }

    /// Recall of `c` read off the diagonal.
    pub fn recall(&self, c: MaterialClass) -> f64 {
        ratio(self.counts[c.index()][c.index()], self.row_total(c))
    }

    /// Precision of `c` read off its predicted column.
    pub fn precision(&self, c: MaterialClass) -> f64 {
        let col: u64 = (0..3).map(|t| self.counts[t][c.index()]).sum();
        ratio(self.counts[c.index()][c.index()], col)
    }
}

/// AP a classifier guessing by class frequency would get: the class prior.
pub fn random_baseline(class_counts: &PerClass<u64>) -> PerClass<f64> {
    let total: u64 = class_counts.iter().map(|(_, n)| *n).sum();
    class_counts.map(|n| ratio(*n, total))
}

/// Share of the bin whose true class is `target`. An empty bin has purity 0.
pub fn purity<I>(bin: I, target: MaterialClass) -> f64
where
    I: IntoIterator<Item = MaterialClass>,
{
    let (mut hit, mut total) = (0u64, 0u64);
    for c in bin {
        total += 1;
        hit += u64::from(c == target);
    }
    if total == 0 {
        log::warn!("purity of an empty bin requested; reporting 0");
        return 0.0;
    }
    hit as f64 / total as f64
}

/// Fraction of ground truth matched (class-aware) at each IoU threshold.
pub fn detection_rate_vs_iou(
    dets: &[Detection],
    gts: &[GroundTruth],
    sweep: &[f64],
) -> Result<Vec<(f64, f64)>, MetricsError> {
    sweep
        .iter()
        .map(|&t| {
            let m = match_detections(dets, gts, t, ClassMode::Aware)?;
            let hit = m.gts.iter().filter(|g| g.det.is_some()).count() as u64;
            Ok((t, ratio(hit, gts.len() as u64)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub ap50: Option<f64>,
    pub gt_count: u64,
    pub det_count: u64,
}

/// Everything the evaluator reports.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class: PerClass<ClassMetrics>,
    pub map50: f64,
    pub map50_95: f64,
    pub confusion: ConfusionMatrix,
    pub random_baseline: PerClass<f64>,
    pub pr_curves: PerClass<Vec<PrPoint>>,
}

impl MetricsReport {
    pub fn evaluate(dets: &[Detection], gts: &[GroundTruth]) -> Result<Self, MetricsError> {
        let m50 = match_detections(dets, gts, 0.5, ClassMode::Aware)?;
        let pr_curves = PerClass::from_fn(|c| pr_curve(&m50, c).unwrap_or_default());
        let per_class = PerClass::from_fn(|c| {
            let k = m50.counts(c);
            ClassMetrics {
                precision: k.precision(),
                recall: k.recall(),
                ap50: pr_curve(&m50, c).ok().map(|curve| average_precision(&curve)),
                gt_count: k.tp + k.fn_,
                det_count: k.tp + k.fp,
            }
        });
        let map50 = mean_ap(per_class.iter().map(|(_, m)| m.ap50));
        let map50_95 = map_range(dets, gts, &coco_thresholds())?;
        let agnostic = match_detections(dets, gts, 0.5, ClassMode::Agnostic)?;
        let confusion = ConfusionMatrix::from_match(&agnostic);
        let random_baseline = random_baseline(&per_class.map(|m| m.gt_count));
        Ok(Self { per_class, map50, map50_95, confusion, random_baseline, pr_curves })
    }
}
