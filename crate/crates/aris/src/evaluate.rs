//! File-based evaluation: YOLO annotations against a detections CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use aris_core::metrics::{GroundTruth, MetricsReport};
use aris_core::{BBox, Detection, MaterialClass};

#[derive(Debug, thiserror::Error)]
pub enum InputError {
    #[error("{}:{line}: {msg}", file.display())]
    Line { file: PathBuf, line: usize, msg: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
}

fn line_err(file: &Path, line: usize, msg: impl Into<String>) -> InputError {
    InputError::Line { file: file.to_path_buf(), line, msg: msg.into() }
}

fn unit(file: &Path, line: usize, what: &str, s: &str) -> Result<f64, InputError> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| line_err(file, line, format!("{what} `{s}` is not a number")))
}

fn normalized_box(
    file: &Path,
    line: usize,
    class: MaterialClass,
    f: [&str; 4],
) -> Result<BBox, InputError> {
    let x = unit(file, line, "x_c", f[0])?;
    let y = unit(file, line, "y_c", f[1])?;
    let w = unit(file, line, "w", f[2])?;
    let h = unit(file, line, "h", f[3])?;
    BBox::normalized(class, x, y, w, h).map_err(|e| line_err(file, line, e.to_string()))
}

/// Parse one YOLO annotation file: `class x_c y_c w h` per line, all
/// coordinates normalized. Blank lines are skipped.
pub fn parse_annotation(file: &Path, text: &str) -> Result<Vec<BBox>, InputError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let f: Vec<&str> = raw.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 5 {
            return Err(line_err(file, line, format!("expected 5 fields, found {}", f.len())));
        }
        let class: MaterialClass =
            f[0].parse().map_err(|_| line_err(file, line, format!("unknown class `{}`", f[0])))?;
        out.push(normalized_box(file, line, class, [f[1], f[2], f[3], f[4]])?);
    }
    Ok(out)
}

/// All `*.txt` files in `dir`, keyed by file stem.
pub fn read_annotations(dir: &Path) -> Result<BTreeMap<String, Vec<BBox>>, InputError> {
    let io = |source| InputError::Io { path: dir.to_path_buf(), source };
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let text = std::fs::read_to_string(&path).map_err(|source| InputError::Io { path: path.clone(), source })?;
        out.insert(stem.to_string(), parse_annotation(&path, &text)?);
    }
    Ok(out)
}

/// Detections CSV `frame_id,class,x_c,y_c,w,h,confidence`, normalized.
pub fn read_detections(path: &Path) -> Result<Vec<(String, BBox)>, InputError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| InputError::Csv { path: path.to_path_buf(), source })?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|source| InputError::Csv { path: path.to_path_buf(), source })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 7 {
            return Err(line_err(path, line, format!("expected 7 fields, found {}", rec.len())));
        }
        let class: MaterialClass =
            rec[1].parse().map_err(|_| line_err(path, line, format!("unknown class `{}`", &rec[1])))?;
        let conf = unit(path, line, "confidence", &rec[6])?;
        if !(0.0..=1.0).contains(&conf) {
            return Err(line_err(path, line, format!("confidence {conf} outside [0, 1]")));
        }
        let b = normalized_box(path, line, class, [&rec[2], &rec[3], &rec[4], &rec[5]])?.with_confidence(conf);
        out.push((rec[0].to_string(), b));
    }
    Ok(out)
}

/// Number images by sorted stem; detections on unknown stems get fresh ids.
pub fn assemble(
    annotations: &BTreeMap<String, Vec<BBox>>,
    detections: &[(String, BBox)],
) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut ids: BTreeMap<&str, u64> = annotations.keys().enumerate().map(|(i, k)| (k.as_str(), i as u64)).collect();
    let gts = annotations
        .iter()
        .flat_map(|(k, boxes)| {
            let id = ids[k.as_str()];
            boxes.iter().map(move |&bbox| GroundTruth { image_id: id, bbox })
        })
        .collect();
    let dets = detections
        .iter()
        .map(|(k, bbox)| {
            let next = ids.len() as u64;
            let id = *ids.entry(k.as_str()).or_insert(next);
            Detection { bbox: *bbox, frame_id: id, source: None }
        })
        .collect();
    (dets, gts)
}

fn pct(v: f64) -> String {
    format!("{:.4}", 100.0 * v)
}

/// Table mirroring precision / recall / AP per class, plus mAP rows.
pub fn write_metrics<W: Write>(w: W, r: &MetricsReport) -> anyhow::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["class", "precision", "recall", "ap50", "gt", "det", "random_baseline"])?;
    for c in MaterialClass::ALL {
        let m = &r.per_class[c];
        out.write_record([
            c.name().to_string(),
            pct(m.precision),
            pct(m.recall),
            m.ap50.map(pct).unwrap_or_default(),
            m.gt_count.to_string(),
            m.det_count.to_string(),
            pct(r.random_baseline[c]),
        ])?;
    }
    out.write_record(["mAP@0.50", "", "", &pct(r.map50), "", "", ""])?;
    out.write_record(["mAP@0.50:0.95", "", "", &pct(r.map50_95), "", "", ""])?;
    out.flush()?;
    Ok(())
}

/// Row-normalized confusion matrix with an explicit miss column.
pub fn write_confusion<W: Write>(w: W, r: &MetricsReport) -> anyhow::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["true_class", "metal", "circuit_board", "plastic", "miss", "count"])?;
    let n = r.confusion.normalized();
    for c in MaterialClass::ALL {
        let row = n[c.index()];
        let mut rec = vec![c.name().to_string()];
        rec.extend(row.iter().map(|v| format!("{v:.6}")));
        rec.push(r.confusion.row_total(c).to_string());
        out.write_record(rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_pr_curves<W: Write>(w: W, r: &MetricsReport) -> anyhow::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["class", "rank", "precision", "recall"])?;
    for c in MaterialClass::ALL {
        for (i, p) in r.pr_curves[c].iter().enumerate() {
            out.write_record([c.name().to_string(), (i + 1).to_string(), format!("{:.9}", p.precision), format!("{:.9}", p.recall)])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn metrics_text(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:>9} {:>9} {:>9}", "class", "precision", "recall", "AP50");
    for c in MaterialClass::ALL {
        let m = &r.per_class[c];
        let ap = m.ap50.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "{:<14} {:>9.1} {:>9.1} {:>9}", c.name(), 100.0 * m.precision, 100.0 * m.recall, ap);
    }
    let _ = writeln!(s, "mAP@0.50       {:.1}", 100.0 * r.map50);
    let _ = writeln!(s, "mAP@0.50:0.95  {:.1}", 100.0 * r.map50_95);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_errors_carry_location() {
        let p = Path::new("a.txt");
        assert_eq!(parse_annotation(p, "0 0.5 0.5 0.1 0.1\n\n2 0.2 0.2 0.1 0.1\n").unwrap().len(), 2);
        let e = parse_annotation(p, "0 0.5 0.5 0.1 0.1\n1 0.5 0.5 0.1\n").unwrap_err();
        assert_eq!(e.to_string(), "a.txt:2: expected 5 fields, found 4");
        let e = parse_annotation(p, "7 0.5 0.5 0.1 0.1\n").unwrap_err();
        assert!(e.to_string().starts_with("a.txt:1: unknown class"));
        let e = parse_annotation(p, "0 1.5 0.5 0.1 0.1\n").unwrap_err();
        assert!(e.to_string().starts_with("a.txt:1:"));
        let e = parse_annotation(p, "0 x 0.5 0.1 0.1\n").unwrap_err();
        assert!(e.to_string().contains("x_c"));
    }
}
