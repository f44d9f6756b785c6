use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use aris::commands::evaluate;
use aris_core::MaterialClass;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/eval")
}

fn golden() -> HashMap<String, f64> {
    let text = fs::read_to_string(fixture().join("golden.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

#[test]
fn matches_brute_force_golden() {
    let out = tempfile::tempdir().unwrap();
    let r = evaluate(&fixture().join("annotations"), &fixture().join("detections.csv"), out.path()).unwrap();
    let g = golden();
    let close = |key: &str, v: f64| assert!((g[key] - v).abs() < 1e-9, "{key}: golden {} got {v}", g[key]);
    for c in MaterialClass::ALL {
        let m = &r.per_class[c];
        let n = c.name();
        close(&format!("{n}.precision"), m.precision);
        close(&format!("{n}.recall"), m.recall);
        close(&format!("{n}.ap50"), m.ap50.unwrap());
        close(&format!("{n}.gt"), m.gt_count as f64);
        close(&format!("{n}.det"), m.det_count as f64);
        for (j, col) in ["metal", "circuit_board", "plastic", "miss"].iter().enumerate() {
            close(&format!("confusion.{n}.{col}"), r.confusion.counts[c.index()][j] as f64);
        }
    }
    close("map50", r.map50);
    close("map50_95", r.map50_95);
    for f in ["metrics.csv", "confusion.csv", "pr_curves.csv"] {
        assert!(out.path().join(f).exists(), "{f}");
    }
}

fn ann_to_dets(dir: &Path) -> String {
    let mut csv = String::from("frame_id,class,x_c,y_c,w,h,confidence\n");
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        let stem = p.file_stem().unwrap().to_str().unwrap().to_string();
        for l in fs::read_to_string(&p).unwrap().lines() {
            let f: Vec<&str> = l.split_whitespace().collect();
            let c = MaterialClass::from_index(f[0].parse().unwrap()).unwrap();
            csv += &format!("{stem},{},{},{},{},{},0.9\n", c.name(), f[1], f[2], f[3], f[4]);
        }
    }
    csv
}

#[test]
fn ground_truth_as_detections_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let ann = fixture().join("annotations");
    let dets = dir.path().join("dets.csv");
    fs::write(&dets, ann_to_dets(&ann)).unwrap();
    let r = evaluate(&ann, &dets, &dir.path().join("out")).unwrap();
    for c in MaterialClass::ALL {
        assert_eq!(r.per_class[c].precision, 1.0);
        assert_eq!(r.per_class[c].recall, 1.0);
        assert_eq!(r.per_class[c].ap50, Some(1.0));
    }
    assert_eq!(r.map50, 1.0);
    assert_eq!(r.map50_95, 1.0);
    let metrics = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert!(metrics.contains("mAP@0.50,,,100.0000"), "{metrics}");
}

#[test]
fn no_detections_gives_zero_ap() {
    let dir = tempfile::tempdir().unwrap();
    let dets = dir.path().join("dets.csv");
    fs::write(&dets, "frame_id,class,x_c,y_c,w,h,confidence\n").unwrap();
    let r = evaluate(&fixture().join("annotations"), &dets, dir.path()).unwrap();
    for c in MaterialClass::ALL {
        assert_eq!(r.per_class[c].ap50, Some(0.0));
        assert_eq!(r.per_class[c].recall, 0.0);
    }
    assert_eq!(r.map50, 0.0);
}

#[test]
fn bad_input_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let dets = dir.path().join("dets.csv");
    fs::write(&dets, "frame_id,class,x_c,y_c,w,h,confidence\nimg_000,metal,0.5,0.5,0.1,0.1,0.9\nimg_000,glass,0.5,0.5,0.1,0.1,0.9\n")
        .unwrap();
    let e = evaluate(&fixture().join("annotations"), &dets, dir.path()).unwrap_err();
    let msg = format!("{e:#}");
    assert!(msg.contains("dets.csv:3") && msg.contains("glass"), "{msg}");
}
