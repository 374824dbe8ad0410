//! Frame-level detection metrics: per-class AP, mAP, top-1 accuracies.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::boxes::{iou, Detection, GroundTruthFrame};
use crate::error::{Error, Result};

/// Detections of `class_id`, highest score first; ties keep input order.
pub fn ranked<'a>(dets: &'a [Detection], class_id: usize) -> Vec<&'a Detection> {
    let mut v: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class_id).collect();
    v.sort_by(|a, b| b.score.total_cmp(&a.score));
    v
}

/// Greedy matching in rank order: each detection takes the unmatched GT of
/// its class and frame with the highest IoU, if that IoU reaches
/// `iou_threshold`. Returns a true-positive flag per ranked detection.
pub fn match_ranked(ranked: &[&Detection], gts: &[GroundTruthFrame], class_id: usize, iou_threshold: f64) -> Vec<bool> {
    let by_frame: HashMap<&str, &GroundTruthFrame> = gts.iter().map(|g| (g.frame_id.as_str(), g)).collect();
    let mut used: HashMap<&str, Vec<bool>> = HashMap::new();
    ranked
        .iter()
        .map(|d| {
            let Some(frame) = by_frame.get(d.frame_id.as_str()) else {
                return false;
            };
            let flags = used
                .entry(frame.frame_id.as_str())
                .or_insert_with(|| vec![false; frame.boxes.len()]);
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in frame.boxes.iter().enumerate() {
                if g.class_id != class_id || flags[k] {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            match best {
                Some((k, _)) => {
                    flags[k] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

pub fn count_gt(gts: &[GroundTruthFrame], class_id: usize) -> usize {
    gts.iter()
        .flat_map(|g| &g.boxes)
        .filter(|b| b.class_id == class_id)
        .count()
}

/// Area under the precision envelope over `(recall, precision)` points given
/// in rank order (recall non-decreasing), starting from recall 0.
pub fn envelope_area(points: &[(f64, f64)]) -> f64 {
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for k in (0..points.len()).rev() {
        running = running.max(points[k].1);
        envelope[k] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        ap += (r - prev_recall) * envelope[k];
        prev_recall = r;
    }
    ap
}

/// All-point interpolated AP for one class. `None` when the class has
/// neither ground truth nor detections; `Some(0.0)` when only detections.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruthFrame], class_id: usize, iou_threshold: f64) -> Option<f64> {
    let ranked = ranked(dets, class_id);
    let npos = count_gt(gts, class_id);
    if npos == 0 {
        return if ranked.is_empty() { None } else { Some(0.0) };
    }
    let tp = match_ranked(&ranked, gts, class_id, iou_threshold);
    let mut points = Vec::new();
    let (mut ntp, mut nfp) = (0usize, 0usize);
    for k in 0..ranked.len() {
        if tp[k] {
            ntp += 1;
        } else {
            nfp += 1;
        }
        // equal scores are one operating point
        if k + 1 < ranked.len() && ranked[k + 1].score == ranked[k].score {
            continue;
        }
        points.push((ntp as f64 / npos as f64, ntp as f64 / (ntp + nfp) as f64));
    }
    Some(envelope_area(&points))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    /// `None` for classes excluded from the mean.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassAp>,
    pub map: f64,
    pub cls_accuracy: f64,
    pub localization: f64,
}

/// Highest-scoring detection of every frame; ties go to the lower class id.
fn top_per_frame(dets: &[Detection]) -> HashMap<&str, &Detection> {
    let mut top: HashMap<&str, &Detection> = HashMap::new();
    for d in dets {
        let e = top.entry(d.frame_id.as_str()).or_insert(d);
        if d.score > e.score || (d.score == e.score && d.class_id < e.class_id) {
            *e = d;
        }
    }
    top
}

/// Fraction of GT-bearing frames whose top detection has a class present in
/// the frame's ground truth. Frames without detections count as wrong.
pub fn classification_accuracy(dets: &[Detection], gts: &[GroundTruthFrame]) -> f64 {
    let top = top_per_frame(dets);
    frame_fraction(gts, |g| {
        top.get(g.frame_id.as_str())
            .is_some_and(|d| g.boxes.iter().any(|b| b.class_id == d.class_id))
    })
}

/// Fraction of GT-bearing frames whose top detection overlaps some GT box
/// with IoU at least `iou_threshold`, regardless of class.
pub fn localization_accuracy(dets: &[Detection], gts: &[GroundTruthFrame], iou_threshold: f64) -> f64 {
    let top = top_per_frame(dets);
    frame_fraction(gts, |g| {
        top.get(g.frame_id.as_str())
            .is_some_and(|d| g.boxes.iter().any(|b| iou(&b.bbox, &d.bbox) >= iou_threshold))
    })
}

fn frame_fraction(gts: &[GroundTruthFrame], hit: impl Fn(&GroundTruthFrame) -> bool) -> f64 {
    let frames: Vec<&GroundTruthFrame> = gts.iter().filter(|g| !g.boxes.is_empty()).collect();
    if frames.is_empty() {
        return 0.0;
    }
    frames.iter().filter(|g| hit(g)).count() as f64 / frames.len() as f64
}

/// Per-class AP pooled over all frames, their unweighted mean, and the
/// top-1 accuracies.
pub fn frame_map(dets: &[Detection], gts: &[GroundTruthFrame], class_names: &[String], iou_threshold: f64) -> Result<EvalReport> {
    let n = class_names.len();
    if let Some(d) = dets.iter().find(|d| d.class_id >= n) {
        return Err(Error::Data(format!("detection class {} outside {n} classes", d.class_id)));
    }
    if let Some(b) = gts.iter().flat_map(|g| &g.boxes).find(|b| b.class_id >= n) {
        return Err(Error::Data(format!("ground-truth class {} outside {n} classes", b.class_id)));
    }
    let classes: Vec<ClassAp> = class_names
        .iter()
        .enumerate()
        .map(|(c, name)| ClassAp {
            class_id: c,
            name: name.clone(),
            ap: average_precision(dets, gts, c, iou_threshold),
        })
        .collect();
    if (0..n).all(|c| count_gt(gts, c) == 0) {
        return Err(Error::Data("no class has ground truth to evaluate".into()));
    }
    let included: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    let map = included.iter().sum::<f64>() / included.len() as f64;
    Ok(EvalReport {
        classes,
        map,
        cls_accuracy: classification_accuracy(dets, gts),
        localization: localization_accuracy(dets, gts, 0.5),
    })
}

/// At least three decimals, but always enough digits to parse back exactly.
pub fn format_exact(v: f64) -> String {
    let short = format!("{v:.3}");
    if short.parse::<f64>() == Ok(v) {
        short
    } else {
        format!("{v}")
    }
}

const EXCLUDED: &str = "-";

/// Text table: header, one `class_id name AP` row per class, then the
/// summary lines.
pub fn format_report(r: &EvalReport) -> String {
    let mut s = String::from("class_id name AP\n");
    for c in &r.classes {
        let ap = c.ap.map(format_exact).unwrap_or_else(|| EXCLUDED.to_string());
        writeln!(s, "{} {} {}", c.class_id, c.name, ap).unwrap();
    }
    writeln!(s, "mAP {}", format_exact(r.map)).unwrap();
    writeln!(s, "cls-accuracy {}", format_exact(r.cls_accuracy)).unwrap();
    writeln!(s, "localization {}", format_exact(r.localization)).unwrap();
    s
}

pub fn parse_report(text: &str, path: &Path) -> Result<EvalReport> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let num = |line: usize, s: &str| s.parse::<f64>().map_err(|_| err(line, format!("bad number '{s}'")));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, "class_id name AP")) => {}
        Some((n, l)) => return Err(err(n, format!("unexpected header '{l}'"))),
        None => return Err(err(1, "empty report".into())),
    }
    let mut classes = Vec::new();
    let mut summary: HashMap<&str, f64> = HashMap::new();
    for (n, line) in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            [key @ ("mAP" | "cls-accuracy" | "localization"), v] => {
                summary.insert(key, num(n, v)?);
            }
            [id, name, ap] if summary.is_empty() => {
                let class_id = id.parse().map_err(|_| err(n, format!("bad class id '{id}'")))?;
                let ap = if *ap == EXCLUDED { None } else { Some(num(n, ap)?) };
                classes.push(ClassAp {
                    class_id,
                    name: name.to_string(),
                    ap,
                });
            }
            _ => return Err(err(n, format!("unexpected line '{line}'"))),
        }
    }
    let get = |k: &str| {
        summary
            .get(k)
            .copied()
            .ok_or_else(|| err(text.lines().count(), format!("missing '{k}' line")))
    };
    Ok(EvalReport {
        classes,
        map: get("mAP")?,
        cls_accuracy: get("cls-accuracy")?,
        localization: get("localization")?,
    })
}
