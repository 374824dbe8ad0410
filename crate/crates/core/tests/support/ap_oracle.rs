//! Brute-force AP: for every distinct score threshold, rerun matching on the
//! detections at or above it and take the resulting (recall, precision)
//! point; the area is the sum of recall steps times the best precision at
//! any later threshold.

use tfnet_core::boxes::{iou, Detection, GroundTruthFrame};

fn point_at(dets: &[Detection], gts: &[GroundTruthFrame], class_id: usize, thr: f64, npos: usize, iou_thr: f64) -> (f64, f64) {
    let mut kept: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class_id && d.score >= thr).collect();
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.boxes.len()]).collect();
    let mut tp = 0usize;
    for d in &kept {
        let Some(f) = gts.iter().position(|g| g.frame_id == d.frame_id) else {
            continue;
        };
        let mut best = None;
        let mut best_iou = f64::NEG_INFINITY;
        for (k, b) in gts[f].boxes.iter().enumerate() {
            if b.class_id == class_id && !used[f][k] {
                let v = iou(&d.bbox, &b.bbox);
                if v >= iou_thr && v > best_iou {
                    best = Some(k);
                    best_iou = v;
                }
            }
        }
        if let Some(k) = best {
            used[f][k] = true;
            tp += 1;
        }
    }
    (tp as f64 / npos as f64, tp as f64 / kept.len() as f64)
}

pub fn brute_force_ap(dets: &[Detection], gts: &[GroundTruthFrame], class_id: usize, iou_thr: f64) -> Option<f64> {
    let npos = gts.iter().flat_map(|g| &g.boxes).filter(|b| b.class_id == class_id).count();
    let mut thresholds: Vec<f64> = dets.iter().filter(|d| d.class_id == class_id).map(|d| d.score).collect();
    if npos == 0 {
        return if thresholds.is_empty() { None } else { Some(0.0) };
    }
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| point_at(dets, gts, class_id, t, npos, iou_thr))
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..points.len() {
        let best = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (points[k].0 - prev) * best;
        prev = points[k].0;
    }
    Some(ap)
}

/// Random scenario: up to `max_gt` GT boxes over a few frames and up to
/// `max_dets` detections, many of them jittered copies of GT boxes, with
/// scores drawn from a coarse grid so that ties occur.
pub fn random_instance(
    seed: u64,
    classes: usize,
    max_gt: usize,
    max_dets: usize,
) -> (Vec<Detection>, Vec<GroundTruthFrame>) {
    use rand::{Rng, SeedableRng};
    use tfnet_core::boxes::{BBox, GtBox};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let frames = rng.random_range(1..=4usize);
    let mut gts: Vec<GroundTruthFrame> = (0..frames)
        .map(|f| GroundTruthFrame {
            frame_id: format!("f{f}"),
            boxes: vec![],
        })
        .collect();
    let random_box = |rng: &mut rand_chacha::ChaCha8Rng| {
        let x = rng.random_range(0.0..80.0);
        let y = rng.random_range(0.0..80.0);
        BBox::new(x, y, x + rng.random_range(5.0..30.0), y + rng.random_range(5.0..30.0))
    };
    for _ in 0..rng.random_range(0..=max_gt) {
        let f = rng.random_range(0..frames);
        let bbox = random_box(&mut rng);
        gts[f].boxes.push(GtBox {
            class_id: rng.random_range(0..classes),
            bbox,
        });
    }
    let all: Vec<(usize, GtBox)> = gts
        .iter()
        .enumerate()
        .flat_map(|(f, g)| g.boxes.iter().map(move |b| (f, *b)))
        .collect();
    let mut dets = Vec::new();
    for _ in 0..rng.random_range(0..=max_dets) {
        let score = rng.random_range(1..=12) as f64 / 12.0;
        let (f, class_id, bbox) = if !all.is_empty() && rng.random_bool(0.6) {
            let (f, b) = all[rng.random_range(0..all.len())];
            let j = |rng: &mut rand_chacha::ChaCha8Rng| rng.random_range(-4.0..4.0);
            let bb = b.bbox;
            let jittered = BBox::new(bb.x1 + j(&mut rng), bb.y1 + j(&mut rng), bb.x2 + j(&mut rng), bb.y2 + j(&mut rng));
            let bbox = if jittered.is_valid() { jittered } else { bb };
            let class_id = if rng.random_bool(0.8) { b.class_id } else { rng.random_range(0..classes) };
            (f, class_id, bbox)
        } else {
            (rng.random_range(0..frames), rng.random_range(0..classes), random_box(&mut rng))
        };
        dets.push(Detection {
            frame_id: format!("f{f}"),
            class_id,
            score,
            bbox,
        });
    }
    (dets, gts)
}
