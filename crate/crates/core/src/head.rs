//! YOLO-style detection grid: 5 anchored boxes per cell.
//!
//! Channel layout for anchor `a`: `a·(5+K) + {0: tx, 1: ty, 2: tw, 3: th,
//! 4: to, 5..: class logits}`. Boxes live in image-fraction coordinates
//! until decoding converts them to pixels.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox, Detection, GroundTruthFrame};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BOX_FIELDS: usize = 5;

pub const DEFAULT_ANCHORS: [[f64; 2]; 5] = [[0.05, 0.08], [0.1, 0.2], [0.2, 0.4], [0.4, 0.6], [0.7, 0.8]];

/// Channels of the head tensor for `num_classes` and `anchors` priors.
pub fn head_channels(num_classes: usize, anchors: usize) -> usize {
    (BOX_FIELDS + num_classes) * anchors
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// `(width, height)` priors as fractions of the image size.
    pub anchors: Vec<[f64; 2]>,
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    pub conf_threshold: f64,
    pub nms_threshold: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            anchors: DEFAULT_ANCHORS.to_vec(),
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
            conf_threshold: 0.01,
            nms_threshold: 0.45,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors.is_empty() {
            return Err(Error::config("head.anchors must not be empty"));
        }
        for a in &self.anchors {
            if !(a[0] > 0.0 && a[1] > 0.0 && a[0].is_finite() && a[1].is_finite()) {
                return Err(Error::config(format!("anchor {a:?} must be positive")));
            }
        }
        if !(self.lambda_coord >= 0.0 && self.lambda_noobj >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) || !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(Error::config("head thresholds must lie in [0, 1]"));
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Geometry of a single `C×S×S` grid.
#[derive(Debug, Clone, Copy)]
struct GridDims {
    classes: usize,
    anchors: usize,
    size: usize,
}

impl GridDims {
    fn of(shape: &[usize], anchors: usize) -> Result<Self> {
        if shape.len() != 3 || shape[1] != shape[2] || anchors == 0 || shape[0] % anchors != 0 {
            return Err(Error::shape(format!("detection grid {shape:?} with {anchors} anchors")));
        }
        let per = shape[0] / anchors;
        if per <= BOX_FIELDS {
            return Err(Error::shape(format!("detection grid {shape:?} has no class channels")));
        }
        Ok(GridDims {
            classes: per - BOX_FIELDS,
            anchors,
            size: shape[1],
        })
    }

    fn index(&self, anchor: usize, field: usize, i: usize, j: usize) -> usize {
        ((anchor * (BOX_FIELDS + self.classes) + field) * self.size + i) * self.size + j
    }
}

/// Predicted box in image fractions for one slot.
fn slot_box(data: &[f64], d: &GridDims, anchor: [f64; 2], a: usize, i: usize, j: usize) -> BBox {
    let s = d.size as f64;
    let cx = (j as f64 + sigmoid(data[d.index(a, 0, i, j)])) / s;
    let cy = (i as f64 + sigmoid(data[d.index(a, 1, i, j)])) / s;
    let w = anchor[0] * data[d.index(a, 2, i, j)].exp();
    let h = anchor[1] * data[d.index(a, 3, i, j)].exp();
    BBox::from_center(cx, cy, w, h)
}

/// Detections of one `C×S×S` grid with score `σ(to)·max class prob`
/// at least `threshold`, in pixel corners clipped to the image.
pub fn decode(
    grid: &Tensor,
    anchors: &[[f64; 2]],
    image_size: (usize, usize),
    threshold: f64,
    frame_id: &str,
) -> Result<Vec<Detection>> {
    let d = GridDims::of(grid.shape(), anchors.len())?;
    let data = grid.data();
    let (iw, ih) = (image_size.0 as f64, image_size.1 as f64);
    let mut out = Vec::new();
    for i in 0..d.size {
        for j in 0..d.size {
            for (a, &anchor) in anchors.iter().enumerate() {
                let conf = sigmoid(data[d.index(a, 4, i, j)]);
                let logits: Vec<f64> = (0..d.classes).map(|k| data[d.index(a, 5 + k, i, j)]).collect();
                let probs = softmax(&logits);
                let (class_id, p) = probs
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, p)| if p > best.1 { (k, p) } else { best });
                let score = conf * p;
                if score < threshold {
                    continue;
                }
                let bbox = slot_box(data, &d, anchor, a, i, j).scale(iw, ih).clip(iw, ih);
                if !bbox.is_valid() {
                    continue;
                }
                out.push(Detection {
                    frame_id: frame_id.to_string(),
                    class_id,
                    score,
                    bbox,
                });
            }
        }
    }
    Ok(out)
}

/// One ground-truth box bound to a grid slot; coordinates in image fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub cell: (usize, usize),
    pub anchor: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    pub targets: Vec<Target>,
    /// GT boxes that found no free anchor in their cell.
    pub dropped: usize,
}

fn centered_iou(w: f64, h: f64, anchor: [f64; 2]) -> f64 {
    let inter = w.min(anchor[0]) * h.min(anchor[1]);
    inter / (w * h + anchor[0] * anchor[1] - inter)
}

/// Binds each GT box to the cell holding its center and to the free anchor
/// with the highest centered IoU. Boxes are in pixels of an image of
/// `image_size`.
pub fn assign_targets(
    gt: &GroundTruthFrame,
    anchors: &[[f64; 2]],
    grid_size: usize,
    image_size: (usize, usize),
) -> Assignment {
    let (iw, ih) = (image_size.0 as f64, image_size.1 as f64);
    let s = grid_size as f64;
    let mut taken = std::collections::HashSet::new();
    let mut out = Assignment::default();
    for b in &gt.boxes {
        let nb = b.bbox.scale(1.0 / iw, 1.0 / ih);
        let (cx, cy) = nb.center();
        let cell = (
            ((cy * s).floor().max(0.0) as usize).min(grid_size - 1),
            ((cx * s).floor().max(0.0) as usize).min(grid_size - 1),
        );
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        let scores: Vec<f64> = anchors.iter().map(|&a| centered_iou(nb.width(), nb.height(), a)).collect();
        order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y)));
        match order.into_iter().find(|&a| !taken.contains(&(cell, a))) {
            Some(anchor) => {
                taken.insert((cell, anchor));
                out.targets.push(Target {
                    cell,
                    anchor,
                    class_id: b.class_id,
                    bbox: nb,
                });
            }
            None => out.dropped += 1,
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub coord: f64,
    pub noobj: f64,
}

impl From<&HeadConfig> for LossWeights {
    fn from(c: &HeadConfig) -> Self {
        LossWeights {
            coord: c.lambda_coord,
            noobj: c.lambda_noobj,
        }
    }
}

/// Objectness targets `IoU(pred, gt)` for every assigned slot; they are
/// constants of the loss (no gradient flows through them).
pub fn objectness_targets(grid: &Tensor, anchors: &[[f64; 2]], assignment: &Assignment) -> Result<Vec<f64>> {
    let d = GridDims::of(grid.shape(), anchors.len())?;
    Ok(assignment
        .targets
        .iter()
        .map(|t| iou(&slot_box(grid.data(), &d, anchors[t.anchor], t.anchor, t.cell.0, t.cell.1), &t.bbox))
        .collect())
}

/// Loss and gradient of one grid with explicit objectness targets.
pub fn grid_loss_with_targets(
    grid: &Tensor,
    anchors: &[[f64; 2]],
    assignment: &Assignment,
    obj_targets: &[f64],
    weights: LossWeights,
) -> Result<(f64, Tensor)> {
    let d = GridDims::of(grid.shape(), anchors.len())?;
    if obj_targets.len() != assignment.targets.len() {
        return Err(Error::contract("objectness targets do not match assignment"));
    }
    let x = grid.data();
    let mut g = vec![0.0; x.len()];
    let mut loss = 0.0;
    let mut responsible = vec![None; d.anchors * d.size * d.size];
    for (k, t) in assignment.targets.iter().enumerate() {
        if t.class_id >= d.classes || t.cell.0 >= d.size || t.cell.1 >= d.size || t.anchor >= d.anchors {
            return Err(Error::contract(format!("target {t:?} outside grid {:?}", grid.shape())));
        }
        responsible[(t.anchor * d.size + t.cell.0) * d.size + t.cell.1] = Some(k);
    }
    let s = d.size as f64;
    for a in 0..d.anchors {
        for i in 0..d.size {
            for j in 0..d.size {
                let io = d.index(a, 4, i, j);
                let so = sigmoid(x[io]);
                let Some(k) = responsible[(a * d.size + i) * d.size + j] else {
                    loss += weights.noobj * so * so;
                    g[io] += weights.noobj * 2.0 * so * so * (1.0 - so);
                    continue;
                };
                let t = &assignment.targets[k];
                let (cx, cy) = t.bbox.center();
                let coord_targets = [cx * s - j as f64, cy * s - i as f64];
                for (f, &target) in coord_targets.iter().enumerate() {
                    let idx = d.index(a, f, i, j);
                    let sv = sigmoid(x[idx]);
                    loss += weights.coord * (sv - target).powi(2);
                    g[idx] += weights.coord * 2.0 * (sv - target) * sv * (1.0 - sv);
                }
                let sizes = [t.bbox.width(), t.bbox.height()];
                for f in 0..2 {
                    let idx = d.index(a, 2 + f, i, j);
                    let root = (anchors[a][f] * x[idx].exp()).sqrt();
                    let diff = root - sizes[f].sqrt();
                    loss += weights.coord * diff * diff;
                    g[idx] += weights.coord * diff * root;
                }
                let target = obj_targets[k];
                loss += (so - target).powi(2);
                g[io] += 2.0 * (so - target) * so * (1.0 - so);

                let logits: Vec<f64> = (0..d.classes).map(|c| x[d.index(a, 5 + c, i, j)]).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - logits[t.class_id];
                for (c, &l) in logits.iter().enumerate() {
                    let p = (l - lse).exp();
                    g[d.index(a, 5 + c, i, j)] += p - if c == t.class_id { 1.0 } else { 0.0 };
                }
            }
        }
    }
    Ok((loss, Tensor::new(grid.shape().to_vec(), g)?))
}

/// Batch loss (mean over items) and its gradient for `N×C×S×S` grids.
pub fn detection_loss(
    grids: &Tensor,
    anchors: &[[f64; 2]],
    assignments: &[Assignment],
    weights: LossWeights,
) -> Result<(f64, Tensor)> {
    grids.expect_rank(4, "detection loss")?;
    let n = grids.dim(0);
    if assignments.len() != n {
        return Err(Error::contract(format!(
            "{} assignments for a batch of {n}",
            assignments.len()
        )));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(n);
    for (b, assignment) in assignments.iter().enumerate() {
        let grid = grids.item(b);
        let targets = objectness_targets(&grid, anchors, assignment)?;
        let (l, g) = grid_loss_with_targets(&grid, anchors, assignment, &targets, weights)?;
        total += l;
        grads.push(g.scale(1.0 / n as f64));
    }
    Ok((total / n as f64, Tensor::stack(&grads)?))
}

/// Grid whose decoding reproduces the assigned boxes: responsible slots get
/// exact inverse coordinates, saturated objectness and class logits; all
/// other slots are confidently empty.
pub fn encode_targets(assignment: &Assignment, anchors: &[[f64; 2]], num_classes: usize, grid_size: usize) -> Tensor {
    let d = GridDims {
        classes: num_classes,
        anchors: anchors.len(),
        size: grid_size,
    };
    let mut x = vec![0.0; head_channels(num_classes, anchors.len()) * grid_size * grid_size];
    for a in 0..d.anchors {
        for i in 0..d.size {
            for j in 0..d.size {
                x[d.index(a, 4, i, j)] = -40.0;
            }
        }
    }
    let s = grid_size as f64;
    for t in &assignment.targets {
        let (i, j, a) = (t.cell.0, t.cell.1, t.anchor);
        let (cx, cy) = t.bbox.center();
        x[d.index(a, 0, i, j)] = logit(cx * s - j as f64);
        x[d.index(a, 1, i, j)] = logit(cy * s - i as f64);
        x[d.index(a, 2, i, j)] = (t.bbox.width() / anchors[a][0]).ln();
        x[d.index(a, 3, i, j)] = (t.bbox.height() / anchors[a][1]).ln();
        x[d.index(a, 4, i, j)] = 40.0;
        x[d.index(a, 5 + t.class_id, i, j)] = 40.0;
    }
    Tensor::new(vec![d.anchors * (BOX_FIELDS + num_classes), grid_size, grid_size], x).expect("sized above")
}

/// Descending score, then ascending class id.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class_id.cmp(&b.class_id)));
}

/// Per-class greedy suppression of boxes overlapping a kept one by more
/// than `threshold`.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sort_detections(&mut sorted);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.frame_id == d.frame_id && iou(&k.bbox, &d.bbox) > threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// `frame_id class_id score x1 y1 x2 y2`, one detection per line.
pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = d.bbox;
        writeln!(
            s,
            "{} {} {} {} {} {} {}",
            d.frame_id, d.class_id, d.score, b.x1, b.y1, b.x2, b.y2
        )
        .unwrap();
    }
    s
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(format_detections(dets).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", fields.len())));
        }
        let class_id = fields[1]
            .parse::<usize>()
            .map_err(|_| err(format!("bad class id '{}'", fields[1])))?;
        let mut nums = [0.0; 5];
        for (v, f) in nums.iter_mut().zip(&fields[2..]) {
            *v = f.parse::<f64>().map_err(|_| err(format!("bad number '{f}'")))?;
        }
        let bbox = BBox::new(nums[1], nums[2], nums[3], nums[4]);
        if !bbox.is_valid() {
            return Err(err(format!("invalid box {bbox}")));
        }
        if !(0.0..=1.0).contains(&nums[0]) {
            return Err(err(format!("score {} outside [0, 1]", nums[0])));
        }
        out.push(Detection {
            frame_id: fields[0].to_string(),
            class_id,
            score: nums[0],
            bbox,
        });
    }
    Ok(out)
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, path)
}
