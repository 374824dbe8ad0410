//! SGD training, evaluation on held clips, guided-backprop saliency and the
//! DCT channel-count sweep.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::boxes::{Detection, GroundTruthFrame, GtBox};
use crate::checkpoint::save_checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::data::{augment, load_clip, ClipSample, DatasetIndex};
use crate::error::{Error, Result};
use crate::head::{assign_targets, decode, detection_loss, nms, sigmoid, LossWeights, BOX_FIELDS};
use crate::imaging::save_gray;
use crate::metrics::{frame_map, EvalReport};
use crate::model::TfNet;
use crate::nn::{Backprop, Mode, Parameterized, TensorRole};
use crate::tensor::Tensor;

/// Step-halving schedule: the initial rate halves every `halving_interval`
/// iterations.
pub fn learning_rate(cfg: &TrainConfig, iteration: usize) -> f64 {
    cfg.initial_lr * 0.5f64.powi((iteration / cfg.halving_interval) as i32)
}

/// Classical momentum: `v ← μv + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `grads` must follow the model's parameter visit order.
    pub fn step(&mut self, model: &mut dyn Parameterized, grads: &[Tensor], lr: f64) -> Result<()> {
        let shapes = model.param_shapes();
        if shapes.len() != grads.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                shapes.len()
            )));
        }
        for (k, (s, g)) in shapes.iter().zip(grads).enumerate() {
            if s.as_slice() != g.shape() {
                return Err(Error::contract(format!(
                    "gradient {k} has shape {:?}, parameter has {s:?}",
                    g.shape()
                )));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        }
        let mu = self.momentum;
        let mut k = 0;
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |_, p, role| {
            if role != TensorRole::Param {
                return;
            }
            let v = velocity[k].data_mut();
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grads[k].data()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
            k += 1;
        });
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for one purpose derived from the run seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed, |acc, &p| splitmix(acc ^ splitmix(p)))
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_SAMPLE: u64 = 2;

/// One randomly placed, augmented training clip.
pub fn training_sample(cfg: &RunConfig, data: &DatasetIndex, video: usize, seed: u64) -> Result<ClipSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = &data.videos[video];
    let stride = if cfg.augment.enabled {
        rng.random_range(1..=cfg.augment.max_stride)
    } else {
        1
    };
    let span = (cfg.clip.clip_depth - 1) * stride + 1;
    let start = rng.random_range(0..=v.frame_count().saturating_sub(span));
    let clip = load_clip(v, start, stride, &cfg.clip)?;
    Ok(augment(&clip, &cfg.augment, rng.random()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStep {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl std::fmt::Display for TrainStep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {} {}", self.iteration, self.loss, self.lr)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub steps: Vec<TrainStep>,
    /// GT boxes that found no free anchor, summed over all batches.
    pub dropped_targets: usize,
}

/// Sibling of the final checkpoint holding the state after `iteration`.
pub fn periodic_checkpoint_path(final_path: &Path, iteration: usize) -> std::path::PathBuf {
    let stem = final_path.file_stem().and_then(|s| s.to_str()).unwrap_or("ckpt");
    final_path.with_file_name(format!("{stem}.iter{iteration:06}.tfck"))
}

/// Trains a fresh model seeded from `cfg.seed`. With `checkpoint`, the final
/// state is written there and intermediate states every `checkpoint_every`
/// iterations next to it.
pub fn train(
    cfg: &RunConfig,
    data: &DatasetIndex,
    checkpoint: Option<&Path>,
    on_step: &mut dyn FnMut(&TrainStep),
) -> Result<(TfNet, TrainSummary)> {
    let mut cfg = cfg.clone();
    let classes = data.classes.len();
    match cfg.model.num_classes {
        Some(n) if n != classes => {
            return Err(Error::config(format!(
                "model.num_classes {n} but the dataset lists {classes} classes"
            )))
        }
        _ => cfg.model.num_classes = Some(classes),
    }
    let mut model = TfNet::seeded(&cfg, classes)?;
    let tc = &cfg.train;
    let weights = LossWeights::from(&cfg.head);
    let key = (cfg.clip.keyframe_size, cfg.clip.keyframe_size);
    let mut sgd = Sgd::new(tc.momentum);
    let mut summary = TrainSummary::default();
    let mut iteration = 0;
    let limit = tc.max_iterations.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..data.videos.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, STREAM_SHUFFLE, epoch as u64])));
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            if iteration >= limit {
                break 'epochs;
            }
            let samples = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &v)| {
                    let seed = derive_seed(&[cfg.seed, STREAM_SAMPLE, iteration as u64, slot as u64]);
                    training_sample(&cfg, data, v, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let assignments: Vec<_> = samples
                .iter()
                .map(|s| assign_targets(&s.gt, &model.anchors, model.grid_size, key))
                .collect();
            summary.dropped_targets += assignments.iter().map(|a| a.dropped).sum::<usize>();
            let input = model.prepare(&samples)?;
            let (grid, cache) = model.forward(&input, Mode::Train)?;
            let (loss, grad) = detection_loss(&grid, &model.anchors, &assignments, weights)?;
            let ids: Vec<&str> = samples.iter().map(|s| s.gt.frame_id.as_str()).collect();
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss {loss} at iteration {iteration} (epoch {epoch} batch {b}: {})",
                    ids.join(" ")
                )));
            }
            let (_, mut grads) = model.backward(&cache, &grad, &mut Backprop::plain())?;
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at iteration {iteration} (epoch {epoch} batch {b}: {})",
                    ids.join(" ")
                )));
            }
            let grad_norm = match tc.clip_grad_norm {
                Some(max) => clip_global_norm(&mut grads, max),
                None => clip_global_norm(&mut grads, f64::INFINITY),
            };
            let lr = learning_rate(tc, iteration);
            sgd.step(&mut model, &grads, lr)?;
            iteration += 1;
            let step = TrainStep {
                iteration,
                epoch,
                loss,
                lr,
                grad_norm,
            };
            on_step(&step);
            summary.steps.push(step);
            if let Some(path) = checkpoint {
                if tc.checkpoint_every > 0 && iteration % tc.checkpoint_every == 0 {
                    save_checkpoint(&periodic_checkpoint_path(path, iteration), &model, &cfg, iteration as u64)?;
                }
            }
        }
    }
    if let Some(path) = checkpoint {
        save_checkpoint(path, &model, &cfg, iteration as u64)?;
    }
    Ok((model, summary))
}

/// Deterministic evaluation clip of every video.
pub fn evaluation_clips(cfg: &RunConfig, data: &DatasetIndex) -> Result<Vec<ClipSample>> {
    (0..data.videos.len())
        .into_par_iter()
        .map(|v| load_clip(&data.videos[v], data.eval_start(v, &cfg.clip), 1, &cfg.clip))
        .collect()
}

/// Post-NMS detections of each clip's keyframe in source-frame pixels.
pub fn detect(model: &mut TfNet, cfg: &RunConfig, clips: &[ClipSample]) -> Result<Vec<Detection>> {
    let key = cfg.clip.keyframe_size;
    let mut out = Vec::new();
    for chunk in clips.chunks(cfg.train.batch_size.max(1)) {
        let input = model.prepare(chunk)?;
        let (grid, _) = model.forward(&input, Mode::Eval)?;
        if !grid.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite network output on {}",
                chunk.iter().map(|c| c.gt.frame_id.as_str()).collect::<Vec<_>>().join(" ")
            )));
        }
        for (n, clip) in chunk.iter().enumerate() {
            let raw = decode(&grid.item(n), &model.anchors, (key, key), cfg.head.conf_threshold, &clip.gt.frame_id)?;
            let (sx, sy) = (clip.source_size.0 as f64 / key as f64, clip.source_size.1 as f64 / key as f64);
            let scaled: Vec<Detection> = raw
                .into_iter()
                .map(|d| Detection {
                    bbox: d.bbox.scale(sx, sy),
                    ..d
                })
                .collect();
            out.extend(nms(&scaled, cfg.head.nms_threshold));
        }
    }
    Ok(out)
}

/// Keyframe ground truth of the evaluation clips in source-frame pixels.
pub fn evaluation_ground_truth(cfg: &RunConfig, data: &DatasetIndex) -> Vec<GroundTruthFrame> {
    (0..data.videos.len())
        .map(|v| {
            let video = &data.videos[v];
            let idx = crate::data::clip_indices(video.frame_count(), data.eval_start(v, &cfg.clip), 1, cfg.clip.clip_depth);
            let pos = idx[cfg.clip.keyframe_slot()];
            let boxes: Vec<GtBox> = video.labels.get(&video.frame_numbers[pos]).cloned().unwrap_or_default();
            GroundTruthFrame {
                frame_id: video.frame_id(pos),
                boxes,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthFrame>,
    pub report: EvalReport,
}

pub fn evaluate(model: &mut TfNet, cfg: &RunConfig, data: &DatasetIndex, iou_threshold: f64) -> Result<Evaluation> {
    if data.classes.len() != model.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model predicts {}",
            data.classes.len(),
            model.num_classes
        )));
    }
    let clips = evaluation_clips(cfg, data)?;
    let detections = detect(model, cfg, &clips)?;
    let ground_truth = evaluation_ground_truth(cfg, data);
    let report = frame_map(&detections, &ground_truth, &data.classes, iou_threshold)?;
    Ok(Evaluation {
        detections,
        ground_truth,
        report,
    })
}

/// Grid slot whose score was backpropagated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SaliencyTarget {
    /// Highest-scoring detection slot and its class.
    Detection { anchor: usize, cell: (usize, usize), class_id: usize, score: f64 },
    /// Nothing reached the confidence threshold; the largest class logit.
    MaxLogit { anchor: usize, cell: (usize, usize), class_id: usize, logit: f64 },
}

#[derive(Debug, Clone)]
pub struct Saliency {
    pub target: SaliencyTarget,
    /// `D×F×F`: largest absolute gradient over the color channels.
    pub frames: Tensor,
    /// `C_f×B×B` absolute gradients, when the model has a frequency branch.
    pub dct: Option<Tensor>,
    /// `(forward input, propagated gradient)` of every rectifier, in
    /// backward order.
    pub rectifier_log: Vec<(Tensor, Tensor)>,
}

/// Objective and its gradient with respect to one `C×S×S` grid.
pub fn saliency_objective(grid: &Tensor, anchors: usize, num_classes: usize, threshold: f64) -> (SaliencyTarget, Tensor) {
    let s = grid.dim(1);
    let per = BOX_FIELDS + num_classes;
    let at = |a: usize, f: usize, i: usize, j: usize| ((a * per + f) * s + i) * s + j;
    let data = grid.data();
    let mut best: Option<(f64, usize, usize, usize, usize, Vec<f64>)> = None;
    let mut best_logit: Option<(f64, usize, usize, usize, usize)> = None;
    for i in 0..s {
        for j in 0..s {
            for a in 0..anchors {
                let logits: Vec<f64> = (0..num_classes).map(|k| data[at(a, BOX_FIELDS + k, i, j)]).collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let probs: Vec<f64> = e.iter().map(|v| v / z).collect();
                let (c, p) = probs
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (k, p)| if p > b.1 { (k, p) } else { b });
                let score = sigmoid(data[at(a, 4, i, j)]) * p;
                if best.as_ref().is_none_or(|b| score > b.0) {
                    best = Some((score, a, i, j, c, probs));
                }
                let (lc, lv) = logits
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (k, v)| if v > b.1 { (k, v) } else { b });
                if best_logit.is_none_or(|b| lv > b.0) {
                    best_logit = Some((lv, a, i, j, lc));
                }
            }
        }
    }
    let mut g = Tensor::zeros(grid.shape());
    let gd = g.data_mut();
    match best {
        Some((score, a, i, j, c, probs)) if score >= threshold => {
            let conf = sigmoid(data[at(a, 4, i, j)]);
            gd[at(a, 4, i, j)] = conf * (1.0 - conf) * probs[c];
            for (k, pk) in probs.iter().enumerate() {
                let delta = if k == c { 1.0 } else { 0.0 };
                gd[at(a, BOX_FIELDS + k, i, j)] = conf * probs[c] * (delta - pk);
            }
            (
                SaliencyTarget::Detection {
                    anchor: a,
                    cell: (i, j),
                    class_id: c,
                    score,
                },
                g,
            )
        }
        _ => {
            let (lv, a, i, j, c) = best_logit.expect("non-empty grid");
            gd[at(a, BOX_FIELDS + c, i, j)] = 1.0;
            (
                SaliencyTarget::MaxLogit {
                    anchor: a,
                    cell: (i, j),
                    class_id: c,
                    logit: lv,
                },
                g,
            )
        }
    }
}

/// Guided-backprop saliency of one clip for its top detection.
pub fn saliency(model: &mut TfNet, cfg: &RunConfig, clip: &ClipSample) -> Result<Saliency> {
    let input = model.prepare(std::slice::from_ref(clip))?;
    let (grid, cache) = model.forward(&input, Mode::Eval)?;
    let (target, g) = saliency_objective(&grid.item(0), model.anchors.len(), model.num_classes, cfg.head.conf_threshold);
    let g = g.into_shape(grid.shape())?;
    let mut bp = Backprop::guided().recording();
    let (grads, _) = model.backward(&cache, &g, &mut bp)?;
    let (d, f) = (model.clip_depth, model.frame_size);
    let gc = grads.clips.data();
    let frames = Tensor::from_fn(&[d, f, f], |k| (0..3).map(|c| gc[c * d * f * f + k].abs()).fold(0.0, f64::max));
    let dct = grads.dct.map(|t| {
        let s = t.shape().to_vec();
        t.map(f64::abs).into_shape(&s[1..]).expect("single item")
    });
    Ok(Saliency {
        target,
        frames,
        dct,
        rectifier_log: bp.rectifier_log.unwrap_or_default(),
    })
}

fn to_gray(values: &[f64]) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0, f64::max);
    values
        .iter()
        .map(|v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// Writes `frame_<t>.png` per clip frame and `dct_<c>.png` per DCT channel,
/// each normalized to its own maximum.
pub fn save_saliency(dir: &Path, sal: &Saliency) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let (d, h, w) = (sal.frames.dim(0), sal.frames.dim(1), sal.frames.dim(2));
    for t in 0..d {
        let p = dir.join(format!("frame_{t:02}.png"));
        save_gray(&p, w, h, &to_gray(&sal.frames.data()[t * h * w..(t + 1) * h * w]))?;
        written.push(p);
    }
    if let Some(dct) = &sal.dct {
        let (c, h, w) = (dct.dim(0), dct.dim(1), dct.dim(2));
        for k in 0..c {
            let p = dir.join(format!("dct_{k:03}.png"));
            save_gray(&p, w, h, &to_gray(&dct.data()[k * h * w..(k + 1) * h * w]))?;
            written.push(p);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub channels: usize,
    pub map: f64,
    pub cls_accuracy: f64,
    pub localization: f64,
}

/// Trains and evaluates one model per per-component DCT channel count.
pub fn sweep_channels(
    cfg: &RunConfig,
    train_data: &DatasetIndex,
    eval_data: &DatasetIndex,
    counts: &[usize],
    iou_threshold: f64,
    on_step: &mut dyn FnMut(usize, &TrainStep),
) -> Result<Vec<SweepRow>> {
    if !cfg.model.use_frequency {
        return Err(Error::config("the channel sweep needs the frequency branch"));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &c in counts {
        let mut run = cfg.clone();
        run.model.dct_channels = Some(c);
        run.validate()?;
        let (mut model, _) = train(&run, train_data, None, &mut |s| on_step(c, s))?;
        let ev = evaluate(&mut model, &run, eval_data, iou_threshold)?;
        rows.push(SweepRow {
            channels: c,
            map: ev.report.map,
            cls_accuracy: ev.report.cls_accuracy,
            localization: ev.report.localization,
        });
    }
    Ok(rows)
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut s = String::from("channels cls-accuracy localization mAP\n");
    for r in rows {
        s.push_str(&format!(
            "{} {:.3} {:.3} {:.3}\n",
            r.channels, r.cls_accuracy, r.localization, r.map
        ));
    }
    s
}
