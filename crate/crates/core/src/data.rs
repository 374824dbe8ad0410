//! Clip ingestion, augmentation, annotations and the on-disk dataset layout.
//!
//! Layout: `<root>/<split>/<class>/<video>/frame_%05d.{png,ppm}`, labels in
//! `<root>/<split>/labels/<video>.txt` with lines `frame class x1 y1 x2 y2`,
//! and `<root>/classes.txt` with one class name per line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GroundTruthFrame, GtBox};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KeyframePosition {
    First,
    Middle,
    #[default]
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    pub clip_depth: usize,
    /// Side of the square frames fed to the time branch.
    pub frame_size: usize,
    /// Side of the square keyframe fed to the DCT frontend.
    pub keyframe_size: usize,
    pub keyframe: KeyframePosition,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            clip_depth: 16,
            frame_size: 224,
            keyframe_size: 448,
            keyframe: KeyframePosition::Last,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_depth == 0 {
            return Err(Error::config("clip_depth must be positive"));
        }
        if self.frame_size == 0 || self.frame_size % 32 != 0 {
            return Err(Error::config(format!(
                "frame_size {} must be a positive multiple of 32",
                self.frame_size
            )));
        }
        if self.keyframe_size == 0 || self.keyframe_size % 64 != 0 {
            return Err(Error::config(format!(
                "keyframe_size {} must be a positive multiple of 64",
                self.keyframe_size
            )));
        }
        Ok(())
    }

    pub fn keyframe_slot(&self) -> usize {
        match self.keyframe {
            KeyframePosition::First => 0,
            KeyframePosition::Middle => (self.clip_depth - 1) / 2,
            KeyframePosition::Last => self.clip_depth - 1,
        }
    }
}

/// `start, start+s, …` for `depth` frames, clamped to the last frame.
pub fn clip_indices(frame_count: usize, start: usize, stride: usize, depth: usize) -> Vec<usize> {
    let last = frame_count.saturating_sub(1);
    (0..depth).map(|k| (start + k * stride).min(last)).collect()
}

/// One video of the dataset index.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub class_id: usize,
    pub dir: PathBuf,
    /// Frame files ordered by frame number.
    pub frames: Vec<PathBuf>,
    pub frame_numbers: Vec<usize>,
    pub label_path: PathBuf,
    /// Ground truth keyed by frame number.
    pub labels: BTreeMap<usize, Vec<GtBox>>,
}

impl VideoRecord {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Identifier of a frame in detection dumps and reports.
    pub fn frame_id(&self, position: usize) -> String {
        format!("{}/{:05}", self.id, self.frame_numbers[position])
    }
}

#[derive(Debug, Clone)]
pub struct ClipSample {
    pub frames: Vec<RgbImage>,
    pub keyframe: RgbImage,
    /// Ground truth of the keyframe in keyframe pixels.
    pub gt: GroundTruthFrame,
    pub stride: usize,
    /// Size of the source frames, for mapping detections back.
    pub source_size: (usize, usize),
}

pub fn load_clip(video: &VideoRecord, start: usize, stride: usize, cfg: &ClipConfig) -> Result<ClipSample> {
    if video.frames.is_empty() {
        return Err(Error::Data(format!("video '{}' has no frames", video.id)));
    }
    if stride == 0 {
        return Err(Error::Data("clip stride must be positive".into()));
    }
    let idx = clip_indices(video.frame_count(), start, stride, cfg.clip_depth);
    let key_pos = idx[cfg.keyframe_slot()];
    let mut source_size = None;
    let mut frames = Vec::with_capacity(idx.len());
    let mut keyframe = None;
    let mut cache: BTreeMap<usize, RgbImage> = BTreeMap::new();
    for &i in &idx {
        if !cache.contains_key(&i) {
            cache.insert(i, RgbImage::load(&video.frames[i])?);
        }
        let img = &cache[&i];
        let size = (img.width(), img.height());
        if *source_size.get_or_insert(size) != size {
            return Err(Error::Data(format!("video '{}' mixes frame sizes", video.id)));
        }
        if i == key_pos && keyframe.is_none() {
            keyframe = Some(img.resize(cfg.keyframe_size, cfg.keyframe_size));
        }
        frames.push(img.resize(cfg.frame_size, cfg.frame_size));
    }
    let (sw, sh) = source_size.expect("at least one frame");
    let (kx, ky) = (cfg.keyframe_size as f64 / sw as f64, cfg.keyframe_size as f64 / sh as f64);
    let boxes = video
        .labels
        .get(&video.frame_numbers[key_pos])
        .map(|v| {
            v.iter()
                .map(|b| GtBox {
                    class_id: b.class_id,
                    bbox: b.bbox.scale(kx, ky),
                })
                .collect()
        })
        .unwrap_or_default();
    Ok(ClipSample {
        frames,
        keyframe: keyframe.expect("key position is among the indices"),
        gt: GroundTruthFrame {
            frame_id: video.frame_id(key_pos),
            boxes,
        },
        stride,
        source_size: (sw, sh),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip: bool,
    /// Crop side as a fraction of the image side is drawn from `[min, 1]`.
    pub crop_min_scale: f64,
    /// Brightness, contrast and saturation factors in `[1-j, 1+j]`.
    pub jitter: f64,
    /// Training clips use a stride drawn from `1..=max_stride`.
    pub max_stride: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            flip: true,
            crop_min_scale: 0.75,
            jitter: 0.2,
            max_stride: 2,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            enabled: false,
            flip: false,
            crop_min_scale: 1.0,
            jitter: 0.0,
            max_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_min_scale > 0.0 && self.crop_min_scale <= 1.0) {
            return Err(Error::config("augment.crop_min_scale must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::config("augment.jitter must be in [0, 1)"));
        }
        if self.max_stride == 0 {
            return Err(Error::config("augment.max_stride must be positive"));
        }
        Ok(())
    }
}

/// Crop window (fractions of the image) followed by rescaling back to the
/// image size and an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricTransform {
    pub window: (f64, f64, f64, f64),
    pub flip: bool,
}

/// Boxes keeping less than this fraction of their area are dropped.
pub const MIN_KEPT_AREA: f64 = 0.25;

impl GeometricTransform {
    pub fn identity() -> Self {
        GeometricTransform {
            window: (0.0, 0.0, 1.0, 1.0),
            flip: false,
        }
    }

    pub fn apply_image(&self, img: &RgbImage) -> RgbImage {
        let (w, h) = (img.width() as f64, img.height() as f64);
        let (x0, y0, fw, fh) = self.window;
        let out = if self.window == (0.0, 0.0, 1.0, 1.0) {
            img.clone()
        } else {
            img.resample_window((x0 * w, y0 * h, fw * w, fh * h), img.width(), img.height())
        };
        if self.flip {
            out.flip_horizontal()
        } else {
            out
        }
    }

    /// Maps a box in pixels of a `width`×`height` image; `None` when too
    /// little of it survives the crop.
    pub fn apply_box(&self, b: &BBox, width: f64, height: f64) -> Option<BBox> {
        let (x0, y0, fw, fh) = self.window;
        let (cw, ch) = (fw * width, fh * height);
        let moved = b.translate(-x0 * width, -y0 * height).clip(cw, ch);
        if !moved.is_valid() || moved.area() < MIN_KEPT_AREA * b.area() {
            return None;
        }
        let scaled = moved.scale(width / cw, height / ch).clip(width, height);
        let out = if self.flip {
            BBox::new(width - scaled.x2, scaled.y1, width - scaled.x1, scaled.y2)
        } else {
            scaled
        };
        out.is_valid().then_some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl ColorJitter {
    pub fn identity() -> Self {
        ColorJitter {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
        }
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        if *self == ColorJitter::identity() {
            return img.clone();
        }
        let luma = |p: [f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        let bright: Vec<[f64; 3]> = img
            .pixels()
            .iter()
            .map(|p| p.map(|v| v as f64 * self.brightness))
            .collect();
        let mean = bright.iter().map(|&p| luma(p)).sum::<f64>() / bright.len() as f64;
        let pixels = bright
            .into_iter()
            .map(|p| {
                let c = p.map(|v| (v - mean) * self.contrast + mean);
                let g = luma(c);
                c.map(|v| (g + (v - g) * self.saturation).round().clamp(0.0, 255.0) as u8)
            })
            .collect();
        RgbImage::new(img.width(), img.height(), pixels).expect("same dimensions")
    }
}

/// Draws the transform parameters for one clip; the draw order is fixed so
/// a seed always gives the same transform.
pub fn sample_augmentation(cfg: &AugmentConfig, seed: u64) -> (GeometricTransform, ColorJitter) {
    if !cfg.enabled {
        return (GeometricTransform::identity(), ColorJitter::identity());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = rng.random_range(cfg.crop_min_scale..=1.0);
    let x0 = rng.random_range(0.0..=1.0 - scale);
    let y0 = rng.random_range(0.0..=1.0 - scale);
    let flip = rng.random_bool(0.5) && cfg.flip;
    let mut factor = || 1.0 + rng.random_range(-cfg.jitter..=cfg.jitter);
    let jitter = ColorJitter {
        brightness: factor(),
        contrast: factor(),
        saturation: factor(),
    };
    (
        GeometricTransform {
            window: (x0, y0, scale, scale),
            flip,
        },
        jitter,
    )
}

/// Same geometric transform on every frame, the keyframe and its boxes;
/// same color jitter on every image.
pub fn augment(clip: &ClipSample, cfg: &AugmentConfig, seed: u64) -> ClipSample {
    let (geo, color) = sample_augmentation(cfg, seed);
    augment_with(clip, &geo, &color)
}

pub fn augment_with(clip: &ClipSample, geo: &GeometricTransform, color: &ColorJitter) -> ClipSample {
    let tf = |img: &RgbImage| color.apply(&geo.apply_image(img));
    let (kw, kh) = (clip.keyframe.width() as f64, clip.keyframe.height() as f64);
    ClipSample {
        frames: clip.frames.iter().map(tf).collect(),
        keyframe: tf(&clip.keyframe),
        gt: GroundTruthFrame {
            frame_id: clip.gt.frame_id.clone(),
            boxes: clip
                .gt
                .boxes
                .iter()
                .filter_map(|b| {
                    geo.apply_box(&b.bbox, kw, kh).map(|bbox| GtBox {
                        class_id: b.class_id,
                        bbox,
                    })
                })
                .collect(),
        },
        stride: clip.stride,
        source_size: clip.source_size,
    }
}

/// Parses `frame class x1 y1 x2 y2` lines into per-frame ground truth,
/// ordered by frame number. Frame ids are the frame numbers.
pub fn parse_annotations_str(text: &str, path: &Path, num_classes: Option<usize>) -> Result<Vec<GroundTruthFrame>> {
    let mut frames: BTreeMap<usize, Vec<GtBox>> = BTreeMap::new();
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
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", f.len())));
        }
        let mut v = [0i64; 6];
        for (slot, s) in v.iter_mut().zip(&f) {
            *slot = s.parse().map_err(|_| err(format!("'{s}' is not an integer")))?;
        }
        if v[0] < 0 {
            return Err(err(format!("negative frame index {}", v[0])));
        }
        if v[1] < 0 || num_classes.is_some_and(|k| v[1] as usize >= k) {
            return Err(err(format!("class id {} out of range", v[1])));
        }
        if v[2] >= v[4] {
            return Err(err("x1 ≥ x2".into()));
        }
        if v[3] >= v[5] {
            return Err(err("y1 ≥ y2".into()));
        }
        frames.entry(v[0] as usize).or_default().push(GtBox {
            class_id: v[1] as usize,
            bbox: BBox::new(v[2] as f64, v[3] as f64, v[4] as f64, v[5] as f64),
        });
    }
    Ok(frames
        .into_iter()
        .map(|(frame, boxes)| GroundTruthFrame {
            frame_id: frame.to_string(),
            boxes,
        })
        .collect())
}

pub fn parse_annotations(path: &Path, num_classes: Option<usize>) -> Result<Vec<GroundTruthFrame>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_str(&text, path, num_classes)
}

pub fn read_classes(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        if name.contains(char::is_whitespace) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("class name '{name}' contains whitespace"),
            });
        }
        out.push(name.to_string());
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} lists no classes", path.display())));
    }
    Ok(out)
}

fn frame_number(path: &Path) -> Option<usize> {
    let ext = path.extension()?.to_str()?;
    if ext != "png" && ext != "ppm" {
        return None;
    }
    path.file_stem()?.to_str()?.strip_prefix("frame_")?.parse().ok()
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Unlabeled video from a directory of `frame_<n>.png|ppm` files.
pub fn load_video_dir(dir: &Path) -> Result<VideoRecord> {
    let id = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    let mut frames: Vec<(usize, PathBuf)> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| frame_number(&p).map(|n| (n, p)))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(Error::Data(format!("video '{}' has no frames", dir.display())));
    }
    Ok(VideoRecord {
        id,
        class_id: 0,
        dir: dir.to_path_buf(),
        frame_numbers: frames.iter().map(|f| f.0).collect(),
        frames: frames.into_iter().map(|f| f.1).collect(),
        label_path: PathBuf::new(),
        labels: BTreeMap::new(),
    })
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: String,
    pub classes: Vec<String>,
    pub videos: Vec<VideoRecord>,
}

impl DatasetIndex {
    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let classes = read_classes(&root.join("classes.txt"))?;
        let split_dir = root.join(split);
        let label_dir = split_dir.join("labels");
        let mut videos = Vec::new();
        for class_dir in sorted_dirs(&split_dir)? {
            let name = class_dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            if name == "labels" {
                continue;
            }
            let class_id = classes
                .iter()
                .position(|c| *c == name)
                .ok_or_else(|| Error::Data(format!("directory '{name}' is not listed in classes.txt")))?;
            for dir in sorted_dirs(&class_dir)? {
                let mut video = load_video_dir(&dir)?;
                let label_path = label_dir.join(format!("{}.txt", video.id));
                if !label_path.is_file() {
                    return Err(Error::Data(format!("missing label file {}", label_path.display())));
                }
                video.labels = parse_annotations(&label_path, Some(classes.len()))?
                    .into_iter()
                    .map(|g| (g.frame_id.parse().expect("numeric frame ids"), g.boxes))
                    .collect();
                video.class_id = class_id;
                video.label_path = label_path;
                videos.push(video);
            }
        }
        if videos.is_empty() {
            return Err(Error::Data(format!("no videos under {}", split_dir.display())));
        }
        Ok(DatasetIndex {
            root: root.to_path_buf(),
            split: split.to_string(),
            classes,
            videos,
        })
    }

    /// Deterministic evaluation clip of each video: stride 1, placed so the
    /// keyframe is as late as the clip allows.
    pub fn eval_start(&self, video: usize, cfg: &ClipConfig) -> usize {
        let n = self.videos[video].frame_count();
        n.saturating_sub(cfg.clip_depth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub split: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 2,
            clips_per_class: 10,
            frames: 8,
            width: 64,
            height: 64,
            split: "train".into(),
        }
    }
}

pub const SYNTH_CLASS_NAMES: [&str; 4] = ["drift_right", "drift_down", "oscillate", "diagonal"];

/// Per-frame offset of the shape for each motion class.
fn motion(class: usize, t: usize) -> (i64, i64) {
    let t = t as i64;
    match class {
        0 => (t, 0),
        1 => (0, 3 * t),
        2 => ([0, 6, 0, -6][(t % 4) as usize], 0),
        _ => (t, t),
    }
}

fn motion_extent(class: usize, frames: usize) -> ((i64, i64), (i64, i64)) {
    let offs: Vec<(i64, i64)> = (0..frames).map(|t| motion(class, t)).collect();
    let xs = (offs.iter().map(|o| o.0).min().unwrap(), offs.iter().map(|o| o.0).max().unwrap());
    let ys = (offs.iter().map(|o| o.1).min().unwrap(), offs.iter().map(|o| o.1).max().unwrap());
    (xs, ys)
}

/// Rendered frames and their exact ground-truth boxes for one video.
pub fn synth_video(spec: &SynthSpec, class: usize, rng: &mut impl Rng) -> Result<(Vec<RgbImage>, Vec<BBox>)> {
    let (w, h) = (spec.width as i64, spec.height as i64);
    let sw = rng.random_range(w / 6..=w / 3).max(2);
    let sh = rng.random_range(h / 6..=h / 3).max(2);
    let ((xmin, xmax), (ymin, ymax)) = motion_extent(class, spec.frames);
    let (xlo, xhi) = (-xmin, w - sw - xmax);
    let (ylo, yhi) = (-ymin, h - sh - ymax);
    if xlo > xhi || ylo > yhi {
        return Err(Error::config(format!(
            "synthetic frames {}x{} too small for {} frames of motion",
            spec.width, spec.height, spec.frames
        )));
    }
    let x0 = rng.random_range(xlo..=xhi);
    let y0 = rng.random_range(ylo..=yhi);
    let bg: [u8; 3] = std::array::from_fn(|_| rng.random_range(20..90));
    let fg: [u8; 3] = std::array::from_fn(|_| rng.random_range(150..=255));
    let texture: Vec<[u8; 3]> = (0..w * h)
        .map(|_| bg.map(|c| (c as i32 + rng.random_range(-8..=8)).clamp(0, 255) as u8))
        .collect();
    let mut frames = Vec::with_capacity(spec.frames);
    let mut boxes = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let (dx, dy) = motion(class, t);
        let (bx, by) = (x0 + dx, y0 + dy);
        let mut img = RgbImage::new(spec.width, spec.height, texture.clone())?;
        for y in by..by + sh {
            for x in bx..bx + sw {
                img.set_pixel(x as usize, y as usize, fg);
            }
        }
        frames.push(img);
        boxes.push(BBox::new(bx as f64, by as f64, (bx + sw) as f64, (by + sh) as f64));
    }
    Ok((frames, boxes))
}

/// Writes a synthetic dataset under `root`. Class `k` is the motion pattern
/// `k` (rightward drift, downward drift, horizontal oscillation, diagonal
/// drift), each at its own speed.
pub fn synth_dataset(spec: &SynthSpec, seed: u64, root: &Path) -> Result<()> {
    if spec.classes == 0 || spec.classes > SYNTH_CLASS_NAMES.len() {
        return Err(Error::config(format!(
            "synthetic data supports 1 to {} classes, got {}",
            SYNTH_CLASS_NAMES.len(),
            spec.classes
        )));
    }
    if spec.clips_per_class == 0 || spec.frames == 0 {
        return Err(Error::config("synthetic spec needs clips and frames"));
    }
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    let write = |p: &Path, s: &str| std::fs::write(p, s).map_err(|e| Error::io(p, e));
    mkdir(root)?;
    let names = &SYNTH_CLASS_NAMES[..spec.classes];
    write(&root.join("classes.txt"), &(names.join("\n") + "\n"))?;
    let split = root.join(&spec.split);
    mkdir(&split.join("labels"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class, name) in names.iter().enumerate() {
        for clip in 0..spec.clips_per_class {
            let id = format!("{name}_{clip:03}");
            let dir = split.join(name).join(&id);
            mkdir(&dir)?;
            let (frames, boxes) = synth_video(spec, class, &mut rng)?;
            let mut labels = String::new();
            for (t, (img, b)) in frames.iter().zip(&boxes).enumerate() {
                img.save(&dir.join(format!("frame_{t:05}.png")))?;
                labels += &format!("{t} {class} {} {} {} {}\n", b.x1, b.y1, b.x2, b.y2);
            }
            write(&split.join("labels").join(format!("{id}.txt")), &labels)?;
        }
    }
    Ok(())
}
