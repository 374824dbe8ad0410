//! Frequency and time backbones.
//!
//! Both are generated from a plan of [`LayerKind`]s so that full-scale
//! graphs can be shape-checked without allocating their weights.
//!
//! Frequency branch: Darknet-19 with its first four convolutions (and the
//! pools after them) removed, so it takes the `56×56` DCT grid. Stages
//! alternate 3×3 convs at the stage width and 1×1 convs at half width; a
//! 2×2 max pool follows each of the first three stages (56→7), and a 1×1
//! conv projects to `C1` channels.
//!
//! Time branch: 3-D ResNeXt. Stem conv (spatial stride 2), 2×2 max pool,
//! four stages of bottleneck blocks with grouped 3×3×3 convs; the first
//! block of stages 2-4 strides by 2 (224→7). Depth halves at the pool and
//! every stage transition while it is above 1, and whatever is left is
//! pooled to 1.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    join, shape_through, Backprop, BatchNormConfig, LayerCache, LayerKind, LayerNode, Mode, Parameterized, Sequential,
    TensorRole,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    #[default]
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrequencyConfig {
    /// Width of each stage; at least three stages.
    pub widths: Vec<usize>,
    /// Convolutions per stage (odd; alternating 3×3 / 1×1).
    pub stage_convs: Vec<usize>,
    /// `C1`.
    pub out_channels: usize,
    pub leaky_slope: f64,
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        FrequencyConfig::micro()
    }
}

impl FrequencyConfig {
    pub fn full() -> Self {
        FrequencyConfig {
            widths: vec![128, 256, 512, 1024],
            stage_convs: vec![1, 3, 5, 5],
            out_channels: 425,
            leaky_slope: 0.1,
        }
    }

    pub fn micro() -> Self {
        FrequencyConfig {
            widths: vec![8, 16, 32],
            stage_convs: vec![1, 1, 1],
            out_channels: 16,
            leaky_slope: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::config(format!(
                "frequency.widths needs at least 3 stages, got {:?}",
                self.widths
            )));
        }
        if self.stage_convs.len() != self.widths.len() {
            return Err(Error::config(format!(
                "frequency.stage_convs {:?} must have one entry per width {:?}",
                self.stage_convs, self.widths
            )));
        }
        for (&w, &n) in self.widths.iter().zip(&self.stage_convs) {
            if n == 0 || n % 2 == 0 {
                return Err(Error::config(format!("frequency stage conv count {n} must be odd")));
            }
            if w == 0 || (n > 1 && w < 2) {
                return Err(Error::config(format!("frequency width {w} too small")));
            }
        }
        if self.out_channels == 0 {
            return Err(Error::config("frequency.out_channels must be positive"));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("frequency.leaky_slope must be in [0, 1)"));
        }
        Ok(())
    }
}

fn bn(channels: usize, config: BatchNormConfig) -> LayerKind {
    LayerKind::BatchNorm { channels, config }
}

/// Layer plan of the frequency backbone for `in_channels` DCT channels.
pub fn frequency_plan(cfg: &FrequencyConfig, in_channels: usize, norm: BatchNormConfig) -> Result<Vec<LayerKind>> {
    cfg.validate()?;
    if in_channels == 0 {
        return Err(Error::config("frequency backbone needs at least one input channel"));
    }
    let mut layers = Vec::new();
    let mut c = in_channels;
    for (stage, (&w, &n)) in cfg.widths.iter().zip(&cfg.stage_convs).enumerate() {
        for j in 0..n {
            let (out, k) = if j % 2 == 0 { (w, 3) } else { (w / 2, 1) };
            layers.push(LayerKind::conv2d(c, out, k, 1, k / 2, 1, false));
            layers.push(bn(out, norm));
            layers.push(LayerKind::LeakyRelu { slope: cfg.leaky_slope });
            c = out;
        }
        if stage < 3 {
            layers.push(LayerKind::MaxPool2d {
                window: [2, 2],
                stride: [2, 2],
            });
        }
    }
    layers.push(LayerKind::conv2d(c, cfg.out_channels, 1, 1, 0, 1, true));
    Ok(layers)
}

/// `N×C_f×H×W -> N×C1×H/8×W/8`.
#[derive(Debug, Clone)]
pub struct FrequencyBackbone {
    pub net: Sequential,
}

impl FrequencyBackbone {
    pub fn new(cfg: &FrequencyConfig, in_channels: usize, norm: BatchNormConfig, rng: &mut impl Rng) -> Result<Self> {
        let plan = frequency_plan(cfg, in_channels, norm)?;
        Ok(FrequencyBackbone {
            net: Sequential::build(&plan, rng),
        })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<LayerCache>)> {
        self.net.forward(x, mode)
    }

    pub fn backward(&self, caches: &[LayerCache], grad: &Tensor, bp: &mut Backprop) -> Result<(Tensor, Vec<Tensor>)> {
        self.net.backward(caches, grad, bp)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.net.output_shape(input)
    }
}

impl Parameterized for FrequencyBackbone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, TensorRole)) {
        self.net.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        self.net.visit_mut(prefix, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TemporalPool {
    #[default]
    Avg,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub stem_width: usize,
    pub stem_kernel: [usize; 3],
    /// Bottleneck (grouped conv) width of each of the four stages.
    pub widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub cardinality: usize,
    /// `C2`, the output width of the last stage. Earlier stages output
    /// twice their bottleneck width.
    pub out_channels: usize,
    pub temporal_pool: TemporalPool,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig::micro()
    }
}

impl TimeConfig {
    pub fn full() -> Self {
        TimeConfig {
            stem_width: 64,
            stem_kernel: [7, 7, 7],
            widths: vec![128, 256, 512, 1024],
            stage_blocks: vec![3, 4, 23, 3],
            cardinality: 32,
            out_channels: 2048,
            temporal_pool: TemporalPool::Avg,
        }
    }

    pub fn micro() -> Self {
        TimeConfig {
            stem_width: 8,
            stem_kernel: [3, 3, 3],
            widths: vec![8, 8, 16, 16],
            stage_blocks: vec![1, 1, 1, 1],
            cardinality: 4,
            out_channels: 16,
            temporal_pool: TemporalPool::Avg,
        }
    }

    pub fn validate(&self, clip_depth: usize) -> Result<()> {
        if self.widths.len() != 4 || self.stage_blocks.len() != 4 {
            return Err(Error::config(format!(
                "time backbone needs exactly 4 stages (widths {:?}, stage_blocks {:?})",
                self.widths, self.stage_blocks
            )));
        }
        if self.stage_blocks.contains(&0) {
            return Err(Error::config("time.stage_blocks entries must be positive"));
        }
        if self.cardinality == 0 {
            return Err(Error::config("time.cardinality must be positive"));
        }
        for &w in &self.widths {
            if w == 0 || w % self.cardinality != 0 {
                return Err(Error::config(format!(
                    "time width {w} not divisible by cardinality {}",
                    self.cardinality
                )));
            }
        }
        if self.stem_width == 0 || self.out_channels == 0 {
            return Err(Error::config("time widths must be positive"));
        }
        if self.stem_kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::config(format!(
                "time.stem_kernel {:?} must be odd",
                self.stem_kernel
            )));
        }
        if clip_depth == 0 || !clip_depth.is_power_of_two() {
            return Err(Error::config(format!(
                "clip depth {clip_depth} must be a power of two to follow the temporal halving plan"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BlockPlan {
    pub branch: Vec<LayerKind>,
    pub shortcut: Option<Vec<LayerKind>>,
}

#[derive(Debug, Clone)]
pub struct TimePlan {
    pub stem: Vec<LayerKind>,
    pub blocks: Vec<BlockPlan>,
    pub pool: LayerKind,
    pub clip_depth: usize,
}

impl TimePlan {
    /// Batched output shape (`N×C2×H×W`) for a batched clip shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        check_clip(input, self.clip_depth)?;
        let mut s = shape_through(&self.stem, input)?;
        for b in &self.blocks {
            let main = shape_through(&b.branch, &s)?;
            let skip = match &b.shortcut {
                Some(sc) => shape_through(sc, &s)?,
                None => s.clone(),
            };
            if main != skip {
                return Err(Error::shape(format!("residual mismatch {main:?} vs {skip:?}")));
            }
            s = main;
        }
        let s = self.pool.output_shape(&s)?;
        Ok(vec![s[0], s[1], s[3], s[4]])
    }
}

fn check_clip(input: &[usize], depth: usize) -> Result<()> {
    if input.len() != 5 || input[1] != 3 || input[2] != depth {
        return Err(Error::shape(format!(
            "time backbone expects N×3×{depth}×H×W, got {input:?}"
        )));
    }
    Ok(())
}

pub fn time_plan(cfg: &TimeConfig, clip_depth: usize, norm: BatchNormConfig) -> Result<TimePlan> {
    cfg.validate(clip_depth)?;
    let k = cfg.stem_kernel;
    let mut depth = clip_depth;
    let mut stem = vec![
        LayerKind::conv3d(3, cfg.stem_width, k, [1, 2, 2], [k[0] / 2, k[1] / 2, k[2] / 2], 1, false),
        bn(cfg.stem_width, norm),
        LayerKind::Relu,
    ];
    let t = if depth > 1 { 2 } else { 1 };
    stem.push(LayerKind::MaxPool3d {
        window: [t, 2, 2],
        stride: [t, 2, 2],
    });
    depth /= t;

    let mut blocks = Vec::new();
    let mut c = cfg.stem_width;
    for stage in 0..4 {
        let inner = cfg.widths[stage];
        let out = if stage == 3 { cfg.out_channels } else { 2 * inner };
        for b in 0..cfg.stage_blocks[stage] {
            let (ts, ss) = if stage > 0 && b == 0 {
                let ts = if depth > 1 { 2 } else { 1 };
                depth /= ts;
                (ts, 2)
            } else {
                (1, 1)
            };
            let stride = [ts, ss, ss];
            let branch = vec![
                LayerKind::conv3d(c, inner, [1, 1, 1], [1, 1, 1], [0, 0, 0], 1, false),
                bn(inner, norm),
                LayerKind::Relu,
                LayerKind::conv3d(inner, inner, [3, 3, 3], stride, [1, 1, 1], cfg.cardinality, false),
                bn(inner, norm),
                LayerKind::Relu,
                LayerKind::conv3d(inner, out, [1, 1, 1], [1, 1, 1], [0, 0, 0], 1, false),
                bn(out, norm),
            ];
            let shortcut = (c != out || stride != [1, 1, 1]).then(|| {
                vec![
                    LayerKind::conv3d(c, out, [1, 1, 1], stride, [0, 0, 0], 1, false),
                    bn(out, norm),
                ]
            });
            blocks.push(BlockPlan { branch, shortcut });
            c = out;
        }
    }
    let pool = match cfg.temporal_pool {
        TemporalPool::Avg => LayerKind::TemporalAvgPool,
        TemporalPool::Max => LayerKind::MaxPool3d {
            window: [depth, 1, 1],
            stride: [depth, 1, 1],
        },
    };
    Ok(TimePlan {
        stem,
        blocks,
        pool,
        clip_depth,
    })
}

/// `out = relu(branch(x) + shortcut(x))`.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub branch: Sequential,
    pub shortcut: Option<Sequential>,
}

#[derive(Debug, Clone)]
pub struct BottleneckCache {
    branch: Vec<LayerCache>,
    shortcut: Option<Vec<LayerCache>>,
    sum: Tensor,
}

impl Bottleneck {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, BottleneckCache)> {
        let (main, branch) = self.branch.forward(x, mode)?;
        let (skip, shortcut) = match &mut self.shortcut {
            Some(s) => {
                let (y, c) = s.forward(x, mode)?;
                (y, Some(c))
            }
            None => (x.clone(), None),
        };
        let sum = main.add(&skip)?;
        Ok((
            sum.map(|v| v.max(0.0)),
            BottleneckCache {
                branch,
                shortcut,
                sum,
            },
        ))
    }

    pub fn backward(&self, cache: &BottleneckCache, grad: &Tensor, bp: &mut Backprop) -> Result<(Tensor, Vec<Tensor>)> {
        let g = crate::nn::rectifier_backward(&cache.sum, grad, 0.0, bp.guided)?;
        if let Some(log) = bp.rectifier_log.as_mut() {
            log.push((cache.sum.clone(), g.clone()));
        }
        let (mut gx, mut grads) = self.branch.backward(&cache.branch, &g, bp)?;
        match (&self.shortcut, &cache.shortcut) {
            (Some(s), Some(c)) => {
                let (gs, sg) = s.backward(c, &g, bp)?;
                gx.add_assign(&gs)?;
                grads.extend(sg);
            }
            (None, None) => gx.add_assign(&g)?,
            _ => return Err(Error::contract("bottleneck cache does not match block")),
        }
        Ok((gx, grads))
    }
}

impl Parameterized for Bottleneck {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, TensorRole)) {
        self.branch.visit(&join(prefix, "branch"), f);
        if let Some(s) = &self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        self.branch.visit_mut(&join(prefix, "branch"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

/// `N×3×D×H×W -> N×C2×H/32×W/32`.
#[derive(Debug, Clone)]
pub struct TimeBackbone {
    pub stem: Sequential,
    pub blocks: Vec<Bottleneck>,
    pub pool: LayerNode,
    pub clip_depth: usize,
}

#[derive(Debug, Clone)]
pub struct TimeCache {
    stem: Vec<LayerCache>,
    blocks: Vec<BottleneckCache>,
    pool: LayerCache,
    pooled_shape: Vec<usize>,
}

impl TimeBackbone {
    pub fn new(cfg: &TimeConfig, clip_depth: usize, norm: BatchNormConfig, rng: &mut impl Rng) -> Result<Self> {
        let plan = time_plan(cfg, clip_depth, norm)?;
        Ok(Self::from_plan(&plan, rng))
    }

    pub fn from_plan(plan: &TimePlan, rng: &mut impl Rng) -> Self {
        let stem = Sequential::build(&plan.stem, rng);
        let blocks = plan
            .blocks
            .iter()
            .map(|b| Bottleneck {
                branch: Sequential::build(&b.branch, rng),
                shortcut: b.shortcut.as_ref().map(|s| Sequential::build(s, rng)),
            })
            .collect();
        TimeBackbone {
            stem,
            blocks,
            pool: LayerNode::new(plan.pool, rng),
            clip_depth: plan.clip_depth,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        check_clip(input, self.clip_depth)?;
        let mut s = self.stem.output_shape(input)?;
        for b in &self.blocks {
            s = b.branch.output_shape(&s)?;
        }
        let s = self.pool.kind.output_shape(&s)?;
        Ok(vec![s[0], s[1], s[3], s[4]])
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, TimeCache)> {
        check_clip(x.shape(), self.clip_depth)?;
        let (mut h, stem) = self.stem.forward(x, mode)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (y, c) = b.forward(&h, mode)?;
            blocks.push(c);
            h = y;
        }
        let (p, pool) = self.pool.forward(&h, mode)?;
        let s = p.shape().to_vec();
        let out = p.into_shape(&[s[0], s[1], s[3], s[4]])?;
        Ok((
            out,
            TimeCache {
                stem,
                blocks,
                pool,
                pooled_shape: s,
            },
        ))
    }

    pub fn backward(&self, cache: &TimeCache, grad: &Tensor, bp: &mut Backprop) -> Result<(Tensor, Vec<Tensor>)> {
        let g = grad.reshape(&cache.pooled_shape)?;
        let mut g = self.pool.backward(&cache.pool, &g, bp)?.input;
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (gx, grads) = b.backward(c, &g, bp)?;
            per_block.push(grads);
            g = gx;
        }
        per_block.reverse();
        let (gx, mut grads) = self.stem.backward(&cache.stem, &g, bp)?;
        grads.extend(per_block.into_iter().flatten());
        Ok((gx, grads))
    }
}

impl Parameterized for TimeBackbone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, TensorRole)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.pool.visit(&join(prefix, "pool"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.pool.visit_mut(&join(prefix, "pool"), f);
    }
}
