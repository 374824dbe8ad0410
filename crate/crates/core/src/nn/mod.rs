//! Differentiable layers with hand-written backward passes.
//!
//! Every layer consumes a batched tensor with a leading `N` axis:
//! `N×C×H×W` for the 2-D family, `N×C×D×H×W` for the 3-D family and
//! `N×F` for [`LayerKind::Linear`]. A forward pass returns the output and a
//! [`LayerCache`]; the backward pass consumes that cache.

pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod norm;
pub mod pool;

#[cfg(test)]
mod tests;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conv::ConvGeometry;
pub use norm::BatchNormConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running stats updated.
    Train,
    /// Running statistics, nothing mutated.
    Eval,
}

/// Whether a visited tensor is optimized or only carried along (running
/// statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Param,
    Buffer,
}

/// Named traversal over the tensors a module owns. Parameter order in
/// `visit` is the order of the gradient lists returned by backward passes.
pub trait Parameterized {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, TensorRole));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole));

    fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t, role| {
            if role == TensorRole::Param {
                out.push(t);
            }
        });
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, role| {
            if role == TensorRole::Param {
                n += t.len();
            }
        });
        n
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t, role| {
            if role == TensorRole::Param {
                out.push(t.shape().to_vec());
            }
        });
        out
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Options threaded through a backward pass.
#[derive(Debug, Default)]
pub struct Backprop {
    /// Guided backpropagation: rectifiers pass `g` only where both the
    /// forward input and `g` are positive.
    pub guided: bool,
    /// When set, each rectifier appends `(forward input, propagated gradient)`.
    pub rectifier_log: Option<Vec<(Tensor, Tensor)>>,
}

impl Backprop {
    pub fn plain() -> Self {
        Backprop::default()
    }

    pub fn guided() -> Self {
        Backprop {
            guided: true,
            rectifier_log: None,
        }
    }

    pub fn recording(mut self) -> Self {
        self.rectifier_log = Some(Vec::new());
        self
    }
}

/// Input gradient plus parameter gradients aligned with the layer's
/// parameter list.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub input: Tensor,
    pub params: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Conv2d { geometry: ConvGeometry, bias: bool },
    Conv3d { geometry: ConvGeometry, bias: bool },
    MaxPool2d { window: [usize; 2], stride: [usize; 2] },
    MaxPool3d { window: [usize; 3], stride: [usize; 3] },
    TemporalAvgPool,
    BatchNorm { channels: usize, config: BatchNormConfig },
    Relu,
    LeakyRelu { slope: f64 },
    Linear { in_features: usize, out_features: usize },
}

impl LayerKind {
    /// 2-D convolution with square kernel `k`, stride `s`, padding `p`.
    pub fn conv2d(cin: usize, cout: usize, k: usize, s: usize, p: usize, groups: usize, bias: bool) -> Self {
        LayerKind::Conv2d {
            geometry: ConvGeometry {
                in_channels: cin,
                out_channels: cout,
                kernel: [1, k, k],
                stride: [1, s, s],
                pad: [0, p, p],
                groups,
            },
            bias,
        }
    }

    pub fn conv3d(
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        groups: usize,
        bias: bool,
    ) -> Self {
        LayerKind::Conv3d {
            geometry: ConvGeometry {
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride,
                pad,
                groups,
            },
            bias,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Conv3d { .. } => "conv3d",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::MaxPool3d { .. } => "maxpool3d",
            LayerKind::TemporalAvgPool => "temporal-avg-pool",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::LeakyRelu { .. } => "leaky-relu",
            LayerKind::Linear { .. } => "linear",
        }
    }

    pub fn is_rectifier(&self) -> bool {
        matches!(self, LayerKind::Relu | LayerKind::LeakyRelu { .. })
    }

    /// Parameter names and shapes, in gradient order.
    pub fn param_specs(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerKind::Conv2d { geometry: g, bias } => {
                let w = g.weight_shape();
                let mut v = vec![("weight", vec![w[0], w[1], w[3], w[4]])];
                if bias {
                    v.push(("bias", vec![g.out_channels]));
                }
                v
            }
            LayerKind::Conv3d { geometry: g, bias } => {
                let mut v = vec![("weight", g.weight_shape().to_vec())];
                if bias {
                    v.push(("bias", vec![g.out_channels]));
                }
                v
            }
            LayerKind::BatchNorm { channels, .. } => {
                vec![("gamma", vec![channels]), ("beta", vec![channels])]
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features]),
                ("bias", vec![out_features]),
            ],
            _ => vec![],
        }
    }

    /// Output shape for a batched input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let rank_err = |want: usize| {
            Error::shape(format!(
                "{} expects rank {want} input, got {:?}",
                self.name(),
                input
            ))
        };
        match *self {
            LayerKind::Conv2d { geometry: g, .. } => {
                if input.len() != 4 {
                    return Err(rank_err(4));
                }
                g.validate()?;
                check_channels(self, input[1], g.in_channels)?;
                let o = g.output_spatial([1, input[2], input[3]])?;
                Ok(vec![input[0], g.out_channels, o[1], o[2]])
            }
            LayerKind::Conv3d { geometry: g, .. } => {
                if input.len() != 5 {
                    return Err(rank_err(5));
                }
                g.validate()?;
                check_channels(self, input[1], g.in_channels)?;
                let o = g.output_spatial([input[2], input[3], input[4]])?;
                Ok(vec![input[0], g.out_channels, o[0], o[1], o[2]])
            }
            LayerKind::MaxPool2d { window, stride } => {
                if input.len() != 4 {
                    return Err(rank_err(4));
                }
                let mut out = input.to_vec();
                for a in 0..2 {
                    out[2 + a] = pooled(input[2 + a], window[a], stride[a], input)?;
                }
                Ok(out)
            }
            LayerKind::MaxPool3d { window, stride } => {
                if input.len() != 5 {
                    return Err(rank_err(5));
                }
                let mut out = input.to_vec();
                for a in 0..3 {
                    out[2 + a] = pooled(input[2 + a], window[a], stride[a], input)?;
                }
                Ok(out)
            }
            LayerKind::TemporalAvgPool => {
                if input.len() != 5 {
                    return Err(rank_err(5));
                }
                Ok(vec![input[0], input[1], 1, input[3], input[4]])
            }
            LayerKind::BatchNorm { channels, .. } => {
                if input.len() < 2 {
                    return Err(rank_err(2));
                }
                check_channels(self, input[1], channels)?;
                Ok(input.to_vec())
            }
            LayerKind::Relu | LayerKind::LeakyRelu { .. } => Ok(input.to_vec()),
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                if input.len() != 2 {
                    return Err(rank_err(2));
                }
                check_channels(self, input[1], in_features)?;
                Ok(vec![input[0], out_features])
            }
        }
    }
}

fn check_channels(kind: &LayerKind, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(format!(
            "{} expects {want} channels, got {got}",
            kind.name()
        )));
    }
    Ok(())
}

fn pooled(len: usize, window: usize, stride: usize, input: &[usize]) -> Result<usize> {
    if window == 0 || stride == 0 || window > len {
        return Err(Error::shape(format!(
            "pool window {window} stride {stride} does not fit input {input:?}"
        )));
    }
    Ok((len - window) / stride + 1)
}

fn default_buffers(kind: &LayerKind) -> Vec<Tensor> {
    match *kind {
        LayerKind::BatchNorm { channels, .. } => {
            vec![Tensor::zeros(&[channels]), Tensor::full(&[channels], 1.0)]
        }
        _ => vec![],
    }
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv { input: Tensor },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    TemporalAvgPool { input_shape: Vec<usize> },
    BatchNorm(norm::BatchNormCache),
    Rectifier { input: Tensor },
    Linear { input: Tensor },
}

/// A layer together with its parameters and (for batchnorm) running stats.
#[derive(Debug, Clone)]
pub struct LayerNode {
    pub kind: LayerKind,
    pub params: Vec<Tensor>,
    pub buffers: Vec<Tensor>,
}

impl LayerNode {
    /// Xavier-normal weights, zero biases; batchnorm starts at `γ=1, β=0`
    /// with running stats `(0, 1)`.
    pub fn new(kind: LayerKind, rng: &mut impl Rng) -> Self {
        let mut params = Vec::new();
        for (name, shape) in kind.param_specs() {
            let t = match (name, &kind) {
                ("weight", LayerKind::Conv2d { geometry: g, .. })
                | ("weight", LayerKind::Conv3d { geometry: g, .. }) => {
                    let r = g.receptive();
                    init::xavier_normal(
                        &shape,
                        g.in_channels / g.groups * r,
                        g.out_channels * r,
                        rng,
                    )
                }
                ("weight", LayerKind::Linear { in_features, out_features }) => {
                    init::xavier_normal(&shape, *in_features, *out_features, rng)
                }
                ("gamma", _) => Tensor::full(&shape, 1.0),
                _ => Tensor::zeros(&shape),
            };
            params.push(t);
        }
        LayerNode {
            kind,
            params,
            buffers: default_buffers(&kind),
        }
    }

    /// A node with explicitly provided parameters.
    pub fn with_params(kind: LayerKind, params: Vec<Tensor>) -> Result<Self> {
        let specs = kind.param_specs();
        if specs.len() != params.len()
            || specs.iter().zip(&params).any(|((_, s), p)| s != p.shape())
        {
            return Err(Error::shape(format!(
                "{} parameters {:?} do not match {:?}",
                kind.name(),
                params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>(),
                specs
            )));
        }
        Ok(LayerNode {
            kind,
            params,
            buffers: default_buffers(&kind),
        })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, LayerCache)> {
        self.kind.output_shape(x.shape())?;
        match self.kind {
            LayerKind::Conv2d { geometry, bias } => {
                let s = x.shape();
                let x5 = x.reshape(&[s[0], s[1], 1, s[2], s[3]])?;
                let w = &self.params[0];
                let ws = w.shape();
                let w5 = w.reshape(&[ws[0], ws[1], 1, ws[2], ws[3]])?;
                let y = conv::conv_forward(&geometry, &x5, &w5, bias.then(|| &self.params[1]))?;
                let ys = y.shape().to_vec();
                let y = y.into_shape(&[ys[0], ys[1], ys[3], ys[4]])?;
                Ok((y, LayerCache::Conv { input: x.clone() }))
            }
            LayerKind::Conv3d { geometry, bias } => {
                let y = conv::conv_forward(
                    &geometry,
                    x,
                    &self.params[0],
                    bias.then(|| &self.params[1]),
                )?;
                Ok((y, LayerCache::Conv { input: x.clone() }))
            }
            LayerKind::MaxPool2d { window, stride } => {
                let s = x.shape();
                let x5 = x.reshape(&[s[0], s[1], 1, s[2], s[3]])?;
                let (y, argmax) =
                    pool::maxpool_forward(&x5, [1, window[0], window[1]], [1, stride[0], stride[1]])?;
                let ys = y.shape().to_vec();
                let y = y.into_shape(&[ys[0], ys[1], ys[3], ys[4]])?;
                Ok((
                    y,
                    LayerCache::MaxPool {
                        input_shape: s.to_vec(),
                        argmax,
                    },
                ))
            }
            LayerKind::MaxPool3d { window, stride } => {
                let (y, argmax) = pool::maxpool_forward(x, window, stride)?;
                Ok((
                    y,
                    LayerCache::MaxPool {
                        input_shape: x.shape().to_vec(),
                        argmax,
                    },
                ))
            }
            LayerKind::TemporalAvgPool => Ok((
                pool::temporal_avg_forward(x)?,
                LayerCache::TemporalAvgPool {
                    input_shape: x.shape().to_vec(),
                },
            )),
            LayerKind::BatchNorm { config, .. } => {
                let (rm, rv) = self.buffers.split_at_mut(1);
                let (y, cache) = norm::batchnorm_forward(
                    x,
                    &self.params[0],
                    &self.params[1],
                    &mut rm[0],
                    &mut rv[0],
                    config,
                    mode == Mode::Train,
                )?;
                Ok((y, LayerCache::BatchNorm(cache)))
            }
            LayerKind::Relu => Ok((
                x.map(|v| v.max(0.0)),
                LayerCache::Rectifier { input: x.clone() },
            )),
            LayerKind::LeakyRelu { slope } => Ok((
                x.map(|v| if v > 0.0 { v } else { slope * v }),
                LayerCache::Rectifier { input: x.clone() },
            )),
            LayerKind::Linear { .. } => {
                let wt = self.params[0].transpose()?;
                let mut y = x.matmul(&wt)?;
                let out = y.dim(1);
                for row in y.data_mut().chunks_mut(out) {
                    for (v, b) in row.iter_mut().zip(self.params[1].data()) {
                        *v += b;
                    }
                }
                Ok((y, LayerCache::Linear { input: x.clone() }))
            }
        }
    }

    pub fn backward(&self, cache: &LayerCache, grad_out: &Tensor, bp: &mut Backprop) -> Result<GradientBundle> {
        let mismatch = || Error::contract(format!("{} backward with a foreign cache", self.kind.name()));
        match (&self.kind, cache) {
            (LayerKind::Conv2d { geometry, bias }, LayerCache::Conv { input }) => {
                let s = input.shape();
                let x5 = input.reshape(&[s[0], s[1], 1, s[2], s[3]])?;
                let w = &self.params[0];
                let ws = w.shape();
                let w5 = w.reshape(&[ws[0], ws[1], 1, ws[2], ws[3]])?;
                let gs = grad_out.shape();
                if gs.len() != 4 {
                    return Err(Error::contract(format!("conv2d gradient {:?}", gs)));
                }
                let g5 = grad_out.reshape(&[gs[0], gs[1], 1, gs[2], gs[3]])?;
                let (gx, gw, gb) = conv::conv_backward(geometry, &x5, &w5, &g5, *bias)?;
                let mut params = vec![gw.into_shape(ws)?];
                params.extend(gb);
                Ok(GradientBundle {
                    input: gx.into_shape(s)?,
                    params,
                })
            }
            (LayerKind::Conv3d { geometry, bias }, LayerCache::Conv { input }) => {
                let (gx, gw, gb) = conv::conv_backward(geometry, input, &self.params[0], grad_out, *bias)?;
                let mut params = vec![gw];
                params.extend(gb);
                Ok(GradientBundle { input: gx, params })
            }
            (
                LayerKind::MaxPool2d { .. } | LayerKind::MaxPool3d { .. },
                LayerCache::MaxPool { input_shape, argmax },
            ) => Ok(GradientBundle {
                input: pool::maxpool_backward(input_shape, argmax, grad_out)?,
                params: vec![],
            }),
            (LayerKind::TemporalAvgPool, LayerCache::TemporalAvgPool { input_shape }) => {
                Ok(GradientBundle {
                    input: pool::temporal_avg_backward(input_shape, grad_out)?,
                    params: vec![],
                })
            }
            (LayerKind::BatchNorm { .. }, LayerCache::BatchNorm(c)) => {
                let (gx, gg, gb) = norm::batchnorm_backward(c, &self.params[0], grad_out)?;
                Ok(GradientBundle {
                    input: gx,
                    params: vec![gg, gb],
                })
            }
            (LayerKind::Relu | LayerKind::LeakyRelu { .. }, LayerCache::Rectifier { input }) => {
                let slope = match self.kind {
                    LayerKind::LeakyRelu { slope } => slope,
                    _ => 0.0,
                };
                let gx = rectifier_backward(input, grad_out, slope, bp.guided)?;
                if let Some(log) = bp.rectifier_log.as_mut() {
                    log.push((input.clone(), gx.clone()));
                }
                Ok(GradientBundle {
                    input: gx,
                    params: vec![],
                })
            }
            (LayerKind::Linear { .. }, LayerCache::Linear { input }) => {
                if grad_out.rank() != 2 || grad_out.dim(0) != input.dim(0) {
                    return Err(Error::contract(format!(
                        "linear backward: gradient {:?} for input {:?}",
                        grad_out.shape(),
                        input.shape()
                    )));
                }
                let gx = grad_out.matmul(&self.params[0])?;
                let gw = grad_out.transpose()?.matmul(input)?;
                let out = grad_out.dim(1);
                let mut gb = vec![0.0; out];
                for row in grad_out.data().chunks(out) {
                    for (b, g) in gb.iter_mut().zip(row) {
                        *b += g;
                    }
                }
                Ok(GradientBundle {
                    input: gx,
                    params: vec![gw, Tensor::new(vec![out], gb)?],
                })
            }
            _ => Err(mismatch()),
        }
    }
}

/// Rectifier derivative; in guided mode the gradient survives only where
/// both the forward input and the incoming gradient are positive.
pub fn rectifier_backward(input: &Tensor, grad_out: &Tensor, slope: f64, guided: bool) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::contract(format!(
            "rectifier backward: gradient {:?} vs input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    Ok(input
        .zip_map(grad_out, |x, g| {
            if guided {
                if x > 0.0 && g > 0.0 {
                    g
                } else {
                    0.0
                }
            } else if x > 0.0 {
                g
            } else {
                slope * g
            }
        })
        .expect("shapes checked"))
}

impl Parameterized for LayerNode {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, TensorRole)) {
        for ((name, _), t) in self.kind.param_specs().iter().zip(&self.params) {
            f(&join(prefix, name), t, TensorRole::Param);
        }
        for (name, t) in ["running_mean", "running_var"].iter().zip(&self.buffers) {
            f(&join(prefix, name), t, TensorRole::Buffer);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        let specs = self.kind.param_specs();
        for ((name, _), t) in specs.iter().zip(self.params.iter_mut()) {
            f(&join(prefix, name), t, TensorRole::Param);
        }
        for (name, t) in ["running_mean", "running_var"].iter().zip(self.buffers.iter_mut()) {
            f(&join(prefix, name), t, TensorRole::Buffer);
        }
    }
}

/// Straight chain of layers.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<LayerNode>,
}

impl Sequential {
    pub fn new(layers: Vec<LayerNode>) -> Self {
        Sequential { layers }
    }

    pub fn build(kinds: &[LayerKind], rng: &mut impl Rng) -> Self {
        Sequential {
            layers: kinds.iter().map(|k| LayerNode::new(*k, rng)).collect(),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        shape_through(self.layers.iter().map(|l| &l.kind), input)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (y, c) = layer.forward(&cur, mode)?;
            caches.push(c);
            cur = y;
        }
        Ok((cur, caches))
    }

    /// Input gradient and parameter gradients in visit order.
    pub fn backward(&self, caches: &[LayerCache], grad: &Tensor, bp: &mut Backprop) -> Result<(Tensor, Vec<Tensor>)> {
        if caches.len() != self.layers.len() {
            return Err(Error::contract("sequential backward: cache count mismatch"));
        }
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut g = grad.clone();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let b = layer.backward(cache, &g, bp)?;
            g = b.input;
            per_layer.push(b.params);
        }
        per_layer.reverse();
        Ok((g, per_layer.into_iter().flatten().collect()))
    }
}

pub fn shape_through<'a>(kinds: impl IntoIterator<Item = &'a LayerKind>, input: &[usize]) -> Result<Vec<usize>> {
    let mut s = input.to_vec();
    for k in kinds {
        s = k.output_shape(&s)?;
    }
    Ok(s)
}

impl Parameterized for Sequential {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, TensorRole)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
