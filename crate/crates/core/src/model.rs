//! The full detector: frequency branch on the keyframe's DCT channels, time
//! branch on the clip, attention fusion and the detection grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbones::{FrequencyBackbone, TimeBackbone, TimeCache};
use crate::config::RunConfig;
use crate::data::ClipSample;
use crate::dct::{frequency_volume, COMPONENTS};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionCache};
use crate::head::head_channels;
use crate::nn::{Backprop, LayerCache, Mode, Parameterized, TensorRole};
use crate::tensor::Tensor;

/// Pixel values and DCT coefficients are divided by this before entering
/// the network.
pub const INPUT_SCALE: f64 = 255.0;

#[derive(Debug, Clone)]
pub struct TfNet {
    pub num_classes: usize,
    pub anchors: Vec<[f64; 2]>,
    pub dct_per_component: usize,
    pub clip_depth: usize,
    pub frame_size: usize,
    pub keyframe_size: usize,
    pub grid_size: usize,
    /// Absent in the time-only ablation.
    pub frequency: Option<FrequencyBackbone>,
    pub time: TimeBackbone,
    pub fusion: Fusion,
}

/// Batched network input.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// `N×3×D×F×F`.
    pub clips: Tensor,
    /// `N×C_f×B×B` with `B = keyframe_size / 8`.
    pub dct: Option<Tensor>,
}

#[derive(Debug)]
pub struct ModelCache {
    frequency: Option<Vec<LayerCache>>,
    time: TimeCache,
    fusion: FusionCache,
}

#[derive(Debug, Clone)]
pub struct InputGrads {
    pub clips: Tensor,
    pub dct: Option<Tensor>,
}

impl TfNet {
    pub fn new(cfg: &RunConfig, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if num_classes == 0 {
            return Err(Error::config("model needs at least one class"));
        }
        let norm = cfg.batchnorm;
        let clip = &cfg.clip;
        let per_component = cfg.model.dct_per_component()?;
        let time = TimeBackbone::new(&cfg.time, clip.clip_depth, norm, rng)?;
        let time_out = time.output_shape(&[1, 3, clip.clip_depth, clip.frame_size, clip.frame_size])?;
        let grid_size = time_out[2];
        let mut branches = vec![];
        let frequency = if cfg.model.use_frequency {
            let cin = COMPONENTS * per_component;
            let f = FrequencyBackbone::new(&cfg.frequency, cin, norm, rng)?;
            let blocks = clip.keyframe_size / 8;
            let out = f.output_shape(&[1, cin, blocks, blocks])?;
            if out[2] != grid_size || out[3] != time_out[3] {
                return Err(Error::config(format!(
                    "frequency grid {}×{} differs from time grid {}×{}",
                    out[2], out[3], time_out[2], time_out[3]
                )));
            }
            branches.push(out[1]);
            Some(f)
        } else {
            None
        };
        branches.push(time_out[1]);
        let fusion = Fusion::new(
            &branches,
            head_channels(num_classes, cfg.head.anchors.len()),
            &cfg.fusion,
            norm,
            rng,
        )?;
        Ok(TfNet {
            num_classes,
            anchors: cfg.head.anchors.clone(),
            dct_per_component: per_component,
            clip_depth: clip.clip_depth,
            frame_size: clip.frame_size,
            keyframe_size: clip.keyframe_size,
            grid_size,
            frequency,
            time,
            fusion,
        })
    }

    /// Model initialized from `cfg.seed`.
    pub fn seeded(cfg: &RunConfig, num_classes: usize) -> Result<Self> {
        TfNet::new(cfg, num_classes, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
    }

    pub fn dct_channels(&self) -> usize {
        COMPONENTS * self.dct_per_component
    }

    /// Converts loaded clips into network tensors.
    pub fn prepare(&self, samples: &[ClipSample]) -> Result<ModelInput> {
        if samples.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let (d, f) = (self.clip_depth, self.frame_size);
        let mut clips = Vec::with_capacity(samples.len() * 3 * d * f * f);
        for s in samples {
            if s.frames.len() != d || s.frames.iter().any(|im| im.width() != f || im.height() != f) {
                return Err(Error::shape(format!(
                    "clip of {} frames does not match depth {d} and size {f}",
                    s.frames.len()
                )));
            }
            for c in 0..3 {
                for im in &s.frames {
                    clips.extend(im.pixels().iter().map(|p| p[c] as f64 / INPUT_SCALE));
                }
            }
        }
        let clips = Tensor::new(vec![samples.len(), 3, d, f, f], clips)?;
        let dct = if self.frequency.is_some() {
            let vols = samples
                .iter()
                .map(|s| {
                    if s.keyframe.width() != self.keyframe_size || s.keyframe.height() != self.keyframe_size {
                        return Err(Error::shape(format!(
                            "keyframe {}×{} is not {}",
                            s.keyframe.width(),
                            s.keyframe.height(),
                            self.keyframe_size
                        )));
                    }
                    Ok(frequency_volume(&s.keyframe, self.dct_per_component)?
                        .into_tensor()
                        .scale(1.0 / INPUT_SCALE))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(Tensor::stack(&vols)?)
        } else {
            None
        };
        Ok(ModelInput { clips, dct })
    }

    /// `N×(5+K)A×S×S` grid.
    pub fn forward(&mut self, input: &ModelInput, mode: Mode) -> Result<(Tensor, ModelCache)> {
        let (freq_out, frequency) = match (&mut self.frequency, &input.dct) {
            (Some(f), Some(x)) => {
                let (y, c) = f.forward(x, mode)?;
                (Some(y), Some(c))
            }
            (None, None) => (None, None),
            (Some(_), None) => return Err(Error::contract("model has a frequency branch but no DCT input was given")),
            (None, Some(_)) => return Err(Error::contract("time-only model given a DCT input")),
        };
        let (time_out, time) = self.time.forward(&input.clips, mode)?;
        let mut branches: Vec<&Tensor> = freq_out.iter().collect();
        branches.push(&time_out);
        let (grid, fusion) = self.fusion.forward(&branches, mode)?;
        Ok((
            grid,
            ModelCache {
                frequency,
                time,
                fusion,
            },
        ))
    }

    /// Input gradients and parameter gradients in visit order.
    pub fn backward(&self, cache: &ModelCache, grad: &Tensor, bp: &mut Backprop) -> Result<(InputGrads, Vec<Tensor>)> {
        let (mut branch_grads, fusion_grads) = self.fusion.backward(&cache.fusion, grad, bp)?;
        let time_grad = branch_grads.pop().expect("time branch is last");
        let (clips, time_grads) = self.time.backward(&cache.time, &time_grad, bp)?;
        let mut params = Vec::new();
        let dct = match (&self.frequency, &cache.frequency) {
            (Some(f), Some(c)) => {
                let (g, pg) = f.backward(c, &branch_grads[0], bp)?;
                params.extend(pg);
                Some(g)
            }
            _ => None,
        };
        params.extend(time_grads);
        params.extend(fusion_grads);
        Ok((InputGrads { clips, dct }, params))
    }
}

impl Parameterized for TfNet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, TensorRole)) {
        if let Some(fb) = &self.frequency {
            fb.visit(&crate::nn::join(prefix, "frequency"), f);
        }
        self.time.visit(&crate::nn::join(prefix, "time"), f);
        self.fusion.visit(&crate::nn::join(prefix, "fusion"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        if let Some(fb) = &mut self.frequency {
            fb.visit_mut(&crate::nn::join(prefix, "frequency"), f);
        }
        self.time.visit_mut(&crate::nn::join(prefix, "time"), f);
        self.fusion.visit_mut(&crate::nn::join(prefix, "fusion"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_difference, max_relative_error, DEFAULT_EPS};

    pub(crate) fn tiny_config() -> RunConfig {
        RunConfig::from_toml(
            "[clip]\nclip_depth = 2\nframe_size = 64\nkeyframe_size = 128\n\
             [frequency]\nwidths = [4, 4, 4]\nout_channels = 4\n\
             [time]\nstem_width = 4\nwidths = [4, 4, 4, 4]\ncardinality = 2\nout_channels = 4\n\
             [model]\ndct_channels = 2\n",
            &[],
        )
        .unwrap()
    }

    fn random_input(net: &TfNet, n: usize, seed: u64) -> ModelInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, b) = (net.clip_depth, net.frame_size, net.keyframe_size / 8);
        ModelInput {
            clips: Tensor::from_fn(&[n, 3, d, f, f], |_| rng.random_range(0.0..1.0)),
            dct: net
                .frequency
                .as_ref()
                .map(|_| Tensor::from_fn(&[n, net.dct_channels(), b, b], |_| rng.random_range(-1.0..1.0))),
        }
    }

    #[test]
    fn micro_shapes_and_names() {
        let cfg = RunConfig::default();
        let mut net = TfNet::seeded(&cfg, 2).unwrap();
        assert_eq!(net.grid_size, 2);
        assert_eq!(net.dct_channels(), 48);
        let x = random_input(&net, 2, 1);
        let (grid, _) = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(grid.shape(), &[2, 35, 2, 2]);
        let mut names = vec![];
        net.visit("", &mut |n, _, _| names.push(n.to_string()));
        assert!(names[0].starts_with("frequency."));
        assert!(names.iter().any(|n| n.starts_with("time.stem")));
        assert!(names.contains(&"fusion.alpha0".to_string()));
        assert!(names.contains(&"fusion.alpha1".to_string()));
    }

    #[test]
    fn time_only_ablation() {
        let mut cfg = tiny_config();
        cfg.model.use_frequency = false;
        let mut net = TfNet::seeded(&cfg, 3).unwrap();
        assert!(net.frequency.is_none());
        let x = random_input(&net, 1, 2);
        assert!(x.dct.is_none());
        let (grid, cache) = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(grid.shape(), &[1, 40, 2, 2]);
        let (g, params) = net.backward(&cache, &Tensor::full(grid.shape(), 1.0), &mut Backprop::plain()).unwrap();
        assert!(g.dct.is_none());
        assert_eq!(params.len(), net.params().len());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let cfg = tiny_config();
        let a = TfNet::seeded(&cfg, 2).unwrap();
        let b = TfNet::seeded(&cfg, 2).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn mismatched_input_rejected() {
        let cfg = tiny_config();
        let mut net = TfNet::seeded(&cfg, 2).unwrap();
        let mut x = random_input(&net, 1, 3);
        x.dct = None;
        assert!(matches!(net.forward(&x, Mode::Eval), Err(Error::Contract(_))));
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let mut net = TfNet::seeded(&cfg, 2).unwrap();
        // Nonzero attention so its gradient path is exercised.
        net.fusion.alphas[0].data_mut()[0] = 0.3;
        net.fusion.alphas[1].data_mut()[0] = -0.2;
        let x = random_input(&net, 2, 4);
        let (grid, cache) = net.forward(&x, Mode::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::from_fn(grid.shape(), |_| rng.random_range(-1.0..1.0));
        let (gin, gparams) = net.backward(&cache, &w, &mut Backprop::plain()).unwrap();

        let objective = |net: &mut TfNet, x: &ModelInput| net.forward(x, Mode::Train).unwrap().0.dot(&w).unwrap();
        let mut probe = net.clone();
        let dct = x.dct.clone().unwrap();
        let numeric = central_difference(
            &mut |d| {
                let xi = ModelInput {
                    clips: x.clips.clone(),
                    dct: Some(d.clone()),
                };
                objective(&mut probe, &xi)
            },
            &dct,
            DEFAULT_EPS,
        );
        assert!(max_relative_error(gin.dct.as_ref().unwrap(), &numeric) < 1e-4);

        // A handful of entries of every parameter tensor.
        let params: Vec<Tensor> = net.params().into_iter().cloned().collect();
        for (k, p) in params.iter().enumerate() {
            for &i in &[0, p.len() / 2, p.len() - 1] {
                let at = |delta: f64| {
                    let mut m = net.clone();
                    let mut idx = 0;
                    m.visit_mut("", &mut |_, t, role| {
                        if role == TensorRole::Param {
                            if idx == k {
                                t.data_mut()[i] += delta;
                            }
                            idx += 1;
                        }
                    });
                    objective(&mut m, &x)
                };
                let num = (at(DEFAULT_EPS) - at(-DEFAULT_EPS)) / (2.0 * DEFAULT_EPS);
                let ana = gparams[k].data()[i];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel < 1e-4, "param {k}[{i}]: analytic {ana} numeric {num}");
            }
        }
    }
}

