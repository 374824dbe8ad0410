//! Channel-attention fusion of the two branch feature maps.
//!
//! Per branch and item: `F = flatten(F1)` (`C×HW`), `M = softmax_rows(F·Fᵀ)`,
//! `out = α·unflatten(M·F) + F1`. The attended maps are concatenated along
//! channels and passed through a 3×3 conv + batchnorm + leaky ReLU and a
//! 1×1 conv that produces the detection tensor.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Backprop, BatchNormConfig, LayerCache, LayerKind, Mode, Parameterized, Sequential, TensorRole};
use crate::tensor::{matmul_into, matmul_nt_acc, matmul_tn_into, softmax_in_place, Tensor};

/// Attention outputs plus what backward needs, for one `N×C×H×W` input.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Tensor,
    /// Row-softmaxed Gram matrices, `N×C×C`.
    weights: Vec<f64>,
    /// `M·F` per item, same layout as the input.
    attended: Vec<f64>,
    alpha: f64,
}

impl AttentionCache {
    /// Row-softmaxed channel affinities, `N×C×C`.
    pub fn weights(&self) -> Tensor {
        let s = self.input.shape();
        Tensor::new(vec![s[0], s[1], s[1]], self.weights.clone()).expect("cached sizes agree")
    }
}

fn item_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    x.expect_rank(4, "channel attention")?;
    let s = x.shape();
    Ok((s[0], s[1], s[2] * s[3]))
}

/// Batched channel attention on `N×C×H×W`.
pub fn attention_forward(x: &Tensor, alpha: f64) -> Result<(Tensor, AttentionCache)> {
    let (n, c, hw) = item_dims(x)?;
    let mut weights = vec![0.0; n * c * c];
    let mut attended = vec![0.0; n * c * hw];
    weights
        .par_chunks_mut(c * c)
        .zip(attended.par_chunks_mut(c * hw))
        .zip(x.data().par_chunks(c * hw.max(1)))
        .for_each(|((m, p), f)| {
            // G = F·Fᵀ
            m.fill(0.0);
            matmul_nt_acc(f, f, m, c, hw, c);
            for row in m.chunks_mut(c) {
                softmax_in_place(row);
            }
            matmul_into(m, f, p, c, c, hw);
        });
    let out = x
        .data()
        .iter()
        .zip(&attended)
        .map(|(&f, &p)| alpha * p + f)
        .collect();
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        AttentionCache {
            input: x.clone(),
            weights,
            attended,
            alpha,
        },
    ))
}

/// Channel attention of a single `C×H×W` map.
pub fn channel_attention(f1: &Tensor, alpha: f64) -> Result<Tensor> {
    f1.expect_rank(3, "channel attention")?;
    let s = f1.shape();
    let batched = f1.reshape(&[1, s[0], s[1], s[2]])?;
    attention_forward(&batched, alpha)?.0.into_shape(s)
}

/// Returns `(input gradient, α gradient)`.
pub fn attention_backward(cache: &AttentionCache, grad: &Tensor) -> Result<(Tensor, f64)> {
    if grad.shape() != cache.input.shape() {
        return Err(Error::contract(format!(
            "attention backward: gradient {:?} vs forward {:?}",
            grad.shape(),
            cache.input.shape()
        )));
    }
    let (_, c, hw) = item_dims(grad)?;
    let alpha = cache.alpha;
    let g = grad.data();
    let dalpha: f64 = g.iter().zip(&cache.attended).map(|(a, b)| a * b).sum();

    let mut gx = g.to_vec();
    gx.par_chunks_mut(c * hw.max(1))
        .zip(g.par_chunks(c * hw.max(1)))
        .zip(cache.input.data().par_chunks(c * hw.max(1)))
        .zip(cache.weights.par_chunks(c * c))
        .for_each(|(((dx, dout), f), m)| {
            if alpha == 0.0 {
                return;
            }
            let dp: Vec<f64> = dout.iter().map(|v| alpha * v).collect();
            // dM = dP·Fᵀ
            let mut dm = vec![0.0; c * c];
            matmul_nt_acc(&dp, f, &mut dm, c, hw, c);
            // softmax backward per row
            let mut dg = vec![0.0; c * c];
            for i in 0..c {
                let (mr, dr) = (&m[i * c..][..c], &dm[i * c..][..c]);
                let inner: f64 = mr.iter().zip(dr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dg[i * c + j] = mr[j] * (dr[j] - inner);
                }
            }
            // dF += Mᵀ·dP + (dG + dGᵀ)·F
            let mut acc = vec![0.0; c * hw];
            matmul_tn_into(m, &dp, &mut acc, c, c, hw);
            for (d, a) in dx.iter_mut().zip(&acc) {
                *d += a;
            }
            let mut sym = vec![0.0; c * c];
            for i in 0..c {
                for j in 0..c {
                    sym[i * c + j] = dg[i * c + j] + dg[j * c + i];
                }
            }
            matmul_into(&sym, f, &mut acc, c, c, hw);
            for (d, a) in dx.iter_mut().zip(&acc) {
                *d += a;
            }
        });
    Ok((Tensor::new(grad.shape().to_vec(), gx)?, dalpha))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Width between the two appended convolutions; defaults to the sum of
    /// the branch widths.
    pub mid_channels: Option<usize>,
    pub leaky_slope: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mid_channels: None,
            leaky_slope: 0.1,
        }
    }
}

/// Attention on each branch, concatenation, and the two output convolutions.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub branch_channels: Vec<usize>,
    /// One learnable `[1]` scalar per branch, initialized to zero.
    pub alphas: Vec<Tensor>,
    pub convs: Sequential,
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    attention: Vec<AttentionCache>,
    convs: Vec<LayerCache>,
}

impl Fusion {
    pub fn new(
        branch_channels: &[usize],
        out_channels: usize,
        cfg: &FusionConfig,
        norm: BatchNormConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if branch_channels.is_empty() || branch_channels.contains(&0) || out_channels == 0 {
            return Err(Error::config(format!(
                "fusion needs non-empty branches {branch_channels:?} and outputs {out_channels}"
            )));
        }
        let total: usize = branch_channels.iter().sum();
        let mid = cfg.mid_channels.unwrap_or(total);
        if mid == 0 {
            return Err(Error::config("fusion.mid_channels must be positive"));
        }
        let kinds = [
            LayerKind::conv2d(total, mid, 3, 1, 1, 1, false),
            LayerKind::BatchNorm {
                channels: mid,
                config: norm,
            },
            LayerKind::LeakyRelu {
                slope: cfg.leaky_slope,
            },
            LayerKind::conv2d(mid, out_channels, 1, 1, 0, 1, true),
        ];
        Ok(Fusion {
            branch_channels: branch_channels.to_vec(),
            alphas: vec![Tensor::zeros(&[1]); branch_channels.len()],
            convs: Sequential::build(&kinds, rng),
        })
    }

    pub fn forward(&mut self, branches: &[&Tensor], mode: Mode) -> Result<(Tensor, FusionCache)> {
        if branches.len() != self.alphas.len() {
            return Err(Error::contract(format!(
                "fusion built for {} branches, got {}",
                self.alphas.len(),
                branches.len()
            )));
        }
        let mut attended = Vec::with_capacity(branches.len());
        let mut attention = Vec::with_capacity(branches.len());
        for ((b, alpha), &c) in branches.iter().zip(&self.alphas).zip(&self.branch_channels) {
            if b.rank() != 4 || b.dim(1) != c {
                return Err(Error::shape(format!("fusion branch expects N×{c}×H×W, got {:?}", b.shape())));
            }
            let (y, cache) = attention_forward(b, alpha.data()[0])?;
            attended.push(y);
            attention.push(cache);
        }
        let refs: Vec<&Tensor> = attended.iter().collect();
        let joined = Tensor::concat(&refs, 1)?;
        let (out, convs) = self.convs.forward(&joined, mode)?;
        Ok((out, FusionCache { attention, convs }))
    }

    /// Branch gradients and parameter gradients in visit order.
    pub fn backward(&self, cache: &FusionCache, grad: &Tensor, bp: &mut Backprop) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let (gj, conv_grads) = self.convs.backward(&cache.convs, grad, bp)?;
        let mut branch_grads = Vec::new();
        let mut params = Vec::new();
        let mut start = 0;
        for (a, &c) in cache.attention.iter().zip(&self.branch_channels) {
            let slice = gj.slice_axis(1, start..start + c)?;
            start += c;
            let (gx, dalpha) = attention_backward(a, &slice)?;
            branch_grads.push(gx);
            params.push(Tensor::full(&[1], dalpha));
        }
        params.extend(conv_grads);
        Ok((branch_grads, params))
    }
}

impl Parameterized for Fusion {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, TensorRole)) {
        for (i, a) in self.alphas.iter().enumerate() {
            f(&join(prefix, &format!("alpha{i}")), a, TensorRole::Param);
        }
        self.convs.visit(&join(prefix, "convs"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        for (i, a) in self.alphas.iter_mut().enumerate() {
            f(&join(prefix, &format!("alpha{i}")), a, TensorRole::Param);
        }
        self.convs.visit_mut(&join(prefix, "convs"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_difference, max_relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    /// Step-by-step composition from public tensor ops.
    fn oracle(f1: &Tensor, alpha: f64) -> Tensor {
        let (h, w) = (f1.dim(1), f1.dim(2));
        let f = f1.flatten_spatial().unwrap();
        let g = f.matmul(&f.transpose().unwrap()).unwrap();
        let m = g.softmax_rows().unwrap();
        let p = m.matmul(&f).unwrap().unflatten_spatial(h, w).unwrap();
        p.scale(alpha).add(f1).unwrap()
    }

    #[test]
    fn zero_alpha_is_identity() {
        let x = random(&[4, 3, 5], 1);
        assert_eq!(channel_attention(&x, 0.0).unwrap(), x);
    }

    #[test]
    fn identical_rows_scale_by_one_plus_alpha() {
        let row = [0.3, -1.2, 2.0, 0.5];
        let x = Tensor::from_fn(&[3, 2, 2], |i| row[i % 4]);
        let y = channel_attention(&x, 0.7).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - 1.7 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_composition_oracle() {
        let x = random(&[3, 2, 2], 2);
        let y = channel_attention(&x, 0.5).unwrap();
        let o = oracle(&x, 0.5);
        for (a, b) in y.data().iter().zip(o.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_gradient_when_attended_equals_input() {
        let row = [0.3, -1.2, 2.0, 0.5];
        let x = Tensor::from_fn(&[1, 3, 2, 2], |i| row[i % 4]);
        let g = random(&[1, 3, 2, 2], 3);
        let (_, cache) = attention_forward(&x, 0.2).unwrap();
        let (_, dalpha) = attention_backward(&cache, &g).unwrap();
        assert!((dalpha - g.dot(&x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_gives_zero_gradients() {
        let x = random(&[1, 3, 2, 2], 4);
        let (_, cache) = attention_forward(&x, 0.5).unwrap();
        let (gx, dalpha) = attention_backward(&cache, &Tensor::zeros(&[1, 3, 2, 2])).unwrap();
        assert_eq!(dalpha, 0.0);
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        for seed in 0..4 {
            let x = random(&[2, 3, 2, 2], 10 + seed);
            let proj = random(&[2, 3, 2, 2], 20 + seed);
            let alpha = 0.5;
            let (_, cache) = attention_forward(&x, alpha).unwrap();
            let (gx, dalpha) = attention_backward(&cache, &proj).unwrap();
            let num = central_difference(
                &mut |t| attention_forward(t, alpha).unwrap().0.dot(&proj).unwrap(),
                &x,
                1e-5,
            );
            assert!(max_relative_error(&gx, &num) < 1e-4);
            let a = Tensor::scalar(alpha);
            let na = central_difference(
                &mut |t| attention_forward(&x, t.data()[0]).unwrap().0.dot(&proj).unwrap(),
                &a,
                1e-5,
            );
            assert!(max_relative_error(&Tensor::scalar(dalpha), &na) < 1e-4);
        }
    }

    #[test]
    fn head_width_follows_class_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (ncls, c) in [(21, 130), (24, 145), (1, 30)] {
            let fu = Fusion::new(&[4, 4], (5 + ncls) * 5, &Default::default(), Default::default(), &mut rng).unwrap();
            let shape = fu.convs.output_shape(&[1, 8, 2, 2]).unwrap();
            assert_eq!(shape, vec![1, c, 2, 2]);
        }
    }

    #[test]
    fn spatial_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fu = Fusion::new(&[2, 3], 30, &Default::default(), Default::default(), &mut rng).unwrap();
        let a = random(&[1, 2, 2, 2], 1);
        let b = random(&[1, 3, 3, 3], 2);
        assert!(matches!(fu.forward(&[&a, &b], Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn end_to_end_fusion_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut fu = Fusion::new(&[2, 3], 30, &Default::default(), Default::default(), &mut rng).unwrap();
        fu.alphas[0] = Tensor::full(&[1], 0.4);
        fu.alphas[1] = Tensor::full(&[1], -0.3);
        let a = random(&[2, 2, 2, 2], 6);
        let b = random(&[2, 3, 2, 2], 7);
        let proj = random(&[2, 30, 2, 2], 8);
        let mode = Mode::Train;
        let (_, cache) = fu.clone().forward(&[&a, &b], mode).unwrap();
        let (bg, pg) = fu.backward(&cache, &proj, &mut Backprop::plain()).unwrap();

        let objective = |fu: &Fusion, a: &Tensor, b: &Tensor| {
            fu.clone().forward(&[a, b], mode).unwrap().0.dot(&proj).unwrap()
        };
        let na = central_difference(&mut |t| objective(&fu, t, &b), &a, 1e-5);
        let nb = central_difference(&mut |t| objective(&fu, &a, t), &b, 1e-5);
        assert!(max_relative_error(&bg[0], &na) < 1e-4);
        assert!(max_relative_error(&bg[1], &nb) < 1e-4);

        let names: Vec<String> = {
            let mut v = Vec::new();
            fu.visit("", &mut |n, _, r| {
                if r == TensorRole::Param {
                    v.push(n.to_string())
                }
            });
            v
        };
        assert_eq!(names.len(), pg.len());
        for (name, analytic) in names.iter().zip(&pg) {
            let base = fu.params().into_iter().zip(&names).find(|(_, n)| *n == name).unwrap().0.clone();
            let num = central_difference(
                &mut |t| {
                    let mut probe = fu.clone();
                    probe.visit_mut("", &mut |n, p, _| {
                        if n == name {
                            *p = t.clone();
                        }
                    });
                    objective(&probe, &a, &b)
                },
                &base,
                1e-5,
            );
            let err = max_relative_error(analytic, &num);
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn attention_rows_sum_to_one(seed in 0u64..1000, c in 1usize..5, hw in 1usize..5) {
            let x = random(&[1, c, hw, 1], seed).scale(3.0);
            let (_, cache) = attention_forward(&x, 1.0).unwrap();
            for row in cache.weights.chunks(c) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn channel_permutation_equivariance(seed in 0u64..1000, alpha in -1.0f64..1.0) {
            let x = random(&[4, 2, 3], seed);
            let perm = [2usize, 0, 3, 1];
            let permute = |t: &Tensor| {
                let parts: Vec<Tensor> = perm.iter().map(|&p| t.slice_axis(0, p..p + 1).unwrap()).collect();
                let refs: Vec<&Tensor> = parts.iter().collect();
                Tensor::concat(&refs, 0).unwrap()
            };
            let a = permute(&channel_attention(&x, alpha).unwrap());
            let b = channel_attention(&permute(&x), alpha).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
