//! Per-channel batch normalization over `N×C×...` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Saved for backward.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub(crate) xhat: Tensor,
    pub(crate) inv_std: Vec<f64>,
    pub(crate) batch_stats: bool,
}

fn layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::shape(format!("batchnorm on {:?}", x.shape())));
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2..].iter().product()))
}

/// Forward pass. With `batch_stats` the running statistics are updated in
/// place; otherwise they are used as-is.
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
    cfg: BatchNormConfig,
    batch_stats: bool,
) -> Result<(Tensor, BatchNormCache)> {
    let (n, c, inner) = layout(x)?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "batchnorm over {c} channels with {} scales",
            gamma.len()
        )));
    }
    let xd = x.data();
    let count = (n * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    if batch_stats {
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += xd[(b * c + ch) * inner..][..inner].iter().sum::<f64>();
            }
            mean[ch] = s / count;
            let mut v = 0.0;
            for b in 0..n {
                for &xv in &xd[(b * c + ch) * inner..][..inner] {
                    v += (xv - mean[ch]) * (xv - mean[ch]);
                }
            }
            var[ch] = v / count;
        }
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let m = cfg.momentum;
        for ch in 0..c {
            let rm = &mut running_mean.data_mut()[ch];
            *rm = (1.0 - m) * *rm + m * mean[ch];
            let rv = &mut running_var.data_mut()[ch];
            *rv = (1.0 - m) * *rv + m * var[ch] * unbias;
        }
    } else {
        mean.copy_from_slice(running_mean.data());
        var.copy_from_slice(running_var.data());
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect();
    let mut xhat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + inner {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                y[i] = g * xhat[i] + bt;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BatchNormCache {
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            inv_std,
            batch_stats,
        },
    ))
}

/// Returns `(input gradient, gamma gradient, beta gradient)`.
pub fn batchnorm_backward(
    cache: &BatchNormCache,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::contract(format!(
            "batchnorm backward: gradient {:?} vs forward {:?}",
            grad_out.shape(),
            cache.xhat.shape()
        )));
    }
    let (n, c, inner) = layout(grad_out)?;
    let count = (n * inner) as f64;
    let gy = grad_out.data();
    let xh = cache.xhat.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                dgamma[ch] += gy[i] * xh[i];
                dbeta[ch] += gy[i];
            }
        }
    }
    let mut gx = vec![0.0; gy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            let k = gamma.data()[ch] * cache.inv_std[ch];
            for i in off..off + inner {
                gx[i] = if cache.batch_stats {
                    k * (gy[i] - dbeta[ch] / count - xh[i] * dgamma[ch] / count)
                } else {
                    k * gy[i]
                };
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), gx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}
