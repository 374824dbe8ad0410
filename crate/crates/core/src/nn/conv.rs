//! Direct grouped convolution over up to three spatial axes.
//!
//! Tensors are `N×C×D×H×W`; 2-D layers run with `D = 1` and a unit depth
//! kernel. Cross-correlation convention (no kernel flip). Every output
//! element accumulates bias first, then inputs in ascending
//! `(channel, kd, kh, kw)` order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub groups: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        let g = self.groups;
        if g == 0 || self.in_channels % g != 0 || self.out_channels % g != 0 {
            return Err(Error::shape(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, g
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape("convolution with zero channels"));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::shape(format!(
                "kernel {:?} / stride {:?} must be positive",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    pub fn receptive(&self) -> usize {
        self.kernel.iter().product()
    }

    /// `floor((in + 2p - k) / s) + 1` per axis.
    pub fn output_spatial(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] {
                return Err(Error::shape(format!(
                    "kernel {:?} larger than padded input {:?} (pad {:?})",
                    self.kernel, input, self.pad
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

/// Output positions `o` along one axis with `0 <= o*s + k - p < len`.
fn valid_range(k: usize, s: usize, p: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if len + p > k {
        ((len + p - k - 1) / s + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

struct Dims {
    n: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Dims {
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }
}

fn dims(geo: &ConvGeometry, input: &Tensor) -> Result<Dims> {
    input.expect_rank(5, "conv")?;
    if input.dim(1) != geo.in_channels {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {:?}",
            geo.in_channels,
            input.shape()
        )));
    }
    let spatial = [input.dim(2), input.dim(3), input.dim(4)];
    Ok(Dims {
        n: input.dim(0),
        input: spatial,
        output: geo.output_spatial(spatial)?,
    })
}

/// Visits every `(input row, output row, ow range, input col offset)`
/// contribution of kernel tap `(kd, kh, kw)`.
#[inline]
fn for_each_tap_row(
    geo: &ConvGeometry,
    d: &Dims,
    tap: [usize; 3],
    mut f: impl FnMut(usize, usize, usize, usize, isize),
) {
    let [kd, kh, kw] = tap;
    let (d_lo, d_hi) = valid_range(kd, geo.stride[0], geo.pad[0], d.input[0], d.output[0]);
    let (h_lo, h_hi) = valid_range(kh, geo.stride[1], geo.pad[1], d.input[1], d.output[1]);
    let (w_lo, w_hi) = valid_range(kw, geo.stride[2], geo.pad[2], d.input[2], d.output[2]);
    if w_lo >= w_hi {
        return;
    }
    let col_shift = kw as isize - geo.pad[2] as isize;
    for od in d_lo..d_hi {
        let id = od * geo.stride[0] + kd - geo.pad[0];
        for oh in h_lo..h_hi {
            let ih = oh * geo.stride[1] + kh - geo.pad[1];
            let in_row = (id * d.input[1] + ih) * d.input[2];
            let out_row = (od * d.output[1] + oh) * d.output[2];
            f(in_row, out_row, w_lo, w_hi, col_shift);
        }
    }
}

pub fn conv_forward(
    geo: &ConvGeometry,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    geo.validate()?;
    let d = dims(geo, input)?;
    if weight.shape() != geo.weight_shape() {
        return Err(Error::shape(format!(
            "conv weight {:?}, expected {:?}",
            weight.shape(),
            geo.weight_shape()
        )));
    }
    let (cin_g, cout_g) = (
        geo.in_channels / geo.groups,
        geo.out_channels / geo.groups,
    );
    let (in_vol, out_vol) = (d.in_vol(), d.out_vol());
    let rk = geo.receptive();
    let sw = geo.stride[2];
    let x = input.data();
    let w = weight.data();
    let mut out = vec![0.0; d.n * geo.out_channels * out_vol];
    out.par_chunks_mut(out_vol)
        .enumerate()
        .for_each(|(idx, o)| {
            let (n, co) = (idx / geo.out_channels, idx % geo.out_channels);
            if let Some(b) = bias {
                o.fill(b.data()[co]);
            }
            let g = co / cout_g;
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                let xin = &x[(n * geo.in_channels + ci) * in_vol..][..in_vol];
                let wk = &w[(co * cin_g + cl) * rk..][..rk];
                for kd in 0..geo.kernel[0] {
                    for kh in 0..geo.kernel[1] {
                        for kw in 0..geo.kernel[2] {
                            let wv = wk[(kd * geo.kernel[1] + kh) * geo.kernel[2] + kw];
                            for_each_tap_row(geo, &d, [kd, kh, kw], |ir, or, lo, hi, sh| {
                                let orow = &mut o[or..or + hi];
                                if sw == 1 {
                                    let start = (ir as isize + lo as isize + sh) as usize;
                                    let irow = &xin[start..start + (hi - lo)];
                                    for (ov, iv) in orow[lo..].iter_mut().zip(irow) {
                                        *ov += wv * iv;
                                    }
                                } else {
                                    for (ow, ov) in orow.iter_mut().enumerate().skip(lo) {
                                        let ix = (ir as isize + (ow * sw) as isize + sh) as usize;
                                        *ov += wv * xin[ix];
                                    }
                                }
                            });
                        }
                    }
                }
            }
        });
    Tensor::new(
        vec![d.n, geo.out_channels, d.output[0], d.output[1], d.output[2]],
        out,
    )
}

/// Returns `(input gradient, weight gradient, bias gradient)`.
pub fn conv_backward(
    geo: &ConvGeometry,
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    want_bias: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let d = dims(geo, input)?;
    let out_shape = [d.n, geo.out_channels, d.output[0], d.output[1], d.output[2]];
    if grad_out.shape() != out_shape {
        return Err(Error::contract(format!(
            "conv backward: gradient {:?} does not match output {:?}",
            grad_out.shape(),
            out_shape
        )));
    }
    let (cin_g, cout_g) = (
        geo.in_channels / geo.groups,
        geo.out_channels / geo.groups,
    );
    let (in_vol, out_vol) = (d.in_vol(), d.out_vol());
    let rk = geo.receptive();
    let sw = geo.stride[2];
    let x = input.data();
    let w = weight.data();
    let gy = grad_out.data();

    let mut gx = vec![0.0; x.len()];
    gx.par_chunks_mut(in_vol)
        .enumerate()
        .for_each(|(idx, gi)| {
            let (n, ci) = (idx / geo.in_channels, idx % geo.in_channels);
            let g = ci / cin_g;
            let cl = ci % cin_g;
            for co in g * cout_g..(g + 1) * cout_g {
                let go = &gy[(n * geo.out_channels + co) * out_vol..][..out_vol];
                let wk = &w[(co * cin_g + cl) * rk..][..rk];
                for kd in 0..geo.kernel[0] {
                    for kh in 0..geo.kernel[1] {
                        for kw in 0..geo.kernel[2] {
                            let wv = wk[(kd * geo.kernel[1] + kh) * geo.kernel[2] + kw];
                            for_each_tap_row(geo, &d, [kd, kh, kw], |ir, or, lo, hi, sh| {
                                let grow = &go[or..or + hi];
                                if sw == 1 {
                                    let start = (ir as isize + lo as isize + sh) as usize;
                                    let irow = &mut gi[start..start + (hi - lo)];
                                    for (iv, gv) in irow.iter_mut().zip(&grow[lo..]) {
                                        *iv += wv * gv;
                                    }
                                } else {
                                    for (ow, gv) in grow.iter().enumerate().skip(lo) {
                                        let ix = (ir as isize + (ow * sw) as isize + sh) as usize;
                                        gi[ix] += wv * gv;
                                    }
                                }
                            });
                        }
                    }
                }
            }
        });

    let mut gw = vec![0.0; w.len()];
    gw.par_chunks_mut(cin_g * rk)
        .enumerate()
        .for_each(|(co, gwc)| {
            let g = co / cout_g;
            for n in 0..d.n {
                let go = &gy[(n * geo.out_channels + co) * out_vol..][..out_vol];
                for cl in 0..cin_g {
                    let ci = g * cin_g + cl;
                    let xin = &x[(n * geo.in_channels + ci) * in_vol..][..in_vol];
                    for kd in 0..geo.kernel[0] {
                        for kh in 0..geo.kernel[1] {
                            for kw in 0..geo.kernel[2] {
                                let t = (kd * geo.kernel[1] + kh) * geo.kernel[2] + kw;
                                let mut acc = 0.0;
                                for_each_tap_row(geo, &d, [kd, kh, kw], |ir, or, lo, hi, sh| {
                                    let grow = &go[or..or + hi];
                                    if sw == 1 {
                                        let start = (ir as isize + lo as isize + sh) as usize;
                                        let irow = &xin[start..start + (hi - lo)];
                                        for (iv, gv) in irow.iter().zip(&grow[lo..]) {
                                            acc += iv * gv;
                                        }
                                    } else {
                                        for (ow, gv) in grow.iter().enumerate().skip(lo) {
                                            let ix =
                                                (ir as isize + (ow * sw) as isize + sh) as usize;
                                            acc += xin[ix] * gv;
                                        }
                                    }
                                });
                                gwc[cl * rk + t] += acc;
                            }
                        }
                    }
                }
            }
        });

    let gb = want_bias.then(|| {
        let mut b = vec![0.0; geo.out_channels];
        for n in 0..d.n {
            for (co, bv) in b.iter_mut().enumerate() {
                *bv += gy[(n * geo.out_channels + co) * out_vol..][..out_vol]
                    .iter()
                    .sum::<f64>();
            }
        }
        Tensor::new(vec![geo.out_channels], b).unwrap()
    });

    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        gb,
    ))
}
