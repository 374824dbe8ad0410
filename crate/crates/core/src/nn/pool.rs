use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max pooling over the three trailing axes of `N×C×D×H×W`, no padding.
/// Returns the output and, per output element, the flat input index of the
/// first maximum in scan order.
pub fn maxpool_forward(
    input: &Tensor,
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<(Tensor, Vec<usize>)> {
    input.expect_rank(5, "maxpool")?;
    let s = input.shape();
    let (n, c) = (s[0], s[1]);
    let spatial = [s[2], s[3], s[4]];
    let mut out_sp = [0; 3];
    for a in 0..3 {
        if window[a] == 0 || stride[a] == 0 || window[a] > spatial[a] {
            return Err(Error::shape(format!(
                "pool window {:?} stride {:?} does not fit input {:?}",
                window,
                stride,
                input.shape()
            )));
        }
        out_sp[a] = (spatial[a] - window[a]) / stride[a] + 1;
    }
    let in_vol: usize = spatial.iter().product();
    let out_vol: usize = out_sp.iter().product();
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * out_vol);
    let mut arg = Vec::with_capacity(n * c * out_vol);
    for plane in 0..n * c {
        let base = plane * in_vol;
        for od in 0..out_sp[0] {
            for oh in 0..out_sp[1] {
                for ow in 0..out_sp[2] {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for kd in 0..window[0] {
                        for kh in 0..window[1] {
                            for kw in 0..window[2] {
                                let id = od * stride[0] + kd;
                                let ih = oh * stride[1] + kh;
                                let iw = ow * stride[2] + kw;
                                let i = base + (id * spatial[1] + ih) * spatial[2] + iw;
                                if x[i] > best || best_i == usize::MAX {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    let t = Tensor::new(vec![n, c, out_sp[0], out_sp[1], out_sp[2]], out)?;
    Ok((t, arg))
}

pub fn maxpool_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::contract(format!(
            "maxpool backward: {} gradients for {} outputs",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        gd[i] += v;
    }
    Ok(g)
}

/// Mean over the depth axis: `N×C×D×H×W -> N×C×1×H×W`.
pub fn temporal_avg_forward(input: &Tensor) -> Result<Tensor> {
    input.expect_rank(5, "temporal_avg_pool")?;
    let s = input.shape();
    let (nc, d, hw) = (s[0] * s[1], s[2], s[3] * s[4]);
    let x = input.data();
    let mut out = vec![0.0; nc * hw];
    for p in 0..nc {
        let o = &mut out[p * hw..(p + 1) * hw];
        for z in 0..d {
            for (ov, xv) in o.iter_mut().zip(&x[(p * d + z) * hw..][..hw]) {
                *ov += xv;
            }
        }
        for ov in o.iter_mut() {
            *ov /= d as f64;
        }
    }
    Tensor::new(vec![s[0], s[1], 1, s[3], s[4]], out)
}

pub fn temporal_avg_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (nc, d, hw) = (
        input_shape[0] * input_shape[1],
        input_shape[2],
        input_shape[3] * input_shape[4],
    );
    if grad_out.len() != nc * hw {
        return Err(Error::contract(format!(
            "temporal pool backward: gradient {:?} for input {:?}",
            grad_out.shape(),
            input_shape
        )));
    }
    let gy = grad_out.data();
    let mut g = vec![0.0; nc * d * hw];
    for p in 0..nc {
        for z in 0..d {
            for (gv, yv) in g[(p * d + z) * hw..][..hw].iter_mut().zip(&gy[p * hw..][..hw]) {
                *gv = yv / d as f64;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), g)
}
