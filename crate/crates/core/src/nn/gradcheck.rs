//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Backprop, LayerKind, LayerNode, Mode};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor, so entries whose true gradient is zero are compared
/// in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `∂f/∂x` by central differences with step `eps`.
pub fn central_difference(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    out
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, RELATIVE_FLOOR)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub input_error: f64,
    pub param_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.param_errors
            .iter()
            .copied()
            .fold(self.input_error, f64::max)
    }
}

/// Checks one layer on `input` against the scalar objective `Σ R ⊙ layer(x)`
/// for a fixed random projection `R`.
pub fn check_layer(node: &LayerNode, input: &Tensor, mode: Mode, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = node.clone();
    let (y, cache) = work.forward(input, mode)?;
    let proj = Tensor::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0));
    let bundle = node.backward(&cache, &proj, &mut Backprop::plain())?;

    let mut scratch = node.clone();
    let mut f_in = |x: &Tensor| {
        let (y, _) = scratch.forward(x, mode).expect("forward succeeded once");
        y.dot(&proj).unwrap()
    };
    let num_in = central_difference(&mut f_in, input, DEFAULT_EPS);
    let input_error = max_relative_error(&bundle.input, &num_in);

    let mut param_errors = Vec::new();
    for (pi, analytic) in bundle.params.iter().enumerate() {
        let mut scratch = node.clone();
        let mut f_p = |p: &Tensor| {
            scratch.params[pi] = p.clone();
            let (y, _) = scratch.forward(input, mode).expect("forward succeeded once");
            y.dot(&proj).unwrap()
        };
        let num = central_difference(&mut f_p, &node.params[pi], DEFAULT_EPS);
        param_errors.push(max_relative_error(analytic, &num));
    }
    Ok(GradCheckReport {
        input_error,
        param_errors,
    })
}

/// A small random instance of every layer kind with a matching input.
pub fn sample_layers(seed: u64) -> Vec<(LayerNode, Tensor, Mode)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = |shape: &[usize], rng: &mut ChaCha8Rng| {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    };
    let mut out = Vec::new();

    let k = LayerKind::conv2d(2, 3, 3, 1 + (seed as usize % 2), 1, 1, true);
    let x = input(&[2, 2, 5, 5], &mut rng);
    out.push((LayerNode::new(k, &mut rng), x, Mode::Train));

    let k = LayerKind::conv2d(4, 4, 3, 2, 1, 2, false);
    let x = input(&[1, 4, 5, 6], &mut rng);
    out.push((LayerNode::new(k, &mut rng), x, Mode::Train));

    let k = LayerKind::conv3d(2, 4, [3, 3, 3], [1, 2, 2], [1, 1, 1], 2, true);
    let x = input(&[1, 2, 3, 4, 4], &mut rng);
    out.push((LayerNode::new(k, &mut rng), x, Mode::Train));

    let k = LayerKind::MaxPool2d {
        window: [2, 2],
        stride: [2, 2],
    };
    let x = input(&[2, 2, 4, 4], &mut rng);
    out.push((LayerNode::new(k, &mut rng), x, Mode::Train));

    let k = LayerKind::MaxPool3d {
        window: [2, 2, 2],
        stride: [2, 2, 2],
    };
    let x = input(&[1, 2, 4, 4, 4], &mut rng);
    out.push((LayerNode::new(k, &mut rng), x, Mode::Train));

    let x = input(&[2, 3, 4, 2, 2], &mut rng);
    out.push((LayerNode::new(LayerKind::TemporalAvgPool, &mut rng), x, Mode::Train));

    for mode in [Mode::Train, Mode::Eval] {
        let k = LayerKind::BatchNorm {
            channels: 3,
            config: Default::default(),
        };
        let mut node = LayerNode::new(k, &mut rng);
        for p in node.params.iter_mut().chain(node.buffers.iter_mut()) {
            for v in p.data_mut() {
                *v = rng.random_range(0.5..1.5);
            }
        }
        let x = input(&[3, 3, 2, 2], &mut rng);
        out.push((node, x, mode));
    }

    // keep rectifier inputs away from the kink at zero
    let away = |shape: &[usize], rng: &mut ChaCha8Rng| {
        Tensor::from_fn(shape, |_| {
            let v: f64 = rng.random_range(0.01..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
    };
    let x = away(&[2, 3, 3, 3], &mut rng);
    out.push((LayerNode::new(LayerKind::Relu, &mut rng), x, Mode::Train));
    let x = away(&[2, 3, 3, 3], &mut rng);
    out.push((
        LayerNode::new(LayerKind::LeakyRelu { slope: 0.1 }, &mut rng),
        x,
        Mode::Train,
    ));

    let k = LayerKind::Linear {
        in_features: 4,
        out_features: 3,
    };
    let x = input(&[2, 4], &mut rng);
    let mut node = LayerNode::new(k, &mut rng);
    for v in node.params[1].data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    out.push((node, x, Mode::Train));
    out
}
