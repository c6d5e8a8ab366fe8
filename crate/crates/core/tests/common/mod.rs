#![allow(dead_code)]

use dpr_core::network::{LayerKind, LayerSpec, Network};
use dpr_core::tensor::{Padding, Tensor};
use dpr_core::Sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense layers of the given widths with a ReLU between consecutive ones.
/// `sizes[0]` is the input width.
pub fn dense_net(sizes: &[usize]) -> Network {
    let mut specs = Vec::new();
    for (i, &units) in sizes[1..].iter().enumerate() {
        if i > 0 {
            specs.push(LayerSpec::Relu {
                name: format!("relu{i}"),
            });
        }
        specs.push(LayerSpec::Dense {
            name: format!("fc{}", i + 1),
            units,
        });
    }
    Network::from_specs(&[sizes[0]], &specs).unwrap()
}

/// conv 3×3×3 → relu → maxpool 2 → flatten → dense 6 → relu → dense `out`.
pub fn conv_net(h: usize, w: usize, c: usize, out: usize) -> Network {
    Network::from_specs(
        &[h, w, c],
        &[
            LayerSpec::Conv2d {
                name: "conv".into(),
                kernel_h: 3,
                kernel_w: 3,
                filters: 3,
                stride: 1,
                padding: Padding::Valid,
            },
            LayerSpec::Relu { name: "relu_c".into() },
            LayerSpec::Maxpool2d {
                name: "pool".into(),
                window: 2,
                stride: 2,
            },
            LayerSpec::Flatten { name: "flat".into() },
            LayerSpec::Dense {
                name: "hidden".into(),
                units: 6,
            },
            LayerSpec::Relu { name: "relu_h".into() },
            LayerSpec::Dense {
                name: "out".into(),
                units: out,
            },
        ],
    )
    .unwrap()
}

/// Every parameter uniform in `[-scale, scale]`.
pub fn randomize(net: &mut Network, rng: &mut ChaCha8Rng, scale: f64) {
    for p in net.parameters_mut() {
        for v in p.data_mut() {
            *v = rng.gen_range(-scale..=scale);
        }
    }
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Inputs uniform in `[-1, 1]` with labels near the net's own predictions
/// (offset uniform in `[-spread, spread]`).
pub fn samples_near(net: &Network, n: usize, spread: f64, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let input = uniform(net.input_shape(), rng, -1.0, 1.0);
            let pred = net.forward(&input).unwrap();
            let label = pred
                .data()
                .iter()
                .map(|p| p + rng.gen_range(-spread..=spread))
                .collect();
            Sample::new(input, label, format!("s{i}"))
        })
        .collect()
}

/// Straight-loop forward pass for dense/relu networks, independent of the
/// library's tensor kernels.
pub fn naive_dense_forward(net: &Network, x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    for layer in net.layers() {
        cur = match &layer.kind {
            LayerKind::Dense { weight, bias } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                (0..out)
                    .map(|o| bias.data()[o] + (0..inp).map(|i| weight.data()[o * inp + i] * cur[i]).sum::<f64>())
                    .collect()
            }
            LayerKind::Relu => cur.iter().map(|v| v.max(0.0)).collect(),
            other => panic!("naive oracle only handles dense/relu, got {other:?}"),
        };
    }
    cur
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub struct FdPoint {
    pub analytic: f64,
    pub numeric: f64,
}

impl FdPoint {
    pub fn rel_err(&self) -> f64 {
        rel_err(self.analytic, self.numeric)
    }
}

/// Central difference of `f` around `x0`, or `None` when halving the step
/// changes the estimate, which signals a kink inside the stencil.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> Option<f64> {
    let d1 = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
    let d2 = (f(x0 + h / 2.0) - f(x0 - h / 2.0)) / h;
    let tol = 1e-6 * d1.abs().max(d2.abs()) + 1e-9;
    ((d1 - d2).abs() <= tol).then_some(d1)
}

/// Compares the gradient of `kind` over `batch` w.r.t. one parameter
/// coordinate with a central difference of step `h`.
pub fn fd_parameter(
    net: &Network,
    batch: &[Sample],
    kind: &dpr_core::LossKind,
    param: usize,
    coord: usize,
    h: f64,
) -> Option<FdPoint> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let (_, grads) = dpr_core::losses::loss_and_gradients(net, &refs, kind).unwrap();
    let analytic = grads[param].data()[coord];
    let x0 = net.parameters()[param].data()[coord];
    let mut probe = net.clone();
    let numeric = central_difference(
        |v| {
            probe.parameters_mut()[param].data_mut()[coord] = v;
            dpr_core::losses::evaluate(&probe, batch, kind).unwrap().value
        },
        x0,
        h,
    )?;
    Some(FdPoint { analytic, numeric })
}
