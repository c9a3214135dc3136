//! Finite-difference harness for layers and regularizers.

use super::*;
use fedmark::nn::{Architecture, LayerSpec, Mode, ModelParams, Network, Role, Tensor};
use fedmark::watermark::{extract, keygen, regularizer, EmbedMode, KeygenSpec, RegLoss};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 10;
pub const COORDS: usize = 24;
/// Hinge kinks sit at `t_j b_j = mu`; instances with a bit this close to a
/// kink are redrawn so the central difference does not straddle one.
pub const KINK_CLEARANCE: f64 = 1e-3;

pub fn cases() -> Vec<(&'static str, Architecture, Mode)> {
    use LayerSpec::*;
    vec![
        (
            "dense",
            Architecture::new(vec![5], vec![Dense { inputs: 5, outputs: 4 }]).unwrap(),
            Mode::Train,
        ),
        (
            "conv2d",
            Architecture::new(
                vec![2, 5, 5],
                vec![
                    Conv2d {
                        in_channels: 2,
                        out_channels: 3,
                        kernel: 3,
                        padding: 1,
                    },
                    Dense { inputs: 75, outputs: 4 },
                ],
            )
            .unwrap(),
            Mode::Train,
        ),
        (
            "conv2d-valid",
            Architecture::new(
                vec![1, 6, 6],
                vec![
                    Conv2d {
                        in_channels: 1,
                        out_channels: 2,
                        kernel: 3,
                        padding: 0,
                    },
                    Dense { inputs: 32, outputs: 3 },
                ],
            )
            .unwrap(),
            Mode::Train,
        ),
        (
            "scalenorm-train",
            Architecture::new(
                vec![6],
                vec![ScaleNorm { channels: 6 }, Dense { inputs: 6, outputs: 4 }],
            )
            .unwrap(),
            Mode::Train,
        ),
        (
            "scalenorm-eval",
            Architecture::new(
                vec![6],
                vec![ScaleNorm { channels: 6 }, Dense { inputs: 6, outputs: 4 }],
            )
            .unwrap(),
            Mode::Eval,
        ),
        (
            "scalenorm-image-train",
            Architecture::new(
                vec![2, 3, 3],
                vec![ScaleNorm { channels: 2 }, Dense { inputs: 18, outputs: 3 }],
            )
            .unwrap(),
            Mode::Train,
        ),
        (
            "relu",
            Architecture::new(
                vec![5],
                vec![Dense { inputs: 5, outputs: 6 }, Relu, Dense { inputs: 6, outputs: 3 }],
            )
            .unwrap(),
            Mode::Train,
        ),
        (
            "maxpool",
            Architecture::new(
                vec![1, 4, 4],
                vec![
                    Conv2d {
                        in_channels: 1,
                        out_channels: 2,
                        kernel: 3,
                        padding: 1,
                    },
                    MaxPool { size: 2 },
                    Dense { inputs: 8, outputs: 3 },
                ],
            )
            .unwrap(),
            Mode::Train,
        ),
        (
            "softmax",
            Architecture::new(vec![5], vec![Dense { inputs: 5, outputs: 4 }, Softmax]).unwrap(),
            Mode::Train,
        ),
        ("mlp", Architecture::mlp(6, &[5, 4], 3).unwrap(), Mode::Train),
        ("mini-cnn", Architecture::mini_cnn(1, 8, 8, 4).unwrap(), Mode::Train),
    ]
}

pub fn randomize(params: &ModelParams, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut out = params.clone();
    for (key, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v = match key.role {
                Role::RunningVar => rng.random_range(0.5..2.0),
                _ => rng.random_range(-1.0..1.0),
            };
        }
    }
    out
}

pub fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Loss = sum of coefficient-weighted outputs, so dL/dout = coef.
pub fn linear_loss(out: &Tensor, coef: &Tensor) -> f64 {
    out.data().iter().zip(coef.data()).map(|(a, b)| a * b).sum()
}

/// Worst relative errors `(params, inputs)` of one layer case over all
/// instances.
pub fn layer_case_worst(name: &str, arch: &Architecture, mode: Mode) -> (f64, f64) {
    let (mut wp, mut wi) = (0.0f64, 0.0f64);
    for instance in 0..INSTANCES {
        let mut rng = rng(1000 * instance + name.len() as u64);
        let base = Network::new(arch.clone(), instance);
        let params = randomize(base.params(), &mut rng);
        let mut shape = vec![4];
        shape.extend_from_slice(arch.input_shape());
        let x = gaussian(&shape, &mut rng);
        let coef = gaussian(&[4, arch.classes()], &mut rng);

        let mut net = Network::with_params(arch.clone(), params.clone()).unwrap();
        net.forward(&x, mode).unwrap();
        let (grads, gx) = net.backward_with_input(&coef).unwrap();

        let eval = |p: &ModelParams, input: &Tensor| -> f64 {
            let mut n = Network::with_params(arch.clone(), p.clone()).unwrap();
            linear_loss(&n.forward(input, mode).unwrap(), &coef)
        };

        // Parameter gradients, trainable entries only.
        let flat = params.flatten();
        let analytic = grads.flatten();
        let mut trainable = Vec::new();
        let mut offset = 0;
        for (key, t) in params.iter() {
            if key.role.is_trainable() {
                trainable.extend(offset..offset + t.len());
            }
            offset += t.len();
        }
        let coords = probe_coords(&trainable, COORDS, &mut rng);
        let mut f = |v: &[f64]| eval(&params.unflatten(v).unwrap(), &x);
        wp = wp.max(fd_worst(&mut f, &flat, &analytic, &coords));

        let pool: Vec<usize> = (0..x.len()).collect();
        let coords = probe_coords(&pool, COORDS, &mut rng);
        let mut g = |v: &[f64]| eval(&params, &Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap());
        wi = wi.max(fd_worst(&mut g, x.data(), gx.data(), &coords));
    }
    (wp, wi)
}

/// Worst relative error of a regularizer gradient over all instances;
/// also checks the gradient vanishes off the selected parameters.
pub fn regularizer_worst(mode: EmbedMode, loss: RegLoss) -> f64 {
    let arch = Architecture::mlp(6, &[8, 8], 3).unwrap();
    let spec = KeygenSpec::new(6, mode, loss);
    let mut worst = 0.0f64;
    for instance in 0..INSTANCES {
        let mut rng = rng(77 + instance);
        let key = keygen(&arch, instance as usize, &spec, instance).unwrap();
        let base = Network::new(arch.clone(), instance);
        let params = loop {
            let p = randomize(base.params(), &mut rng);
            let b = extract(&p, &key.extraction).unwrap();
            let clear = b
                .iter()
                .zip(key.bits.signs())
                .all(|(bj, t)| (key.margin - f64::from(*t) * bj).abs() > KINK_CLEARANCE);
            if clear {
                break p;
            }
        };
        let (_, grads) = regularizer(&params, &key).unwrap();
        let mut selected = Vec::new();
        let mut offset = 0;
        for (k, t) in params.iter() {
            if key.extraction.selector.contains(k) {
                selected.extend(offset..offset + t.len());
            }
            offset += t.len();
        }
        let coords = probe_coords(&selected, COORDS, &mut rng);
        let mut f = |v: &[f64]| regularizer(&params.unflatten(v).unwrap(), &key).unwrap().0;
        worst = worst.max(fd_worst(&mut f, &params.flatten(), &grads.flatten(), &coords));
        let flat = grads.flatten();
        assert!((0..flat.len())
            .filter(|i| !selected.contains(i))
            .all(|i| flat[i] == 0.0));
    }
    worst
}
