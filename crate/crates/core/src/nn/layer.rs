//! Layer kinds with hand-derived forward and backward passes.
//!
//! Inputs are batched: the leading dimension is the batch. Convolution,
//! pooling and image-shaped normalization use NCHW layout. A dense layer
//! flattens everything after the batch dimension.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ModelParams, ParamKey, Role};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Training uses batch statistics in normalization layers; evaluation uses
/// the running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Stride-1 square convolution with symmetric zero padding.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    /// Per-channel affine `gamma * standardize(x) + bias`.
    ScaleNorm {
        channels: usize,
    },
    Relu,
    /// Non-overlapping max pooling (stride = size).
    MaxPool {
        size: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::ScaleNorm { .. } => "scalenorm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Parameter tensors this layer owns.
    pub fn param_shapes(&self) -> Vec<(Role, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                vec![(Role::Kernel, vec![outputs, inputs]), (Role::Bias, vec![outputs])]
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                (Role::Kernel, vec![out_channels, in_channels, kernel, kernel]),
                (Role::Bias, vec![out_channels]),
            ],
            LayerSpec::ScaleNorm { channels } => vec![
                (Role::Scale, vec![channels]),
                (Role::Bias, vec![channels]),
                (Role::RunningMean, vec![channels]),
                (Role::RunningVar, vec![channels]),
            ],
            LayerSpec::Relu | LayerSpec::MaxPool { .. } | LayerSpec::Softmax => vec![],
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let n: usize = input.iter().product();
                if n != inputs {
                    return Err(Error::input(format!(
                        "dense layer expects {inputs} inputs, got shape {input:?}"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(Error::input(format!(
                        "conv2d expects [{in_channels}, H, W], got {input:?}"
                    )));
                }
                let h = (input[1] + 2 * padding)
                    .checked_sub(kernel)
                    .ok_or_else(|| Error::input("conv kernel larger than padded input"))?
                    + 1;
                let w = (input[2] + 2 * padding)
                    .checked_sub(kernel)
                    .ok_or_else(|| Error::input("conv kernel larger than padded input"))?
                    + 1;
                Ok(vec![out_channels, h, w])
            }
            LayerSpec::ScaleNorm { channels } => {
                if input.is_empty() || input[0] != channels {
                    return Err(Error::input(format!(
                        "scale-norm expects {channels} channels, got {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { size } => {
                if input.len() != 3 || size == 0 || input[1] < size || input[2] < size {
                    return Err(Error::input(format!("maxpool {size} cannot apply to {input:?}")));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(Error::input("softmax expects flat per-sample input"));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Fresh parameters: He-uniform kernels, zero biases, unit scales.
    pub fn init_params(&self, layer: usize, rng: &mut ChaCha8Rng, out: &mut ModelParams) {
        let fan_in = match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            _ => 1,
        };
        for (role, shape) in self.param_shapes() {
            let t = match role {
                Role::Kernel => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("shape matches")
                }
                Role::Scale | Role::RunningVar => Tensor::filled(&shape, 1.0),
                Role::Bias | Role::RunningMean => Tensor::zeros(&shape),
            };
            out.insert(ParamKey::new(layer, role), t);
        }
    }

    /// Compact textual form used in architecture descriptors.
    pub fn token(&self) -> String {
        match *self {
            LayerSpec::Dense { inputs, outputs } => format!("dense:{inputs}:{outputs}"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => format!("conv2d:{in_channels}:{out_channels}:{kernel}:{padding}"),
            LayerSpec::ScaleNorm { channels } => format!("scalenorm:{channels}"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::MaxPool { size } => format!("maxpool:{size}"),
            LayerSpec::Softmax => "softmax".into(),
        }
    }

    pub fn parse_token(token: &str) -> Result<LayerSpec> {
        let mut parts = token.split(':');
        let kind = parts.next().unwrap_or("");
        let nums: Vec<usize> = parts
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::format(format!("bad layer token {token:?}")))
            })
            .collect::<Result<_>>()?;
        let want = |n: usize| -> Result<()> {
            if nums.len() == n {
                Ok(())
            } else {
                Err(Error::format(format!("bad layer token {token:?}")))
            }
        };
        Ok(match kind {
            "dense" => {
                want(2)?;
                LayerSpec::Dense {
                    inputs: nums[0],
                    outputs: nums[1],
                }
            }
            "conv2d" => {
                want(4)?;
                LayerSpec::Conv2d {
                    in_channels: nums[0],
                    out_channels: nums[1],
                    kernel: nums[2],
                    padding: nums[3],
                }
            }
            "scalenorm" => {
                want(1)?;
                LayerSpec::ScaleNorm { channels: nums[0] }
            }
            "relu" => {
                want(0)?;
                LayerSpec::Relu
            }
            "maxpool" => {
                want(1)?;
                LayerSpec::MaxPool { size: nums[0] }
            }
            "softmax" => {
                want(0)?;
                LayerSpec::Softmax
            }
            _ => return Err(Error::format(format!("unknown layer kind {kind:?}"))),
        })
    }
}

/// Whatever a layer needs from its forward pass to run backward.
#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    Dense {
        input: Tensor,
    },
    Conv {
        input: Tensor,
    },
    Norm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: Mode,
    },
    Relu {
        input: Tensor,
    },
    MaxPool {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    Softmax {
        output: Tensor,
    },
}

fn param(params: &ModelParams, layer: usize, role: Role) -> Result<&Tensor> {
    params
        .get(&ParamKey::new(layer, role))
        .ok_or_else(|| Error::state(format!("layer {layer} is missing its {} tensor", role.name())))
}

/// Channel count and per-channel spatial size of a normalization input.
fn norm_layout(x: &Tensor, channels: usize) -> Result<(usize, usize)> {
    let shape = x.shape();
    if shape.len() < 2 || shape[1] != channels {
        return Err(Error::input(format!(
            "scale-norm expects [B, {channels}, ...], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[2..].iter().product()))
}

/// Batch statistics observed by a normalization layer in training mode:
/// per-channel mean and unbiased variance.
pub(crate) type BatchStats = (Vec<f64>, Vec<f64>);

pub(crate) fn forward(
    spec: &LayerSpec,
    layer: usize,
    params: &ModelParams,
    x: Tensor,
    mode: Mode,
) -> Result<(Tensor, LayerCache, Option<BatchStats>)> {
    match *spec {
        LayerSpec::Dense { inputs, outputs } => {
            let b = x.rows();
            if x.row_len() != inputs {
                return Err(Error::input(format!(
                    "dense layer {layer} expects {inputs} features, got {}",
                    x.row_len()
                )));
            }
            let w = param(params, layer, Role::Kernel)?.data();
            let bias = param(params, layer, Role::Bias)?.data();
            let xd = x.data();
            let mut out = vec![0.0; b * outputs];
            for i in 0..b {
                let xr = &xd[i * inputs..(i + 1) * inputs];
                let orow = &mut out[i * outputs..(i + 1) * outputs];
                for (o, slot) in orow.iter_mut().enumerate() {
                    let wr = &w[o * inputs..(o + 1) * inputs];
                    *slot = bias[o] + wr.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
                }
            }
            let y = Tensor::new(vec![b, outputs], out)?;
            Ok((y, LayerCache::Dense { input: x }, None))
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            padding,
        } => {
            let shape = x.shape().to_vec();
            if shape.len() != 4 || shape[1] != in_channels {
                return Err(Error::input(format!(
                    "conv2d layer {layer} expects [B, {in_channels}, H, W], got {shape:?}"
                )));
            }
            let (b, h, w) = (shape[0], shape[2], shape[3]);
            let out_shape = spec.output_shape(&shape[1..])?;
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let k = param(params, layer, Role::Kernel)?.data();
            let bias = param(params, layer, Role::Bias)?.data();
            let xd = x.data();
            let mut out = vec![0.0; b * out_channels * oh * ow];
            let p = padding as isize;
            for n in 0..b {
                for oc in 0..out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias[oc];
                            for ic in 0..in_channels {
                                for ky in 0..kernel {
                                    let iy = oy as isize + ky as isize - p;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kernel {
                                        let ix = ox as isize + kx as isize - p;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xv = xd[((n * in_channels + ic) * h + iy as usize) * w + ix as usize];
                                        let kv = k[((oc * in_channels + ic) * kernel + ky) * kernel + kx];
                                        acc += xv * kv;
                                    }
                                }
                            }
                            out[((n * out_channels + oc) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
            let y = Tensor::new(vec![b, out_channels, oh, ow], out)?;
            Ok((y, LayerCache::Conv { input: x }, None))
        }
        LayerSpec::ScaleNorm { channels } => {
            let (b, s) = norm_layout(&x, channels)?;
            let count = b * s;
            if count == 0 {
                return Err(Error::input("scale-norm on an empty batch"));
            }
            let mut stats = None;
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut mean = vec![0.0; channels];
                    let mut var = vec![0.0; channels];
                    let xd = x.data();
                    for c in 0..channels {
                        let mut sum = 0.0;
                        for n in 0..b {
                            let base = (n * channels + c) * s;
                            sum += xd[base..base + s].iter().sum::<f64>();
                        }
                        let m = sum / count as f64;
                        let mut sq = 0.0;
                        for n in 0..b {
                            let base = (n * channels + c) * s;
                            sq += xd[base..base + s].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                        }
                        mean[c] = m;
                        var[c] = sq / count as f64;
                    }
                    let unbias = if count > 1 {
                        count as f64 / (count - 1) as f64
                    } else {
                        1.0
                    };
                    stats = Some((mean.clone(), var.iter().map(|v| v * unbias).collect()));
                    (mean, var)
                }
                Mode::Eval => (
                    param(params, layer, Role::RunningMean)?.data().to_vec(),
                    param(params, layer, Role::RunningVar)?.data().to_vec(),
                ),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            let gamma = param(params, layer, Role::Scale)?.data();
            let beta = param(params, layer, Role::Bias)?.data();
            let shape = x.shape().to_vec();
            let mut xhat = x.into_data();
            let mut out = vec![0.0; xhat.len()];
            for n in 0..b {
                for c in 0..channels {
                    let base = (n * channels + c) * s;
                    for i in base..base + s {
                        let h = (xhat[i] - mean[c]) * inv_std[c];
                        xhat[i] = h;
                        out[i] = gamma[c] * h + beta[c];
                    }
                }
            }
            let y = Tensor::new(shape, out)?;
            Ok((y, LayerCache::Norm { xhat, inv_std, mode }, stats))
        }
        LayerSpec::Relu => {
            let mut y = x.clone();
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            Ok((y, LayerCache::Relu { input: x }, None))
        }
        LayerSpec::MaxPool { size } => {
            let shape = x.shape().to_vec();
            if shape.len() != 4 {
                return Err(Error::input(format!(
                    "maxpool layer {layer} expects [B, C, H, W], got {shape:?}"
                )));
            }
            let out_shape = spec.output_shape(&shape[1..])?;
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let xd = x.data();
            let mut out = Vec::with_capacity(b * c * oh * ow);
            let mut argmax = Vec::with_capacity(b * c * oh * ow);
            for n in 0..b {
                for ch in 0..c {
                    let plane = (n * c + ch) * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = plane + oy * size * w + ox * size;
                            for dy in 0..size {
                                for dx in 0..size {
                                    let idx = plane + (oy * size + dy) * w + ox * size + dx;
                                    if xd[idx] > xd[best] {
                                        best = idx;
                                    }
                                }
                            }
                            out.push(xd[best]);
                            argmax.push(best);
                        }
                    }
                }
            }
            let y = Tensor::new(vec![b, c, oh, ow], out)?;
            Ok((
                y,
                LayerCache::MaxPool {
                    argmax,
                    input_shape: shape,
                },
                None,
            ))
        }
        LayerSpec::Softmax => {
            if x.shape().len() != 2 {
                return Err(Error::input("softmax expects [B, C] input"));
            }
            let y = super::loss::softmax(&x);
            Ok((y.clone(), LayerCache::Softmax { output: y }, None))
        }
    }
}

/// Returns the gradient with respect to the layer input and accumulates
/// parameter gradients into `grads`.
pub(crate) fn backward(
    spec: &LayerSpec,
    layer: usize,
    params: &ModelParams,
    cache: &LayerCache,
    grad_out: &Tensor,
    grads: &mut ModelParams,
) -> Result<Tensor> {
    match (spec, cache) {
        (&LayerSpec::Dense { inputs, outputs }, LayerCache::Dense { input }) => {
            let b = input.rows();
            if grad_out.shape() != [b, outputs] {
                return Err(Error::state(format!(
                    "dense layer {layer}: upstream gradient shape {:?} does not match forward",
                    grad_out.shape()
                )));
            }
            let w = param(params, layer, Role::Kernel)?.data();
            let g = grad_out.data();
            let xd = input.data();
            let mut dx = vec![0.0; b * inputs];
            {
                let dw = grads
                    .get_mut(&ParamKey::new(layer, Role::Kernel))
                    .ok_or_else(|| Error::state("missing kernel gradient slot"))?
                    .data_mut();
                for i in 0..b {
                    let xr = &xd[i * inputs..(i + 1) * inputs];
                    for o in 0..outputs {
                        let go = g[i * outputs + o];
                        if go == 0.0 {
                            continue;
                        }
                        let dwr = &mut dw[o * inputs..(o + 1) * inputs];
                        for (d, xv) in dwr.iter_mut().zip(xr) {
                            *d += go * xv;
                        }
                        let wr = &w[o * inputs..(o + 1) * inputs];
                        let dxr = &mut dx[i * inputs..(i + 1) * inputs];
                        for (d, wv) in dxr.iter_mut().zip(wr) {
                            *d += go * wv;
                        }
                    }
                }
            }
            let db = grads
                .get_mut(&ParamKey::new(layer, Role::Bias))
                .ok_or_else(|| Error::state("missing bias gradient slot"))?
                .data_mut();
            for i in 0..b {
                for o in 0..outputs {
                    db[o] += g[i * outputs + o];
                }
            }
            Tensor::new(input.shape().to_vec(), dx)
        }
        (
            &LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            },
            LayerCache::Conv { input },
        ) => {
            let shape = input.shape();
            let (b, h, w) = (shape[0], shape[2], shape[3]);
            let out_shape = spec.output_shape(&shape[1..])?;
            let (oh, ow) = (out_shape[1], out_shape[2]);
            if grad_out.shape() != [b, out_channels, oh, ow] {
                return Err(Error::state(format!(
                    "conv layer {layer}: upstream gradient shape {:?} does not match forward",
                    grad_out.shape()
                )));
            }
            let k = param(params, layer, Role::Kernel)?.data();
            let g = grad_out.data();
            let xd = input.data();
            let mut dx = vec![0.0; xd.len()];
            let mut dk = vec![0.0; k.len()];
            let mut db = vec![0.0; out_channels];
            let p = padding as isize;
            for n in 0..b {
                for oc in 0..out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[((n * out_channels + oc) * oh + oy) * ow + ox];
                            db[oc] += go;
                            if go == 0.0 {
                                continue;
                            }
                            for ic in 0..in_channels {
                                for ky in 0..kernel {
                                    let iy = oy as isize + ky as isize - p;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kernel {
                                        let ix = ox as isize + kx as isize - p;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = ((n * in_channels + ic) * h + iy as usize) * w + ix as usize;
                                        let ki = ((oc * in_channels + ic) * kernel + ky) * kernel + kx;
                                        dk[ki] += go * xd[xi];
                                        dx[xi] += go * k[ki];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            accumulate(grads, ParamKey::new(layer, Role::Kernel), &dk)?;
            accumulate(grads, ParamKey::new(layer, Role::Bias), &db)?;
            Tensor::new(shape.to_vec(), dx)
        }
        (&LayerSpec::ScaleNorm { channels }, LayerCache::Norm { xhat, inv_std, mode }) => {
            if grad_out.len() != xhat.len() {
                return Err(Error::state(format!(
                    "scale-norm layer {layer}: upstream gradient does not match forward"
                )));
            }
            let (b, s) = norm_layout(grad_out, channels)?;
            let count = (b * s) as f64;
            let gamma = param(params, layer, Role::Scale)?.data();
            let g = grad_out.data();
            let mut dgamma = vec![0.0; channels];
            let mut dbeta = vec![0.0; channels];
            for n in 0..b {
                for c in 0..channels {
                    let base = (n * channels + c) * s;
                    for i in base..base + s {
                        dgamma[c] += g[i] * xhat[i];
                        dbeta[c] += g[i];
                    }
                }
            }
            let mut dx = vec![0.0; g.len()];
            match mode {
                Mode::Eval => {
                    for n in 0..b {
                        for c in 0..channels {
                            let base = (n * channels + c) * s;
                            for i in base..base + s {
                                dx[i] = g[i] * gamma[c] * inv_std[c];
                            }
                        }
                    }
                }
                Mode::Train => {
                    // dxhat = g * gamma; sums over the channel reuse dbeta/dgamma.
                    for n in 0..b {
                        for c in 0..channels {
                            let base = (n * channels + c) * s;
                            let sum_dxhat = gamma[c] * dbeta[c];
                            let sum_dxhat_xhat = gamma[c] * dgamma[c];
                            for i in base..base + s {
                                let dxhat = g[i] * gamma[c];
                                dx[i] = inv_std[c] / count * (count * dxhat - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                            }
                        }
                    }
                }
            }
            accumulate(grads, ParamKey::new(layer, Role::Scale), &dgamma)?;
            accumulate(grads, ParamKey::new(layer, Role::Bias), &dbeta)?;
            Tensor::new(grad_out.shape().to_vec(), dx)
        }
        (LayerSpec::Relu, LayerCache::Relu { input }) => {
            if !grad_out.same_shape(input) {
                return Err(Error::state(format!(
                    "relu layer {layer}: upstream gradient does not match forward"
                )));
            }
            let dx = grad_out
                .data()
                .iter()
                .zip(input.data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            Tensor::new(input.shape().to_vec(), dx)
        }
        (LayerSpec::MaxPool { .. }, LayerCache::MaxPool { argmax, input_shape }) => {
            if grad_out.len() != argmax.len() {
                return Err(Error::state(format!(
                    "maxpool layer {layer}: upstream gradient does not match forward"
                )));
            }
            let n: usize = input_shape.iter().product();
            let mut dx = vec![0.0; n];
            for (g, &idx) in grad_out.data().iter().zip(argmax) {
                dx[idx] += g;
            }
            Tensor::new(input_shape.clone(), dx)
        }
        (LayerSpec::Softmax, LayerCache::Softmax { output }) => {
            if !grad_out.same_shape(output) {
                return Err(Error::state(format!(
                    "softmax layer {layer}: upstream gradient does not match forward"
                )));
            }
            let c = output.row_len();
            let mut dx = vec![0.0; output.len()];
            for i in 0..output.rows() {
                let y = output.row(i);
                let g = grad_out.row(i);
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dx[i * c + j] = y[j] * (g[j] - dot);
                }
            }
            Tensor::new(output.shape().to_vec(), dx)
        }
        _ => Err(Error::state(format!(
            "layer {layer}: cached forward state does not belong to a {} layer",
            spec.kind_name()
        ))),
    }
}

fn accumulate(grads: &mut ModelParams, key: ParamKey, values: &[f64]) -> Result<()> {
    let slot = grads
        .get_mut(&key)
        .ok_or_else(|| Error::state(format!("missing gradient slot {key}")))?;
    for (d, v) in slot.data_mut().iter_mut().zip(values) {
        *d += v;
    }
    Ok(())
}
