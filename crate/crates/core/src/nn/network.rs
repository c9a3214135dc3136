//! Sequential networks: architecture description, parameter storage and a
//! single-batch forward tape for reverse-mode gradients.

use super::layer::{self, LayerCache, LayerSpec, Mode, NORM_MOMENTUM};
use super::loss;
use super::params::{ModelParams, ParamKey, Role};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Per-sample input shape plus an ordered list of layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    classes: usize,
}

impl Architecture {
    /// Validates that the layer chain type-checks and ends in a flat vector.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::input(format!("invalid input shape {input_shape:?}")));
        }
        let mut shape = input_shape.clone();
        for l in &layers {
            shape = l.output_shape(&shape)?;
        }
        if shape.len() != 1 {
            return Err(Error::input(format!(
                "network must end in a flat class vector, ends in {shape:?}"
            )));
        }
        Ok(Self {
            input_shape,
            layers,
            classes: shape[0],
        })
    }

    /// `dense -> scale-norm -> relu` per hidden width, then a dense head.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = inputs;
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                inputs: prev,
                outputs: h,
            });
            layers.push(LayerSpec::ScaleNorm { channels: h });
            layers.push(LayerSpec::Relu);
            prev = h;
        }
        layers.push(LayerSpec::Dense {
            inputs: prev,
            outputs: classes,
        });
        Self::new(vec![inputs], layers)
    }

    /// Two 3x3 conv blocks (8 and 16 channels), each followed by scale-norm,
    /// relu and 2x2 max pooling, then one dense head.
    pub fn mini_cnn(in_channels: usize, height: usize, width: usize, classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut ch = in_channels;
        for out in [8, 16] {
            layers.push(LayerSpec::Conv2d {
                in_channels: ch,
                out_channels: out,
                kernel: 3,
                padding: 1,
            });
            layers.push(LayerSpec::ScaleNorm { channels: out });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool { size: 2 });
            ch = out;
        }
        layers.push(LayerSpec::Dense {
            inputs: ch * (height / 4) * (width / 4),
            outputs: classes,
        });
        Self::new(vec![in_channels, height, width], layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Keys and shapes of every parameter tensor, in key order.
    pub fn param_layout(&self) -> Vec<(ParamKey, Vec<usize>)> {
        let mut out: Vec<_> = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.param_shapes()
                    .into_iter()
                    .map(move |(role, shape)| (ParamKey::new(i, role), shape))
            })
            .collect();
        out.sort_by_key(|(k, _)| *k);
        out
    }

    /// Keys with the given role, in layer order.
    pub fn keys_with_role(&self, role: Role) -> Vec<ParamKey> {
        self.param_layout()
            .into_iter()
            .filter(|(k, _)| k.role == role)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn param_len(&self, key: &ParamKey) -> Option<usize> {
        self.param_layout()
            .into_iter()
            .find(|(k, _)| k == key)
            .map(|(_, s)| s.iter().product())
    }

    /// Text form, e.g. `in=20;dense:20:16;scalenorm:16;relu;dense:16:10`.
    pub fn descriptor(&self) -> String {
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        let mut out = format!("in={}", dims.join("x"));
        for l in &self.layers {
            out.push(';');
            out.push_str(&l.token());
        }
        out
    }

    pub fn parse_descriptor(text: &str) -> Result<Self> {
        let mut parts = text.split(';');
        let head = parts.next().unwrap_or("");
        let dims = head
            .strip_prefix("in=")
            .ok_or_else(|| Error::format(format!("descriptor must start with in=: {text:?}")))?;
        let input_shape = dims
            .split('x')
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| Error::format(format!("bad input dims {dims:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let layers = parts.map(LayerSpec::parse_token).collect::<Result<Vec<_>>>()?;
        Self::new(input_shape, layers).map_err(|e| Error::format(e.to_string()))
    }
}

#[derive(Debug, Clone)]
struct Tape {
    batch: usize,
    caches: Vec<LayerCache>,
}

/// An architecture with concrete parameters. Holds the forward tape of the
/// most recent recorded forward pass so that `backward` can run once.
#[derive(Debug, Clone)]
pub struct Network {
    arch: Architecture,
    params: ModelParams,
    tape: Option<Tape>,
}

impl Network {
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = rng::rng_for(seed, &[rng::purpose::INIT]);
        let mut params = ModelParams::new();
        for (i, l) in arch.layers.iter().enumerate() {
            l.init_params(i, &mut rng, &mut params);
        }
        Self {
            arch,
            params,
            tape: None,
        }
    }

    pub fn with_params(arch: Architecture, params: ModelParams) -> Result<Self> {
        let layout = arch.param_layout();
        let matches = layout.len() == params.len()
            && layout
                .iter()
                .zip(params.iter())
                .all(|((k, s), (pk, t))| k == pk && s.as_slice() == t.shape());
        if !matches {
            return Err(Error::key(format!(
                "parameters do not match architecture {}",
                arch.descriptor()
            )));
        }
        Ok(Self {
            arch,
            params,
            tape: None,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Replacing parameters drops any recorded tape.
    pub fn set_params(&mut self, params: ModelParams) -> Result<()> {
        self.params.check_layout(&params)?;
        self.params = params;
        self.tape = None;
        Ok(())
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        self.tape = None;
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != self.arch.input_shape.len() + 1
            || batch.shape()[1..] != self.arch.input_shape[..]
            || batch.rows() == 0
        {
            return Err(Error::input(format!(
                "batch shape {:?} does not match input shape {:?}",
                batch.shape(),
                self.arch.input_shape
            )));
        }
        Ok(())
    }

    fn run(&self, batch: &Tensor, mode: Mode) -> Result<(Tensor, Vec<LayerCache>, Vec<Option<layer::BatchStats>>)> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        let mut caches = Vec::with_capacity(self.arch.layers.len());
        let mut stats = Vec::with_capacity(self.arch.layers.len());
        for (i, l) in self.arch.layers.iter().enumerate() {
            let (y, cache, s) = layer::forward(l, i, &self.params, x, mode)?;
            x = y;
            caches.push(cache);
            stats.push(s);
        }
        Ok((x, caches, stats))
    }

    /// Forward pass that records a tape for [`backward`](Self::backward).
    /// In training mode normalization running statistics are updated.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let (out, caches, stats) = self.run(batch, mode)?;
        for (i, s) in stats.into_iter().enumerate() {
            if let Some((mean, var)) = s {
                self.update_running(i, &mean, &var);
            }
        }
        self.tape = Some(Tape {
            batch: batch.rows(),
            caches,
        });
        Ok(out)
    }

    fn update_running(&mut self, layer: usize, mean: &[f64], var: &[f64]) {
        let blend = |t: &mut Tensor, obs: &[f64]| {
            for (r, o) in t.data_mut().iter_mut().zip(obs) {
                *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * o;
            }
        };
        if let Some(t) = self.params.get_mut(&ParamKey::new(layer, Role::RunningMean)) {
            blend(t, mean);
        }
        if let Some(t) = self.params.get_mut(&ParamKey::new(layer, Role::RunningVar)) {
            blend(t, var);
        }
    }

    /// Evaluation-mode logits; does not touch the tape or running statistics.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.run(batch, Mode::Eval)?.0)
    }

    /// Class probabilities in evaluation mode.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(loss::softmax(&self.predict(batch)?))
    }

    pub fn classify(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict(batch)?.argmax_rows())
    }

    /// Consumes the tape; returns `dL/dp` for every parameter (zeros for
    /// running-statistics buffers).
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<ModelParams> {
        Ok(self.backward_with_input(grad_logits)?.0)
    }

    /// Like [`backward`](Self::backward) but also returns `dL/d(input)`.
    pub fn backward_with_input(&mut self, grad_logits: &Tensor) -> Result<(ModelParams, Tensor)> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::state("backward called without a recorded forward pass"))?;
        if grad_logits.shape() != [tape.batch, self.arch.classes] {
            return Err(Error::state(format!(
                "upstream gradient {:?} does not match recorded forward batch [{}, {}]",
                grad_logits.shape(),
                tape.batch,
                self.arch.classes
            )));
        }
        let mut grads = self.params.zeros_like();
        let mut g = grad_logits.clone();
        for (i, (l, cache)) in self.arch.layers.iter().zip(tape.caches.iter()).enumerate().rev() {
            g = layer::backward(l, i, &self.params, cache, &g, &mut grads)?;
        }
        Ok((grads, g))
    }

    /// Fraction of rows whose argmax equals the label.
    pub fn accuracy(&self, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::input("accuracy over an empty set"));
        }
        let pred = self.classify(inputs)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_net(inputs: usize, outputs: usize) -> Network {
        let arch = Architecture::new(vec![inputs], vec![LayerSpec::Dense { inputs, outputs }]).unwrap();
        Network::new(arch, 1)
    }

    #[test]
    fn zero_weight_dense_gives_zero_logits() {
        let mut net = dense_net(3, 4);
        let zeros = net.params().zeros_like();
        net.set_params(zeros).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 9.0]).unwrap();
        let y = net.predict(&x).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_dense_maps_basis_vector() {
        let mut net = dense_net(3, 3);
        let mut p = net.params().zeros_like();
        let k = p.get_mut(&ParamKey::new(0, Role::Kernel)).unwrap();
        for i in 0..3 {
            k.data_mut()[i * 3 + i] = 1.0;
        }
        net.set_params(p).unwrap();
        let x = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(net.predict(&x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn unit_scale_norm_is_identity_on_standardized_input() {
        // gamma = 1, bias = 0, running stats (0, 1): eval output = x / sqrt(1 + eps).
        let arch = Architecture::new(vec![2], vec![LayerSpec::ScaleNorm { channels: 2 }]).unwrap();
        let net = Network::new(arch, 3);
        let x = Tensor::new(vec![2, 2], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let y = net.predict(&x).unwrap();
        let s = (1.0 + layer::NORM_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / s).abs() < 1e-15);
        }
    }

    #[test]
    fn train_mode_scale_norm_standardizes() {
        let arch = Architecture::new(vec![1], vec![LayerSpec::ScaleNorm { channels: 1 }]).unwrap();
        let mut net = Network::new(arch, 3);
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = net.forward(&x, Mode::Train).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / (1.25 + layer::NORM_EPS)).abs() < 1e-9);
        // Running mean moved toward the batch mean of 2.5.
        let rm = net.params().get(&ParamKey::new(0, Role::RunningMean)).unwrap();
        assert!((rm.data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = dense_net(2, 2);
        let g = Tensor::zeros(&[1, 2]);
        assert!(matches!(net.backward(&g), Err(Error::State(_))));
        let x = Tensor::zeros(&[3, 2]);
        net.forward(&x, Mode::Train).unwrap();
        // Wrong batch size.
        assert!(matches!(net.backward(&g), Err(Error::State(_))));
        // The tape is consumed even on failure; a second call is a state error too.
        assert!(matches!(net.backward(&Tensor::zeros(&[3, 2])), Err(Error::State(_))));
    }

    #[test]
    fn sum_of_logits_gradient_is_summed_input() {
        let mut net = dense_net(3, 2);
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        net.forward(&x, Mode::Train).unwrap();
        let grads = net.backward(&Tensor::filled(&[2, 2], 1.0)).unwrap();
        let gw = grads.get(&ParamKey::new(0, Role::Kernel)).unwrap();
        // d(sum logits)/dW[o, i] = sum_b x[b, i] for every output o.
        assert_eq!(gw.data(), &[0.0, 2.5, 7.0, 0.0, 2.5, 7.0]);
        let gb = grads.get(&ParamKey::new(0, Role::Bias)).unwrap();
        assert_eq!(gb.data(), &[2.0, 2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let arch = Architecture::mini_cnn(1, 8, 8, 4).unwrap();
        let mut net = Network::new(arch, 5);
        let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        net.forward(&x, Mode::Train).unwrap();
        let grads = net.backward(&Tensor::zeros(&[2, 4])).unwrap();
        assert!(grads.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn input_shape_is_checked() {
        let net = Network::new(Architecture::mlp(4, &[3], 2).unwrap(), 0);
        assert!(matches!(net.predict(&Tensor::zeros(&[2, 5])), Err(Error::Input(_))));
        assert_eq!(net.predict(&Tensor::zeros(&[2, 4])).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn descriptor_roundtrip() {
        for arch in [
            Architecture::mlp(20, &[16, 16], 10).unwrap(),
            Architecture::mini_cnn(1, 8, 8, 10).unwrap(),
        ] {
            let d = arch.descriptor();
            assert_eq!(Architecture::parse_descriptor(&d).unwrap(), arch);
        }
        assert!(Architecture::parse_descriptor("in=4;dense:5:2").is_err());
        assert!(Architecture::parse_descriptor("dense:4:2").is_err());
    }

    #[test]
    fn with_params_rejects_foreign_layout() {
        let a = Architecture::mlp(4, &[3], 2).unwrap();
        let b = Architecture::mlp(4, &[5], 2).unwrap();
        let p = Network::new(b, 0).into_params();
        assert!(matches!(Network::with_params(a, p), Err(Error::Key(_))));
    }
}
