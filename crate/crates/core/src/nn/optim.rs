//! Momentum SGD.

use super::params::ModelParams;
use crate::error::Result;

/// `v <- momentum * v + g; p <- p - lr * v`, applied to trainable entries
/// only. The velocity buffer starts at zero.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Option<ModelParams>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: None,
        }
    }

    pub fn velocity(&self) -> Option<&ModelParams> {
        self.velocity.as_ref()
    }

    pub fn reset(&mut self) {
        self.velocity = None;
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        params.check_layout(grads)?;
        let velocity = match &mut self.velocity {
            Some(v) => {
                v.check_layout(grads)?;
                v
            }
            slot => slot.insert(grads.zeros_like()),
        };
        for (((key, p), (_, g)), (_, v)) in params.iter_mut().zip(grads.iter()).zip(velocity.iter_mut()) {
            if !key.role.is_trainable() {
                continue;
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// One stateless step from an explicit velocity buffer; returns the updated
/// parameters and velocity.
pub fn sgd_step(
    params: &ModelParams,
    grads: &ModelParams,
    velocity: Option<&ModelParams>,
    lr: f64,
    momentum: f64,
) -> Result<(ModelParams, ModelParams)> {
    let mut opt = Sgd {
        momentum,
        velocity: velocity.cloned(),
    };
    let mut out = params.clone();
    opt.step(&mut out, grads, lr)?;
    Ok((out, opt.velocity.expect("set by step")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::nn::{ParamKey, Role, Tensor};

    fn single(v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert(ParamKey::new(0, Role::Kernel), Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    #[test]
    fn plain_sgd() {
        let (p, _) = sgd_step(&single(1.0), &single(2.0), None, 0.01, 0.0).unwrap();
        assert_eq!(p.flatten(), vec![1.0 - 0.01 * 2.0]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (p, _) = sgd_step(&single(0.7), &single(0.0), None, 0.5, 0.9).unwrap();
        assert_eq!(p.flatten(), vec![0.7]);
    }

    #[test]
    fn two_momentum_steps() {
        // v1 = g, v2 = 0.9 g + g: total change -(1 + 1.9) g at lr 1.
        let g = 0.25;
        let mut opt = Sgd::new(0.9);
        let mut p = single(0.0);
        opt.step(&mut p, &single(g), 1.0).unwrap();
        opt.step(&mut p, &single(g), 1.0).unwrap();
        assert!((p.flatten()[0] + 2.9 * g).abs() < 1e-15);
    }

    #[test]
    fn buffers_are_not_stepped() {
        let mut p = single(1.0);
        p.insert(
            ParamKey::new(0, Role::RunningMean),
            Tensor::new(vec![1], vec![3.0]).unwrap(),
        );
        let mut g = p.zeros_like();
        g.get_mut(&ParamKey::new(0, Role::RunningMean)).unwrap().data_mut()[0] = 1.0;
        let mut opt = Sgd::new(0.0);
        opt.step(&mut p, &g, 1.0).unwrap();
        assert_eq!(p.get(&ParamKey::new(0, Role::RunningMean)).unwrap().data(), &[3.0]);
    }

    #[test]
    fn key_mismatch_is_state_error() {
        let mut p = single(1.0);
        let mut g = single(1.0);
        g.insert(ParamKey::new(1, Role::Bias), Tensor::zeros(&[1]));
        assert!(matches!(Sgd::new(0.0).step(&mut p, &g, 1.0), Err(Error::State(_))));
    }
}
