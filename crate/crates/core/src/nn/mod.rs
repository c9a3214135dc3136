//! Minimal neural-network engine: tensors, layer kinds with hand-derived
//! gradients, sequential networks, cross-entropy and momentum SGD.

mod layer;
mod loss;
mod network;
mod optim;
mod params;
mod tensor;

pub use layer::{LayerSpec, Mode, NORM_EPS, NORM_MOMENTUM};
pub use loss::{cross_entropy, softmax, weighted_cross_entropy};
pub use network::{Architecture, Network};
pub use optim::{sgd_step, Sgd};
pub use params::{ModelParams, ParamKey, Role};
pub use tensor::Tensor;
