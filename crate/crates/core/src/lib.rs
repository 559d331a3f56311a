//! Convolutional neural networks built from explicit, per-layer forward and
//! backward passes.
//!
//! The crate covers the whole supervised-regression loop: tensors and shape
//! arithmetic, dense / convolution / ReLU / max-pooling / batch-normalization
//! layers, MSE loss with Kaiming initialization, SGD with momentum and weight
//! decay, mini-batch training, holdout and k-fold evaluation, finite-difference
//! gradient checking, and dataset / checkpoint I/O.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use arch::{ArchSpec, LayerSpec};
pub use data::Dataset;
pub use error::{Error, Result};
pub use layers::{Layer, LayerGrads, Mode};
pub use network::{Gradients, Network};
pub use optim::{OptConfig, Optimizer};
pub use rng::SeededRng;
pub use tensor::{Shape, Tensor};
pub use train::{fit, EpochReport, TrainConfig};
