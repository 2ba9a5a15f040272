//! Structured ADMM compression of small CNNs for memristor crossbar
//! accelerators: training, pruning, purification, level quantization,
//! crossbar mapping, non-ideal inference simulation and cost estimation.

pub mod admm;
pub mod cost;
pub mod data;
pub mod distill;
pub mod error;
pub mod loss;
pub mod mapper;
pub mod mask;
pub mod network;
pub mod optim;
pub mod purify;
pub mod scalar;
pub mod sim;
pub mod tensor;
pub mod train;

pub use admm::{AdmmConfig, AdmmPhase, AdmmState, QuantScheme, SparsityConstraint};
pub use data::Dataset;
pub use error::{Error, Result};
pub use mask::{Granularity, LayerMask, PruneMask};
pub use network::{Forward, Gradients, Layer, LayerKind, LayerSpec, Network, Shape3};
pub use optim::{OptimizerConfig, OptimizerKind};
pub use scalar::Scalar;
pub use tensor::{Activation, WeightTensor};
