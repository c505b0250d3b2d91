//! Numeric core: tensors, reverse-mode differentiation, layered networks and
//! the decomposition, hierarchy, transform and training routines built on them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acd;
pub mod awd;
pub mod backend;
pub mod cd;
pub mod cdep;
pub mod error;
pub mod fft;
pub mod network;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod trim;
pub mod wavelet;

pub use acd::{AcdConfig, Adjacency, Hierarchy};
pub use backend::{Backend, Eager};
pub use cd::{CdPair, CdScore, FeatureGroup, Nonlinearity};
pub use error::{Error, Result};
pub use network::{ArchitectureDescriptor, Layer, LayerDescriptor, Mode};
pub use scalar::Scalar;
pub use tape::Var;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tape::Tape<f64>;
pub type Network = network::Network<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Network32 = network::Network<f32>;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
