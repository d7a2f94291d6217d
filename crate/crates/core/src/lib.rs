pub mod conv;
pub mod data;
pub mod error;
pub mod fusion;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod network;
pub mod params;
pub mod tensor;
pub mod train;

pub use conv::ConvSpec;
pub use error::{Error, Result};
pub use graph::{BnMode, Gradients, Graph, RunningMoments, Var};
pub use network::{build_dilation_net, NetStructure, Variant};
pub use params::{BnStore, ParamStore};
pub use tensor::Tensor;
