//! Graph compiler and inference runtime for networks that blend binary
//! convolutions (main paths) with fixed-point convolutions (skip paths).
//!
//! The crate builds seeded model graphs, rewrites them with
//! normalization-folding passes, packs binary tensors for XNOR-popcount
//! execution, and checks everything against a float64 reference
//! interpreter.

// numeric kernels read clearest as index loops
#![allow(clippy::needless_range_loop)]

pub mod builders;
pub mod costmodel;
pub mod error;
pub mod fixed;
pub mod init;
pub mod ir;
pub mod mixer;
pub mod modelio;
pub mod oracle;
pub mod packing;
pub mod passes;
pub mod runtime;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use fixed::{FixedTensor, QFormat};
pub use ir::{BnParams, DType, Graph, Node, OpKind, ThresholdDir, ThresholdParams, validate};
pub use packing::PackedBitTensor;
pub use schedule::topo_schedule;
pub use tensor::Tensor;
