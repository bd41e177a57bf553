//! Mixed-precision quantized convolution kernels.
//!
//! Every combination of 2, 4 and 8-bit input feature maps, weights and
//! output feature maps (27 kernels) is served by one pipeline:
//! precision-specialized im2col, a 4x2 register-tiled MatMul that unpacks
//! sub-byte weights on the fly, and a QntPack stage that requantizes the
//! 32-bit accumulators and packs them back into the output precision.
//!
//! The [`oracle`] module is an independent brute-force implementation used
//! as ground truth, and [`costmodel`] predicts instruction and cycle counts
//! for the inner loops on an 8-bit-SIMD RISC-V cluster.

pub mod costmodel;
pub mod kernels;
pub mod oracle;
pub mod packing;
pub mod precision;
pub mod quantization;
pub mod synth;
pub mod tensor;

pub use costmodel::{CostError, CostModel, CostReport, InnerLoopBudget};
pub use kernels::{conv_mixed, partition_rows, KernelError, LayerConfig, LayerQuant, Requantizer};
pub use oracle::{conv_reference, IntTensor, IntWeights};
pub use packing::PackError;
pub use precision::Precision;
pub use quantization::{Accumulator, QuantError, QuantParams, ShiftRequant, ThresholdSet};
pub use tensor::{PackedTensor, TensorError, WeightTensor};
