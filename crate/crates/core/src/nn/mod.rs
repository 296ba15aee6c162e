//! Minimal CPU neural-network kit: convolution, transposed convolution,
//! linear layers, activations, Adam, and a binary checkpoint format.
//!
//! Activations use a channel-major batch layout `[C][B][H][W]` so that a
//! convolution over the whole batch is one GEMM against an im2col matrix.
//! Everything runs single-threaded with a fixed reduction order, which
//! makes training bitwise reproducible on a platform.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod gemm;
mod layers;
pub mod loss;
mod net;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use layers::{Conv2d, ConvTranspose2d, Layer, Linear, Upsample};
pub use net::{Sequential, SequentialBuilder, Trace};
pub use params::{ModelParams, ParamRange, TensorSpec};
pub use tensor::Tensor;
