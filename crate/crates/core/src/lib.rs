//! Post-training quantization of neural networks by first-order Sigma-Delta
//! quantization over finite unit-norm tight frames (FUNTFs).
//!
//! Each weight column is expanded in a FUNTF, its frame coefficients are
//! quantized by the Sigma-Delta recursion into level indices, and the
//! quantized matrix is recovered through the canonical dual `(d/N) I`.

pub mod bounds;
pub mod error;
pub mod formats;
pub mod frames;
pub mod mnist;
pub mod network;
pub mod quantizer;
pub mod sigma_delta;

pub use error::{Error, ErrorClass, Result};
pub use frames::{Frame, FrameKind, Permutation};
pub use network::{Activation, Layer, Model, QuantizedLayer, QuantizedModel};
pub use quantizer::{Mode, QuantizationConfig, QuantizedMatrix, StepPolicy};
pub use sigma_delta::Alphabet;
