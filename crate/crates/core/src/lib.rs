//! Low-bit KV-cache quantization with Hadamard rotation and token-wise key
//! scaling, the baselines it is compared against, and the tools used to
//! analyse them: token-norm profiling, quantization-error studies, an
//! operation-count cost model and a synthetic activation generator.

pub mod analysis;
pub mod cache;
pub mod config;
pub mod costmodel;
pub mod datagen;
pub mod error;
pub mod hadamard;
pub mod pipeline;
pub mod quant;
pub mod rng;
pub mod simulate;
pub mod tensor;

pub use cache::KvCache;
pub use config::{Method, PipelineConfig, ScalingStrategy};
pub use error::{Error, Result};
pub use quant::BitWidth;
pub use rng::SeededRng;
pub use tensor::{Matrix, Tensor3};
