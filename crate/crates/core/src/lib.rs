//! Multi-modal sequential recommender built on time-aware state-space
//! duality kernels, with a self-contained tensor/autodiff layer, a data
//! pipeline, training loops, and verification harnesses.

// kernel code is written with explicit index arithmetic throughout
#![allow(clippy::needless_range_loop)]

pub mod align;
pub mod cross;
pub mod data;
pub mod error;
pub mod eval;
pub mod fft;
pub mod fourier;
pub mod io;
pub mod model;
pub mod ssd;
pub mod synth;
pub mod tape;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use data::{DatasetSplit, EvalCase, InteractionRecord, ItemCatalog, UserSequence};
pub use error::{Error, Result};
pub use model::{Ablation, ModelConfig, ModelParams};
pub use tape::{Gradients, Tape, UnaryOp};
pub use tensor::{Shape, Tensor};
pub use train::TrainConfig;
