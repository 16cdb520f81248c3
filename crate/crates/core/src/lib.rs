//! Dual-backbone facial expression recognition.

pub mod autograd;
pub mod data;
pub mod efficientvit;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod params;
pub mod runtime;
pub mod shufflenet;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use graph::{Ctx, Mode, ModelGraph, Module};
pub use tensor::{Element, Tensor};
