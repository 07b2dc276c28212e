//! Low-light image enhancement with dual multi-head self-attention over
//! visual and semantic feature streams, built on a small CPU autodiff tape.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod network;
pub mod objectives;
pub mod ops;
pub mod params;
pub mod rng;
pub mod simd;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
