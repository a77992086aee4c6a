//! Conversion of softmax-attention transformers into recurrent RAD-RWKV students.

pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod mixers;
pub mod model;
pub mod ops;
pub mod param;
pub mod primitives;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use param::{ParamGroup, ParamId, ParamRole, ParamStore, Parameter};
pub use tensor::{DType, Element, Tensor};
