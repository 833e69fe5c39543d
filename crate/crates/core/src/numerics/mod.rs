//! Numeric core: tensors, the differentiation tape, Adam and the
//! finite-difference oracle.

mod adam;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{check_param_grads, finite_diff_check, ParamCheckReport};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{ConvGeom, Tape, Var, MASK_NEG};
pub use tensor::Tensor;

