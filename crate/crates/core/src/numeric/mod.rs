//! Dense arrays, computation graphs with reverse-mode differentiation, and
//! a central-difference gradient oracle.

mod array;
mod graph;

pub(crate) use array::dot;
pub use array::Array;
pub use graph::{
    gelu, Axis, Bindings, Evaluation, Graph, Mode, NodeId, Primitive, GELU_CUBIC, GELU_SQRT_2_OVER_PI, LAYER_NORM_EPS,
};
