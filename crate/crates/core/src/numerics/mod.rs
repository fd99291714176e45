//! Dense tensors, the differentiable op set, AdamW and the NTF file format.

mod graph;
pub mod ntf;
mod optim;
mod tensor;

pub use graph::{CVar, Gradients, Graph, Var, IMAG_RESIDUE_LIMIT};
pub use optim::{AdamW, AdamWConfig, AdamWState, ParamStore};
pub use tensor::{DType, Scalar, Tensor};

#[cfg(test)]
mod tests;
