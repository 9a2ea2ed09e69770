//! Dense tensors, orthonormal DFTs and a reverse-mode tape with the neural
//! primitives the network is built from.

pub mod attention;
pub mod dropout;
pub mod fft;
pub mod graph;
pub(crate) mod kernels;
pub mod rng;
pub mod tensor;

pub use attention::{multi_head_attention, Attention};
pub use dropout::Dropout;
pub use fft::{dft_forward, dft_inverse};
pub use graph::{gelu_scalar, Graph, Var};
pub use rng::SeedStream;
pub use tensor::{ComplexTensor, Tensor};
