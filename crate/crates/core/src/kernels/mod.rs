//! Raw slice kernels behind the differentiable ops in [`crate::graph`].
//!
//! Layout everywhere is channels-last (`H×W×C`, row-major). Kernels are
//! shape-trusting; validation happens at the graph boundary.

pub(crate) mod conv;
pub(crate) mod fft;
pub(crate) mod norm;
pub(crate) mod pool;
