//! Dense primitives shared by every other module: row-major matrices, patch
//! feature grids, the seeded random stream, softmax/normalisation, correspondence
//! maps and the finite-difference gradient checker.

mod dump;
mod gradcheck;
mod matrix;
mod ops;
mod rng;

pub use dump::{read_tensor, read_tensor_from, write_tensor, write_tensor_to, TensorHeader};
pub use gradcheck::{finite_diff_gradient, gradient_report, DEFAULT_GRAD_EPS, DEFAULT_GRAD_TOLERANCE};
pub use matrix::{CorrespondenceMap, FeatureGrid, Matrix};
pub(crate) use ops::correspondence_map_raw;
pub use ops::{
    correspondence_map, dot, l2_normalize, l2_normalize_rows, norm, normalize_backward, softmax, softmax_backward,
};
pub use rng::RngState;
