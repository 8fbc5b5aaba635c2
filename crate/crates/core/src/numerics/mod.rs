//! Dense matrices, nonlinearities, the deterministic generator and the
//! finite-difference gradient checker.

mod gradcheck;
mod matrix;
mod rng;

pub use gradcheck::grad_check;
pub use matrix::{
    axpy, dot, log_sum_exp, norm, sigmoid, softmax_in_place, softmax_rows, tanh_elem, Matrix,
};
pub use rng::Rng;
