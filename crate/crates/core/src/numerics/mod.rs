//! Tensor substrate shared by every other module.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use gradcheck::finite_diff_check;
pub use nn::{mlp_forward, Activation, Linear, Mlp, MlpCache, Parameter, Parameterized};
pub use ops::{
    cross_entropy, cross_entropy_grad, matmul, matmul_backward, matmul_nt, matmul_tn, mse, mse_grad,
    sigmoid, softmax_rows, softmax_rows_backward,
};
pub use optim::{cosine_lr, Adam, AdamConfig};
pub use rng::RngState;
pub use tensor::Tensor;

/// Tensor filled with standard-normal draws.
pub fn randn(shape: &[usize], rng: &mut RngState) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("positive extents")
}

/// Tensor filled with uniform draws in `[lo, hi)`.
pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut RngState) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(lo, hi)).collect())
        .expect("positive extents")
}
