//! Dense multilayer perceptrons with hand-written backpropagation.

mod gradcheck;
mod mlp;
mod optim;

pub use gradcheck::{central_difference, finite_diff_grad, relative_error};
pub use mlp::{Activation, Dense, DenseGrad, ForwardCache, GradientTape, MlpModel};
pub use optim::{Adam, Optimizer, Sgd};

use nalgebra::DMatrix;

/// Row-major view of a batch: one sample per row.
pub type RealMatrix = DMatrix<f64>;

/// Anything whose trainable parameters can be exposed as flat slices.
///
/// The order of the returned slices must be stable for a given value so
/// optimizers can key their state by position.
pub trait Parameterized {
    fn param_slices_mut(&mut self) -> Vec<(String, &mut [f64])>;
}

/// Builds a matrix from row slices.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> RealMatrix {
    let ncols = rows.first().map_or(0, Vec::len);
    RealMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

/// Stacks two matrices with the same column count vertically.
pub fn vstack(top: &RealMatrix, bottom: &RealMatrix) -> RealMatrix {
    debug_assert_eq!(top.ncols(), bottom.ncols());
    let n = top.nrows();
    RealMatrix::from_fn(n + bottom.nrows(), top.ncols(), |i, j| {
        if i < n {
            top[(i, j)]
        } else {
            bottom[(i - n, j)]
        }
    })
}

/// Copies the given rows into a new matrix.
pub fn select_rows(m: &RealMatrix, rows: &[usize]) -> RealMatrix {
    RealMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}
