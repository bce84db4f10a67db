//! Numeric substrate: matrices, reverse-mode differentiation, Adam.

pub mod adam;
mod matrix;
pub mod params;
pub mod sparse;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use matrix::Matrix;
pub use params::{Mode, ParamId, ParamStore, Session};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;

/// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}
