//! Dense matrices, spatial grids, the gradient tape and a finite-difference
//! checker.

pub mod gradcheck;
mod grid;
mod matrix;
mod ops;
mod tape;

pub use grid::{Grid, KERNEL};
pub use matrix::{Matrix, NORM_EPS};
pub use ops::{Eager, Ops, PROB_EPS};
pub use tape::{Gradients, Tape, Var};
