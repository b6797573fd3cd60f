pub mod bench;
pub mod dense;
pub mod error;
pub mod geometry;
pub mod h2;
pub mod io;
pub mod kernels;
pub mod linsolve;
pub mod sparse;
pub mod sparsifier;

pub use error::{Error, Result};
