pub mod config;
pub mod error;
pub mod eval;
pub mod gen;
pub mod hmm;
pub mod io;
pub mod seqvae;
pub mod substrate;

pub use error::{Error, Result};
