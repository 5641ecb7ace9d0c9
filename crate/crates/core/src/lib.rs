pub mod attribution;
pub mod error;
pub mod eval;
pub mod image;
pub mod inr;
pub mod models;
pub mod netpbm;
pub mod optim;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
