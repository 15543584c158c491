pub mod atmospherics;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod networks;
pub mod pipeline;
pub mod pnm;
pub mod synthesis;
pub mod tensor;

pub use error::{Error, Result};
