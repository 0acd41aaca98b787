pub mod error;
pub mod numerics;
pub mod quantizer;
pub mod transform;
pub mod desv;
pub mod calibrate;
pub mod gradcheck;
pub mod analyze;
pub mod io;
pub mod synth;

pub use error::{Error, Result};
pub use numerics::{Matrix, SvdFactors};
