pub mod analysis;
pub mod decoder;
pub mod detector;
pub mod error;
pub mod features;
pub mod math;
pub mod qa;
pub mod toy;
pub mod trace;
pub mod util;

pub use error::{Error, Result};
