pub mod embed;
pub mod error;
pub mod frm;
pub mod metrics;
pub mod mfrm;
pub mod numeric;
pub mod objectives;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
