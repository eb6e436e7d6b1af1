pub mod artifact;
pub mod diffusion;
pub mod error;
pub mod gar;
pub mod geometry;
pub mod io;
pub mod lpsr;
pub mod pipeline;
pub mod raster;
pub mod scene;

pub use error::{Error, Result};
