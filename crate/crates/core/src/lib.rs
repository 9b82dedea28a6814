pub mod affinity;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod losses;
pub mod mask;
pub mod model;
pub mod optim;
pub mod pairing;
pub mod seeds;
pub mod tensor;
pub mod train;

pub use error::{CianError, Result};
pub use mask::{ImageLabelSet, SeedMask, IGNORE};
pub use tensor::{Real, Tensor};
