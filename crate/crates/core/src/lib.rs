pub mod analysis;
pub mod backbone;
pub mod bench;
pub mod diffmath;
pub mod error;
pub mod features;
pub mod guidance;
pub mod imageio;
pub mod kvconfig;
pub mod pipeline;
pub mod shapes;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
