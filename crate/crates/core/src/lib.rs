pub mod audio;
pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod gradcam;
pub mod graph;
pub mod io;
pub mod mel;
pub mod pipeline;
pub mod siamese;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
