pub mod bundle;
pub mod dxt;
pub mod error;
pub mod latent_imaging;
pub mod rng;
pub mod sampler;
pub mod scheduler;
pub mod text_encoding;
pub mod tokenizer;
pub mod trajectory_projection;

pub use error::{Error, Result};
