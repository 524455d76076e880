pub mod archive;
pub mod attributor;
pub mod autograd;
pub mod classifier;
pub mod config;
pub mod error;
pub mod eval;
pub mod grid;
pub mod imageio;
pub mod inpainter;
pub mod ledger;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
