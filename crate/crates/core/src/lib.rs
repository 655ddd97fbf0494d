pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod motion;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod ssm;
pub mod tensor;

pub use config::RunConfig;
pub use error::{Error, ErrorKind, Result};
pub use tensor::{Gradients, ParamId, ParamStore, Tape, Tensor, Var};
