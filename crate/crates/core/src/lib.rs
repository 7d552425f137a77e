pub mod analysis;
pub mod baseline;
pub mod cli;
pub mod error;
pub mod model;
pub mod neural;
pub mod numerics;
pub mod odelik;
pub mod process;
pub mod surprisal;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
pub use model::{AnyModel, ModelKind};
pub use numerics::Rng;
