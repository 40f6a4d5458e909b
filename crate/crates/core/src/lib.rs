pub mod bilevel;
pub mod coreset;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod tensor;

pub use bilevel::{run_condense, CondenseConfig, SyntheticSet};
pub use data::{LabeledDataset, NormStats};
pub use error::{Error, Result};
pub use losses::LossBreakdown;
pub use models::{Architecture, ConvNetSpec, LinearSpec, MlpSpec, ModelParams};
pub use tensor::{Tape, Tensor, Var};
