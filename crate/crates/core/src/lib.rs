//! Learning Dirichlet mixed membership models from categorical data by factorizing
//! third-order moment tensors.
//!
//! The pipeline builds empirical moment sub-tensors over small groups of variables that
//! share anchor variables ([`partition`]), factorizes each one into nonnegative factors with
//! multiplicative updates ([`pqp`]), and aligns the components of the groups through the
//! anchors ([`matching`]).

pub mod error;
pub mod io;
pub mod matching;
pub mod moments;
pub mod partition;
pub mod pqp;
pub mod rng;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
pub use matching::{MatchReport, Matcher, Permutation};
pub use moments::{Dataset, ModelParams};
pub use partition::{FitOptions, FitResult, PartitionPlan};
pub use pqp::{FactorizeOptions, Factorization, QuadProgram};
pub use tensor::{KruskalFactors, Mode, Tensor3};
