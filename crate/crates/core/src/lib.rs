pub mod auditor;
pub mod autodiff;
pub mod error;
pub mod exact;
pub mod experiments;
pub mod gradcheck;
pub mod models;
pub mod regularizers;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub struct Overview;
    #[doc = include_str!("../../../book/src/recurrent-sets.md")]
    pub struct RecurrentSets;
    #[doc = include_str!("../../../book/src/exact-parity.md")]
    pub struct ExactParity;
    #[doc = include_str!("../../../book/src/deepsets-parity.md")]
    pub struct DeepSetsParity;
    #[doc = include_str!("../../../book/src/regularizers.md")]
    pub struct Regularizers;
    #[doc = include_str!("../../../book/src/auditing.md")]
    pub struct Auditing;
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub struct Experiments;
}
