//! Learned filter-group pruning for small convolutional networks.
//!
//! The pipeline has three phases: jointly learn weights and a soft
//! assignment of each layer's filters to groups ([`grouping`]), prune input
//! channels separately inside every group ([`pruning`]), then fine-tune and
//! lower the result to grouped convolutions with gather indices
//! ([`compile`]). [`oracle`] holds brute-force references used to check the
//! learned groups and the degenerate single-group case.

pub mod compile;
pub mod config;
pub mod data;
pub mod error;
pub mod grouping;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod pruning;
pub mod tensor;
pub mod train;

pub use error::{Error, ParseError, Result};
pub use tensor::{Tape, Tensor, Var};
