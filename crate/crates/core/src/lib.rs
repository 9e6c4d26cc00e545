//! Relational foundation-model engine: turns a multi-table database into a
//! heterogeneous relational entity graph, pretrains a shared-weight GraphSAGE
//! with masked feature reconstruction, and adapts it to entity classification.

pub mod binio;
pub mod cli;
pub mod downstream;
pub mod encoders;
pub mod error;
pub mod hetgnn;
pub mod pretrain;
pub mod relmodel;
pub mod rng;
pub mod rowtext;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
