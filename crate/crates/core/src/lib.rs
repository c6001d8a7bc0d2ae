//! User-oriented fairness for implicit-feedback recommendation.
//!
//! For every low-activity ("disadvantaged") user a constrained dominant set
//! of similar high-activity ("advantaged") users is extracted from a
//! co-interaction graph. A matrix-factorization model is then trained with an
//! extra loss pulling each disadvantaged user's embedding toward the mean
//! embedding of its most important cluster members, and evaluated per group
//! under the leave-one-out protocol.

pub mod artifacts;
pub mod cds;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod fairness;
pub mod graph;
pub mod linalg;
pub mod pipeline;
pub mod recsys;

pub use error::{Error, Result};
