//! Mixture-of-Word-Experts at desk scale.
//!
//! Tokens are routed to small feed-forward experts by a fixed function of
//! their id in a large knowledge-rich routing vocabulary. Experts are grouped
//! into frequency buckets and blocks so that dispatch cost depends on the
//! number of blocks, not experts.

pub mod bucketing;
pub mod error;
pub mod experiments;
pub mod model;
pub mod mowe;
pub mod ops;
pub mod params;
pub mod routing;
pub mod tokenizer;
mod util;

pub use error::{Error, Result};
pub use util::{read_lines, sha256_hex};
