//! Named random substreams derived from one experiment seed.

pub use promptq_core::rng::{derived_seed, substream};
