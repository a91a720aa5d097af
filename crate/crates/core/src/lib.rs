pub mod augment;
pub mod corpus;
pub mod error;
pub mod rng;

pub use error::{Error, Result};
pub mod features;
pub mod kernelstats;
pub mod selector;
pub mod analysis;
pub mod contrastive;
pub mod synth;
