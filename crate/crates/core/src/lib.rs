pub mod attack;
pub mod corpus;
pub mod ctph;
pub mod detect;
pub mod ensemble;
pub mod error;
pub mod featx;
pub mod metadet;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod toyprog;
pub mod xform;

pub use error::{Error, Result};
