//! Joint extraction of entities, span attributes and entity–property relations
//! from long multi-turn conversations.

pub mod attributes;
pub mod baseline;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod relation_memory;
pub mod span_crf;
pub mod training;

pub use error::{Error, Result};
