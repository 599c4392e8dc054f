//! Episodic few-shot sequence labeling with prototypical classification, a
//! contrastive memory of label embeddings, and test-time adaption from that
//! memory.

pub mod adaption;
pub mod corpus;
pub mod diffmath;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod kvconfig;
pub mod memory;
pub mod protonet;

pub use error::{Error, Result};
