//! Interactive language-learning loop for a voxel building assistant.
//!
//! The crate covers the voxel world, the logical-form language, the
//! semantic parser, the vision segmenter, agent memory and task execution,
//! the human-in-the-loop annotation pipeline, and the offline evaluation
//! used to measure it.

pub mod agent;
pub mod dsl;
pub mod edit;
pub mod grammar;
pub mod memory;
pub mod par;
pub mod parser;
pub mod pipeline;
pub mod routing;
pub mod scoring;
pub mod session;
pub mod vision;
pub mod worker;
pub mod world;
