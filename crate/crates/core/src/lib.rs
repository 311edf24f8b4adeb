//! Self-explainable fraud model: concept taxonomy and distant supervision,
//! a from-scratch dense network engine, the hierarchical concept/decision
//! model, training with model selection, and the human tuning loop.

pub mod dataset;
pub mod human_loop;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod taxonomy;
pub mod trainer;
