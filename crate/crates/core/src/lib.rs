//! Faithfulness of synthetic concept image sets for concept-based
//! explanations: CAV alignment, intra-similarity, importance deltas and
//! counterfactual concept removal, with the statistics to compare them.

pub mod catalog;
pub mod cav;
pub mod extract;
pub mod genclient;
pub mod importance;
pub mod procedural;
pub mod report;
pub mod stats;
