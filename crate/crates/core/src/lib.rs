//! Anchor-calibrated, dual-track advantage estimation for personalized policy
//! optimization, with the supporting reward model, skill-graph memory and a
//! synthetic multi-user environment.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advantage;
pub mod bias_oracle;
pub mod stats;
pub mod gradcheck;
pub mod reward_model;
pub mod sim_env;
pub mod skill_graph;
