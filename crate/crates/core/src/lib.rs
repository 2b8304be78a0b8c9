//! Desk-scale simulator for resource-adaptive federated LoRA fine-tuning of
//! sparse mixture-of-experts models.
//!
//! Clients fine-tune per-expert LoRA adapters while activating only as many
//! experts as their budget allows, rescale the sparser output with a learnable
//! scalar, and the server averages each expert's adapters weighted by how often
//! each client activated it. FedAvg and SVD rank-compression baselines, an
//! analytic FLOPs counter and a config-driven experiment runner sit alongside.

pub mod baselines;
pub mod datagen;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod federation;
pub mod flops;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
