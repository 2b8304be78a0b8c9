//! Client training, server aggregation and round orchestration.

mod aggregate;
mod client;
mod round;

pub use aggregate::{
    aggregate, aggregate_with_weights, compute_weights, AggregationPolicy, PolicyKind, WeightTable,
};
pub use client::{local_train, Budget, ClientConfig, ClientUpdate, GlobalState, TrainOptions};
pub use round::{
    run_round, sample_clients, sample_indices, sample_size, ClientRecord, RoundContext, RoundReport,
};
