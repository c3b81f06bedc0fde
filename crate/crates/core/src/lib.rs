//! Deterministic federated-learning protocol simulator.
//!
//! Three client-update strategies are implemented side by side:
//!
//! * **Vanilla** – every round all client weights are averaged and broadcast.
//! * **AsyncWeights** – accuracy-weighted averaging of the shallow layers every
//!   round, with the deep layers joining every `delta`-th round after a warmup.
//! * **DistributedMutualLearning** – no weights leave a client. Clients predict
//!   on a rotating common set, exchange those predictions, and then minimise
//!   their own cross-entropy plus the average KL divergence to their peers.
//!
//! The crate is organised bottom-up: [`nn`] holds the dense binary classifier
//! and its losses, [`data`] handles datasets and the stratified fold schedule,
//! [`protocols`] the aggregation and update primitives, and [`sim`] the round
//! loop, byte accounting and output files.

pub mod data;
pub mod error;
pub mod nn;
pub mod protocols;
pub mod rng;
pub mod sim;

pub use data::{Dataset, FoldSchedule, Normalizer};
pub use error::{Error, Result};
pub use nn::{
    Architecture, BinaryDist, DenseLayer, GradientSet, KlDirection, LossSpec, ModelParameters,
};
pub use protocols::{
    ClientInit, ClientReport, LayerPartition, PartitionKind, StrategyKind, StrategySpec,
};
pub use sim::{
    CommLedger, EventKind, MessageKind, RoundRecord, SimulationConfig, SimulationOutcome,
};
