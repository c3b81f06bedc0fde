//! The simulation driver: configuration, round loop, byte accounting and
//! output files.

mod comm;
mod config;
mod output;
mod run;

pub use comm::{
    account_communication, CommEntry, CommLedger, MessageKind, BYTES_PER_VALUE, METRICS_BYTES,
};
pub use config::{DataSource, ModelSpec, SimulationConfig, SyntheticSpec};
pub use output::{load_checkpoint, write_checkpoint, write_outputs, OUTPUT_FILES};
pub use run::{
    prepare_data, run_simulation, run_simulation_with, ClientRoundMetrics, EventKind, FinalMetric,
    PreparedData, RoundRecord, SimulationOutcome,
};
