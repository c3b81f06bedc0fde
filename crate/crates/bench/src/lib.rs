//! Shared fixtures for the criterion benchmarks.

use fedmutual::data::{generate_synthetic, Dataset};
use fedmutual::rng::stream;
use fedmutual::sim::{DataSource, SimulationConfig, SyntheticSpec};
use fedmutual::{Architecture, ModelParameters, StrategyKind};

/// Default-architecture model on `dim` inputs.
pub fn model(dim: usize) -> ModelParameters {
    Architecture::new(dim, vec![32, 16], 0.2)
        .init(&mut stream(1, &[]))
        .expect("valid architecture")
}

pub fn batch(n: usize, dim: usize) -> Dataset {
    generate_synthetic(n, dim, 2.0, &mut stream(2, &[])).expect("valid synthetic spec")
}

/// Small run: 5 clients, `rounds` rounds on separation-2 data.
pub fn config(kind: StrategyKind, rounds: usize) -> SimulationConfig {
    let mut c = SimulationConfig::new(
        5,
        rounds,
        kind,
        DataSource::Synthetic(SyntheticSpec {
            n: 40 * (6 * rounds + 1),
            ..SyntheticSpec::default()
        }),
    );
    c.seed = 3;
    c
}
