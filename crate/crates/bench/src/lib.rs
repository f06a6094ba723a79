//! Shared fixtures for the criterion benchmarks under `benches/`.

use riner_core::simulator::{simulate_scan, SimulatedScan, SimulationConfig};
use riner_core::trainer::Trainer;
use riner_core::{FieldParams, ScanGeometry, TrainConfig};

/// Seeded corrupted scan on the 128² desk geometry.
pub fn desk_scan() -> SimulatedScan {
    simulate_scan(&ScanGeometry::fan2d_desk(), &SimulationConfig::default()).expect("desk scan")
}

/// `n` random points in the unit square, interleaved `[x, y, x, y, ...]`.
pub fn unit_points(n: usize) -> Vec<f32> {
    (0..2 * n).map(|i| ((i as f32 * 0.618_034) % 1.0).abs()).collect()
}

pub fn field(config: &TrainConfig) -> FieldParams<f32> {
    FieldParams::new(2, &config.field, config.seed).expect("field")
}

pub fn trainer(scan: &SimulatedScan) -> Trainer<f32> {
    Trainer::new(&scan.corrupted.geometry, &TrainConfig::default()).expect("trainer")
}
