//! Fuzzes the car-following trajectory CSV loader, including the optional
//! spacing/Δv/acceleration columns and their cross-checks.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mgda::data::{load_trajectories_reader, TrajectorySchema};

fuzz_target!(|data: &[u8]| {
    let schema = TrajectorySchema::default();
    let _ = load_trajectories_reader(data, &schema);
});
