//! Fuzzes the macroscopic sensor-CSV loader: arbitrary bytes must either
//! parse into a dataset or return a structured error, never panic.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mgda::data::{load_macroscopic_reader, MacroscopicSchema};

fuzz_target!(|data: &[u8]| {
    let schema = MacroscopicSchema::default();
    let _ = load_macroscopic_reader(data, &schema);
});
