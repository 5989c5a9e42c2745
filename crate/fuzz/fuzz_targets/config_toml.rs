//! Fuzzes the experiment-config TOML parser and its validation pass.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mgda::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = ExperimentConfig::from_toml_str(s);
    }
});
