//! Fuzzes the JSON checkpoint decoder.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mgda::train::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let _ = Checkpoint::from_json(data);
});
