//! Fuzzes the (method, metric, value) CSV reader used by `compare`.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mgda::pipeline::load_metric_rows_reader;

fuzz_target!(|data: &[u8]| {
    let _ = load_metric_rows_reader(data);
});
