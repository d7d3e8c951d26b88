#![no_main]

use cmlo_core::engine::read_stage_csvs;
use libfuzzer_sys::fuzz_target;

// The two files are separated by the first 0xff byte.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0xff).unwrap_or(data.len());
    let (coverage, rest) = data.split_at(split);
    let model_error = rest.get(1..).unwrap_or(&[]);
    let _ = read_stage_csvs(coverage, model_error);
});
