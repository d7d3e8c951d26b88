#![no_main]

use cmlo_core::engine::read_returns_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_returns_csv(data);
});
