#![no_main]

use cmlo_core::shift::{read_trace_csv, write_trace_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(rows) = read_trace_csv(data) else {
        return;
    };
    let mut out = Vec::new();
    write_trace_csv(&mut out, &rows).unwrap();
    assert_eq!(read_trace_csv(out.as_slice()).unwrap(), rows);
});
