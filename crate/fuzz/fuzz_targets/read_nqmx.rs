#![no_main]

use libfuzzer_sys::fuzz_target;
use nq_core::formats::{read_nqmx, write_nqmx};

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = read_nqmx(data) {
        // accepted input is canonical unless it holds non-finite floats
        if let Ok(again) = write_nqmx(&m) {
            assert_eq!(again, data);
        }
    }
});
