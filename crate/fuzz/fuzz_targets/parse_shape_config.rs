#![no_main]

use libfuzzer_sys::fuzz_target;
use nq_core::bpw::{model_report, Method, RankPolicy};
use nq_core::formats::{parse_shape_config, write_shape_config};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(shape) = parse_shape_config(text) {
        assert_eq!(parse_shape_config(&write_shape_config(&shape)).unwrap(), shape);
        let _ = model_report(&shape, Method::NanoQuant, None, RankPolicy::TargetBpw(1.0));
    }
});
