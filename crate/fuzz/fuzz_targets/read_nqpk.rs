#![no_main]

use libfuzzer_sys::fuzz_target;
use nq_core::formats::{read_nqpk, write_nqpk};
use nq_core::packing::gemv_packed;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = read_nqpk(data) {
        assert_eq!(write_nqpk(&model).unwrap(), data);
        for (_, layer) in &model.layers {
            if layer.m() <= 4096 {
                let y = gemv_packed(layer, &vec![1.0; layer.m()]).unwrap();
                assert_eq!(y.len(), layer.n());
            }
        }
    }
});
