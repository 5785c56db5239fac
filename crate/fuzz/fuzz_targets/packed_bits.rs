#![no_main]

use libfuzzer_sys::fuzz_target;
use nq_core::packing::{pack_signs, unpack_signs, PackedBitMatrix};

// first two bytes pick the shape, the rest are little-endian words
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let (rows, cols) = (data[0] as usize % 64 + 1, data[1] as usize % 200 + 1);
    let words: Vec<u32> = data[2..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Ok(packed) = PackedBitMatrix::from_words(rows, cols, words) {
        let signs = unpack_signs(&packed).unwrap();
        assert_eq!(pack_signs(&signs).unwrap(), packed);
    }
});
