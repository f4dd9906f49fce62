#![no_main]

use libfuzzer_sys::fuzz_target;
use skelae::data::{decode_dataset, encode_dataset, Precision};

fuzz_target!(|data: &[u8]| {
    if let Ok(split) = decode_dataset(data) {
        let bytes = encode_dataset(&split, Precision::F64);
        assert_eq!(decode_dataset(&bytes).expect("re-encoded cache decodes"), split);
    }
});
