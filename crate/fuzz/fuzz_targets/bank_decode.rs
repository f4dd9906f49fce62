#![no_main]

use libfuzzer_sys::fuzz_target;
use skelae::evaluation::FeatureBank;

fuzz_target!(|data: &[u8]| {
    if let Ok(bank) = FeatureBank::decode(data) {
        assert_eq!(bank.labels.len(), bank.len());
        assert_eq!(FeatureBank::decode(&bank.encode()).expect("re-encoded bank decodes").encode(), bank.encode());
    }
});
