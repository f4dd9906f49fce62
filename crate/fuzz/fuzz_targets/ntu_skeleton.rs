#![no_main]

use libfuzzer_sys::fuzz_target;
use skelae::data::{parse_ntu_skeleton, write_ntu_skeleton, BodyMode};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_ntu_skeleton(text, BodyMode::ConcatTwo);
    for mode in [BodyMode::First, BodyMode::All] {
        let Ok(seqs) = parse_ntu_skeleton(text, mode) else { continue };
        // Whatever parses as a single body survives a write/parse cycle.
        for s in &seqs {
            let written = write_ntu_skeleton(std::slice::from_ref(s)).expect("parsed body writes");
            let again = parse_ntu_skeleton(&written, BodyMode::First).expect("written body parses");
            assert_eq!(again[0].coords(), s.coords());
        }
    }
});
