#![no_main]

use libfuzzer_sys::fuzz_target;
use skelae::training::RunMeta;

// Checkpoints carry their run description as JSON.
fuzz_target!(|data: &[u8]| {
    if let Ok(meta) = serde_json::from_slice::<RunMeta>(data) {
        let _ = meta.train.validate();
        let _ = meta.model.block_shapes();
        let _ = meta.model.param_count();
    }
});
