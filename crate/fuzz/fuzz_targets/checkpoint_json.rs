#![no_main]

use libfuzzer_sys::fuzz_target;
use magr_core::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ck) = Checkpoint::from_json(text) {
        let _ = ck.state();
    }
});
