#![no_main]

use libfuzzer_sys::fuzz_target;
use magr_core::data::{parse_csv, to_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ds) = parse_csv(text) {
        let again = parse_csv(&to_csv(&ds)).expect("re-parse of serialized dataset");
        assert_eq!(again.samples, ds.samples);
    }
});
