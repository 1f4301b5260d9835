#![no_main]

use libfuzzer_sys::fuzz_target;
use magr_core::experiment::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::from_toml(text) {
        let back =
            ExperimentConfig::from_toml(&cfg.to_toml()).expect("re-parse of serialized config");
        assert_eq!(back, cfg);
    }
});
