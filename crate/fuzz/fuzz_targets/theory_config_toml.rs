//! Theory config TOML must parse-or-error without panicking.

#![no_main]
use libfuzzer_sys::fuzz_target;
use lengen::harness::TheoryExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(cfg) = TheoryExperimentConfig::from_toml(s) {
            let again = TheoryExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(cfg, again);
        }
    }
});
