//! Experiment config TOML must parse-or-error without panicking; any
//! accepted config must survive a serialize/parse roundtrip.

#![no_main]
use libfuzzer_sys::fuzz_target;
use lengen::harness::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::from_toml(s) {
            let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(cfg, again);
        }
    }
});
