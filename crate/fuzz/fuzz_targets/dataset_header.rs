//! Dataset header lines must parse or error, never panic.

#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = lengen::datagen::dataset::parse_header(s);
    }
});
