//! Digits::parse must reject or accept without panicking, and any
//! accepted value must survive a print/parse roundtrip.

#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(d) = lengen::digits::Digits::parse(s) {
            let again = lengen::digits::Digits::parse(&d.to_string()).unwrap();
            assert_eq!(d, again);
        }
    }
});
