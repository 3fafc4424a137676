//! Record lines are validated against a fixed well-formed header.

#![no_main]
use libfuzzer_sys::fuzz_target;
use lengen::datagen::dataset::{parse_record, DatasetHeader};
use lengen::datagen::Vocab;

fuzz_target!(|data: &[u8]| {
    let header = DatasetHeader::new(Vocab::arithmetic(), None, None);
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = parse_record(s, &header);
    }
});
