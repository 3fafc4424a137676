//! Metrics CSV must parse-or-error without panicking; accepted tables
//! must survive an export/parse roundtrip.

#![no_main]
use libfuzzer_sys::fuzz_target;
use lengen::harness::{export_metrics_csv, parse_metrics_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = parse_metrics_csv(data) {
        let mut buf = Vec::new();
        export_metrics_csv(&table, &mut buf).unwrap();
        let again = parse_metrics_csv(&buf[..]).unwrap();
        assert_eq!(table, again);
    }
});
