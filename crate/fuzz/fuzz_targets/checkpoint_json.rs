//! Checkpoint JSON must load-or-error without panicking; accepted
//! checkpoints must yield shape-consistent parameters.

#![no_main]
use libfuzzer_sys::fuzz_target;
use lengen::model::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::read_from(data) {
        let (params, _) = ckpt.into_parameters().unwrap();
        assert_eq!(params.data.len(), params.layout.total());
    }
});
