#![no_main]

use gose_core::evaluation::PredictionFile;
use gose_core::synthgen::{generate, GenConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(file) = PredictionFile::parse(text) else { return };
    let docs = generate(&GenConfig { n_docs: 2, ..GenConfig::default() }).unwrap();
    if let Ok(sets) = file.align(&docs) {
        assert_eq!(sets.len(), docs.len());
    }
});
