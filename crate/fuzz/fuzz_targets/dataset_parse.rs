#![no_main]

use gose_core::docmodel::{read_dataset, write_dataset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(docs) = read_dataset(data) else { return };
    let mut out = Vec::new();
    write_dataset(&docs, &mut out).unwrap();
    assert_eq!(read_dataset(out.as_slice()).unwrap(), docs);
});
