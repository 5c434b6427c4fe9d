#![no_main]

use gose_core::docmodel::{parse_funsd, to_funsd_json, FunsdOptions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(load) = parse_funsd(text, "fuzz", FunsdOptions::default()) else { return };
    let doc = load.document;
    let json = to_funsd_json(&doc).expect("loaded documents serialize");
    let opts = FunsdOptions { page_size: Some((doc.page_w, doc.page_h)) };
    let again = parse_funsd(&json, "fuzz", opts).expect("own output parses").document;
    assert_eq!(again.links, doc.links);
    assert_eq!(again.len(), doc.len());
});
