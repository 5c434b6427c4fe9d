#![no_main]

use gose_core::model::checkpoint::{decode_tensor, encode_tensor};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // first two bytes pick a shape, the rest is the payload
    let [a, b, rest @ ..] = data else { return };
    let shape = [usize::from(*a % 17), usize::from(*b % 17)];
    if let Ok(t) = decode_tensor(rest, &shape) {
        assert_eq!(encode_tensor(&t), rest);
    }
});
