#![no_main]

use fairtensor::augment::{pairs_to_text, parse_pairs};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(pairs) = parse_pairs(text) {
        assert_eq!(parse_pairs(&pairs_to_text(&pairs)).expect("written pairs parse"), pairs);
    }
});
