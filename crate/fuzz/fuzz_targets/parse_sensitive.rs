#![no_main]

use fairtensor::tensor::{parse_sensitive, sensitive_to_text};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&n, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let entities = usize::from(n % 64);
    if let Ok(ctx) = parse_sensitive(text, entities, 0) {
        let back = parse_sensitive(&sensitive_to_text(&ctx), entities, 0).expect("written context parses");
        assert_eq!(back, ctx);
    }
});
