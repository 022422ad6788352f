#![no_main]

use fairtensor::model::parse_checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_checkpoint(text) {
        let back = parse_checkpoint(&m.to_checkpoint()).expect("written checkpoint parses");
        assert_eq!(back, m);
    }
});
