#![no_main]

use fairtensor::tensor::parse_tensor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = parse_tensor(text, None) {
        let back = parse_tensor(&t.to_text(), None).expect("written tensor parses");
        assert_eq!(back, t);
    }
});
