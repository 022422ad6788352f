#![no_main]

use fairtensor_cli::parse_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_config(text) {
        assert_eq!(parse_config(&cfg.to_toml()).expect("written config parses"), cfg);
    }
});
