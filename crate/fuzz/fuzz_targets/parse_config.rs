#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = overthink::config::parse_config(text) {
            assert_eq!(overthink::config::parse_config(&config.to_toml()).unwrap(), config);
        }
    }
});
