#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(loads) = citytft::dataio::parse_loads_str("c", "b", text) {
            assert!(loads.validate().is_ok());
        }
    }
});
