#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(buildings) = citytft::dataio::parse_buildings_str(text) {
            for (i, b) in buildings.iter().enumerate() {
                assert!(b.validate(i + 1).is_ok());
            }
        }
    }
});
