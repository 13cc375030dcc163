#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = citytft::dataio::SplitManifest::from_json_str(text) {
            let again = citytft::dataio::SplitManifest::from_json_str(&m.to_json_string()).unwrap();
            assert_eq!(m, again);
        }
    }
});
