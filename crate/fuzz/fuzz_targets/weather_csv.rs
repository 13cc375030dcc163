#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(series) = citytft::dataio::parse_weather_str("fuzz", text) {
            assert_eq!(series.records.len(), citytft::dataio::HOURS_PER_YEAR);
            assert!(series.validate().is_ok());
        }
    }
});
