#![no_main]

use libfuzzer_sys::fuzz_target;
use localmarket::scenario_io::parse_seller_counts;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(counts) = parse_seller_counts(text) {
            assert!(!counts.is_empty());
        }
    }
});
