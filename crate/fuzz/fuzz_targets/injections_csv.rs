#![no_main]

use libfuzzer_sys::fuzz_target;
use localmarket::scenario_io::parse_injections;
use localmarket::Network;
use num_complex::Complex64;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let network = Network::chain(5, Complex64::new(0.001, 0.001), 100.0);
    if let Ok(p) = parse_injections(text, &network) {
        assert_eq!(p.len(), 5);
    }
});
