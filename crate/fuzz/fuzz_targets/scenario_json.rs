#![no_main]

use libfuzzer_sys::fuzz_target;
use localmarket::scenario_io::{parse_scenario, scenario_to_json};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // anything that parses must survive a save/load round trip
    if let Ok(scenario) = parse_scenario(text) {
        let again = parse_scenario(&scenario_to_json(&scenario)).expect("re-parse");
        assert_eq!(scenario, again);
    }
});
