#![no_main]

use doge_core::analysis::ActivationStats;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(stats) = ActivationStats::from_json(text) {
        let again = ActivationStats::from_json(&stats.to_json().unwrap()).expect("round trip");
        assert_eq!(again.to_json().unwrap(), stats.to_json().unwrap());
    }
});
