#![no_main]

use doge_core::scoring::ExpressiveScoreTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = ExpressiveScoreTable::from_json(text) {
        let again = ExpressiveScoreTable::from_json(&table.to_json().unwrap()).expect("round trip");
        assert_eq!(again.to_json().unwrap(), table.to_json().unwrap());
    }
});
