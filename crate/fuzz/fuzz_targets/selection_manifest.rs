#![no_main]

use doge_core::pruning::TicketSelection;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(sel) = TicketSelection::from_json(text) {
        let again = TicketSelection::from_json(&sel.to_json().unwrap()).expect("round trip");
        assert_eq!(again.to_json().unwrap(), sel.to_json().unwrap());
    }
});
