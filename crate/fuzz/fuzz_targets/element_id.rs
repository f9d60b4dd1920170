#![no_main]

use doge_core::model::ElementId;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(id) = text.parse::<ElementId>() {
        assert_eq!(id.to_string().parse::<ElementId>().unwrap(), id);
    }
});
