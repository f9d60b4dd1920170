#![no_main]

use doge_core::data::{parse_jsonl, to_jsonl, IngestOptions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let opts = IngestOptions::default();
    if let Ok(corpus) = parse_jsonl(text, &opts) {
        let again = parse_jsonl(&to_jsonl(&corpus), &opts).expect("serialized corpus parses");
        assert_eq!(to_jsonl(&again), to_jsonl(&corpus));
    }
});
