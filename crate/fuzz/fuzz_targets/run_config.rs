#![no_main]

use doge_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_toml(text, &[]) {
        let echoed = cfg.to_toml().expect("resolved config serializes");
        let again = RunConfig::from_toml(&echoed, &[]).expect("echoed config loads");
        assert_eq!(again.to_toml().unwrap(), echoed);
    }
});
