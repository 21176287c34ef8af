#![no_main]

use libfuzzer_sys::fuzz_target;
use ragforge::config::{parse_pairs, RunConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(pairs) = parse_pairs(text) {
        assert!(pairs.iter().all(|(k, _)| !k.is_empty()));
    }
    if let Ok(cfg) = RunConfig::from_text(text) {
        let _ = cfg.validate(false);
    }
});
