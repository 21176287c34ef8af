#![no_main]

use libfuzzer_sys::fuzz_target;
use ragforge::checkpoint::{Checkpoint, Manifest};

// Input: manifest text, a NUL byte, then the tensor payload.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(manifest) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    let payload = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(m) = Manifest::parse(manifest) {
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
    }
    if let Ok(ck) = Checkpoint::from_parts(manifest, payload) {
        assert_eq!(ck.payload(), payload);
    }
});
