#![no_main]

use libfuzzer_sys::fuzz_target;
use ragforge::index::IndexSnapshot;

fuzz_target!(|data: &[u8]| {
    if let Ok(snap) = IndexSnapshot::from_bytes(data) {
        let bytes = snap.to_bytes();
        assert_eq!(IndexSnapshot::from_bytes(&bytes).unwrap(), snap);
        if snap.len() > 0 {
            let q = vec![0.5f32; snap.dim()];
            let _ = snap.search(&q, 3, snap.num_clusters().max(1));
        }
    }
});
