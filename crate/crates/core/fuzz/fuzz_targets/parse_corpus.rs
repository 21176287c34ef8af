#![no_main]

use libfuzzer_sys::fuzz_target;
use ragforge::corpus::{chunk_corpus, parse_corpus};

fuzz_target!(|data: &[u8]| {
    if let Ok(docs) = parse_corpus(data) {
        for c in chunk_corpus(&docs, 7, 97, true) {
            assert!(c.word_count >= 1 && c.word_count <= 7);
            assert!(c.token_ids.iter().all(|&t| t < 97));
        }
    }
});
